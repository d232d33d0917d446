#include "sae/inference.hpp"

#include <gsl/gsl_errno.h>
#include <gsl/gsl_multimin.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "sae/common.hpp"

namespace sae {

// ---------------------------------------------------------------------------
// Model catalog

bool ModelSpec::has(Effect e) const {
  return std::find(effects.begin(), effects.end(), e) != effects.end();
}

std::vector<ModelSpec> model_catalog() {
  std::vector<ModelSpec> out;
  for (auto variant : {SpatialVariant::bym, SpatialVariant::bym2}) {
    for (int number = 1; number <= 6; ++number) {
      out.push_back(model_spec(std::to_string(number) + (variant == SpatialVariant::bym ? "a" : "b")));
    }
  }
  return out;
}

ModelSpec model_spec(std::string_view id) {
  if (id.size() != 2 || id[0] < '1' || id[0] > '6' || (id[1] != 'a' && id[1] != 'b')) {
    throw InputError("unknown model id '" + std::string(id) + "'");
  }
  ModelSpec spec;
  spec.id = std::string(id);
  spec.number = id[0] - '0';
  spec.variant = id[1] == 'a' ? SpatialVariant::bym : SpatialVariant::bym2;
  spec.effects = {Effect::intercept, Effect::iid_time, Effect::rw2_time, Effect::space};
  const int n = spec.number;
  if (n >= 2) spec.effects.push_back(Effect::interaction);
  if (n >= 3) spec.effects.push_back(Effect::survey);
  if (n == 4 || n == 6) spec.effects.push_back(Effect::survey_space);
  if (n == 5 || n == 6) spec.effects.push_back(Effect::survey_time);
  return spec;
}

bool model_id_less(const std::string& lhs, const std::string& rhs) {
  const auto l = model_spec(lhs);
  const auto r = model_spec(rhs);
  if (l.number != r.number) return l.number < r.number;
  return static_cast<int>(l.variant) < static_cast<int>(r.variant);
}

// ---------------------------------------------------------------------------
// System assembly

std::vector<std::string> LatentSystem::coordinate_names() const {
  std::vector<std::string> names;
  names.reserve(static_cast<std::size_t>(dim));
  for (const auto& b : blocks) {
    for (Eigen::Index j = 0; j < b.dim; ++j) names.push_back(b.name + "[" + std::to_string(j) + "]");
  }
  return names;
}

SparseMatrix LatentSystem::prior_precision(std::span<const double> hyper) const {
  std::vector<Eigen::Triplet<double>> t;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const auto local = hyper.subspan(hyper_offset[b], blocks[b].hypers.size());
    const auto q = blocks[b].precision(local);
    for (Eigen::Index j = 0; j < q.outerSize(); ++j) {
      for (SparseMatrix::InnerIterator it(q, j); it; ++it) {
        t.emplace_back(block_offset[b] + it.row(), block_offset[b] + it.col(), it.value());
      }
    }
  }
  SparseMatrix out(dim, dim);
  out.setFromTriplets(t.begin(), t.end());
  return out;
}

LatentSystem build_system(std::vector<EffectBlock> blocks, const GridShape& grid,
                          std::vector<DataPoint> data) {
  LatentSystem s;
  s.blocks = std::move(blocks);
  s.grid = grid;
  s.data = std::move(data);
  Eigen::Index k_total = 0;
  for (const auto& b : s.blocks) {
    s.block_offset.push_back(s.dim);
    s.hyper_offset.push_back(s.hypers.size());
    s.dim += b.dim;
    k_total += b.constraints.rows();
    for (const auto& h : b.hypers) s.hypers.push_back(h);
  }
  s.constraints = Eigen::MatrixXd::Zero(k_total, s.dim);
  Eigen::Index row = 0;
  for (std::size_t b = 0; b < s.blocks.size(); ++b) {
    const auto& c = s.blocks[b].constraints;
    s.constraints.block(row, s.block_offset[b], c.rows(), c.cols()) = c;
    row += c.rows();
  }

  const auto n = static_cast<Eigen::Index>(s.data.size());
  s.y.resize(n);
  s.var_y.resize(n);
  std::vector<Eigen::Triplet<double>> t;
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto& d = s.data[static_cast<std::size_t>(r)];
    if (!(d.var_y > 0.0) || !std::isfinite(d.var_y) || !std::isfinite(d.y)) {
      throw InputError("data point " + std::to_string(r) + " has invalid value or variance");
    }
    if (d.area < 0 || d.area >= std::max<Eigen::Index>(grid.n_areas, 1) || d.time < 0 ||
        d.time >= std::max<Eigen::Index>(grid.n_times, 1) || d.survey < 0 ||
        d.survey >= std::max<Eigen::Index>(grid.n_surveys, 1)) {
      throw InputError("data point " + std::to_string(r) + " lies outside the latent grid");
    }
    s.y[r] = d.y;
    s.var_y[r] = d.var_y;
    for (std::size_t b = 0; b < s.blocks.size(); ++b) {
      for (auto c : s.blocks[b].loading(d.area, d.time, d.survey)) {
        t.emplace_back(r, s.block_offset[b] + c, 1.0);
      }
    }
  }
  s.design.resize(n, s.dim);
  s.design.setFromTriplets(t.begin(), t.end());

  t.clear();
  const Eigen::Index n_eta = grid.n_areas * grid.n_times;
  for (Eigen::Index i = 0; i < grid.n_areas; ++i) {
    for (Eigen::Index tt = 0; tt < grid.n_times; ++tt) {
      for (std::size_t b = 0; b < s.blocks.size(); ++b) {
        if (!s.blocks[b].in_fitted_eta) continue;
        for (auto c : s.blocks[b].loading(i, tt, 0)) {
          t.emplace_back(s.eta_index(i, tt), s.block_offset[b] + c, 1.0);
        }
      }
    }
  }
  s.eta_map.resize(n_eta, s.dim);
  s.eta_map.setFromTriplets(t.begin(), t.end());
  return s;
}

LatentSystem assemble_system(const std::vector<DirectEstimate>& cells, const ModelSpec& spec,
                             const GeographyGraph& geography, const TimeGrid& years) {
  if (years.size() < 3) throw InputError("the year grid needs at least 3 years for RW2 effects");
  std::vector<DirectEstimate> usable;
  for (const auto& c : cells) {
    if (c.usable()) usable.push_back(c);
  }
  if (usable.empty()) throw InputError("empty likelihood: no usable direct-estimate cells");

  std::vector<std::string> surveys;
  for (const auto& c : usable) surveys.push_back(c.survey_family);
  std::sort(surveys.begin(), surveys.end());
  surveys.erase(std::unique(surveys.begin(), surveys.end()), surveys.end());

  GridShape grid;
  grid.n_areas = static_cast<Eigen::Index>(geography.size());
  grid.n_times = years.size();
  grid.n_surveys = static_cast<Eigen::Index>(surveys.size());

  std::vector<DataPoint> data;
  for (const auto& c : usable) {
    const auto area = geography.index_of(c.area_id);
    if (!area) throw InputError("cell references unknown area '" + c.area_id + "'");
    if (c.year < years.first || c.year > years.last) {
      throw InputError("cell year " + std::to_string(c.year) + " is outside the year grid");
    }
    const auto s = std::lower_bound(surveys.begin(), surveys.end(), c.survey_family) - surveys.begin();
    data.push_back({static_cast<Eigen::Index>(*area), c.year - years.first, s, c.y, c.var_y});
  }

  std::vector<EffectBlock> blocks;
  blocks.push_back(intercept_block());
  blocks.push_back(iid_block(grid.n_times, Effect::iid_time, grid));
  blocks.push_back(rw2_block(grid.n_times));
  blocks.push_back(bym_block(geography, spec.variant));
  if (spec.has(Effect::interaction)) blocks.push_back(interaction_block(grid.n_times, geography));
  if (spec.has(Effect::survey)) blocks.push_back(iid_block(grid.n_surveys, Effect::survey, grid));
  if (spec.has(Effect::survey_space)) {
    blocks.push_back(iid_block(grid.n_areas * grid.n_surveys, Effect::survey_space, grid));
  }
  if (spec.has(Effect::survey_time)) {
    blocks.push_back(iid_block(grid.n_times * grid.n_surveys, Effect::survey_time, grid));
  }

  auto system = build_system(std::move(blocks), grid, std::move(data));
  system.model_id = spec.id;
  system.areas = geography.areas();
  system.years = years;
  system.surveys = std::move(surveys);
  system.cells = std::move(usable);
  return system;
}

// ---------------------------------------------------------------------------
// Gaussian conditional

namespace {

constexpr double kJitter = 1e-10;

double log_det_spd(const Eigen::MatrixXd& m) {
  if (m.rows() == 0) return 0.0;
  Eigen::LLT<Eigen::MatrixXd> llt(m);
  if (llt.info() != Eigen::Success) throw NumericalError("constraint system is singular");
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

Eigen::Index find_position(const SparseMatrix& m, Eigen::Index row, Eigen::Index col) {
  const auto* outer = m.outerIndexPtr();
  const auto* inner = m.innerIndexPtr();
  const auto* first = inner + outer[col];
  const auto* last = inner + outer[col + 1];
  const auto* it = std::lower_bound(first, last, static_cast<int>(row));
  if (it == last || *it != row) throw NumericalError("entry missing from precision pattern");
  return static_cast<Eigen::Index>(it - inner);
}

}  // namespace

GaussianConditional::GaussianConditional(const LatentSystem& system) : system_(&system) {
  const auto n = system.dim;
  const auto& c = system.constraints;

  // Global prior terms.
  std::vector<SparseMatrix> terms;
  for (std::size_t b = 0; b < system.blocks.size(); ++b) {
    const auto& block = system.blocks[b];
    for (std::size_t j = 0; j < block.terms.size(); ++j) {
      std::vector<Eigen::Triplet<double>> t;
      const auto& m = block.terms[j].matrix;
      for (Eigen::Index col = 0; col < m.outerSize(); ++col) {
        for (SparseMatrix::InnerIterator it(m, col); it; ++it) {
          t.emplace_back(system.block_offset[b] + it.row(), system.block_offset[b] + it.col(),
                         it.value());
        }
      }
      SparseMatrix g(n, n);
      g.setFromTriplets(t.begin(), t.end());
      terms.push_back(std::move(g));
      term_owner_.emplace_back(b, j);
    }
  }

  const Eigen::VectorXd inv_var = system.var_y.cwiseInverse();
  SparseMatrix data_part = SparseMatrix(system.design.transpose() * inv_var.asDiagonal() * system.design);
  SparseMatrix cc = c.rows() ? SparseMatrix((c.transpose() * c).sparseView(0.0, 0.0)) : SparseMatrix(n, n);

  // Union pattern with strictly positive placeholder values so nothing cancels.
  std::vector<Eigen::Triplet<double>> pt;
  const auto add_pattern = [&pt](const SparseMatrix& m) {
    for (Eigen::Index col = 0; col < m.outerSize(); ++col) {
      for (SparseMatrix::InnerIterator it(m, col); it; ++it) pt.emplace_back(it.row(), it.col(), 1.0);
    }
  };
  for (const auto& m : terms) add_pattern(m);
  add_pattern(data_part);
  add_pattern(cc);
  for (Eigen::Index i = 0; i < n; ++i) pt.emplace_back(i, i, 1.0);
  pattern_.resize(n, n);
  pattern_.setFromTriplets(pt.begin(), pt.end());
  pattern_.makeCompressed();

  base_values_ = Eigen::VectorXd::Zero(pattern_.nonZeros());
  const auto scatter_into = [this](const SparseMatrix& m, Eigen::VectorXd& values) {
    for (Eigen::Index col = 0; col < m.outerSize(); ++col) {
      for (SparseMatrix::InnerIterator it(m, col); it; ++it) {
        values[find_position(pattern_, it.row(), it.col())] += it.value();
      }
    }
  };
  scatter_into(data_part, base_values_);
  scatter_into(cc, base_values_);
  for (const auto& m : terms) {
    std::vector<std::pair<Eigen::Index, double>> vals;
    for (Eigen::Index col = 0; col < m.outerSize(); ++col) {
      for (SparseMatrix::InnerIterator it(m, col); it; ++it) {
        vals.emplace_back(find_position(pattern_, it.row(), it.col()), it.value());
      }
    }
    term_values_.push_back(std::move(vals));
  }
  col_of_.resize(static_cast<std::size_t>(pattern_.nonZeros()));
  for (Eigen::Index col = 0; col < pattern_.outerSize(); ++col) {
    for (auto p = pattern_.outerIndexPtr()[col]; p < pattern_.outerIndexPtr()[col + 1]; ++p) {
      col_of_[static_cast<std::size_t>(p)] = col;
    }
  }
  diagonal_positions_.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) diagonal_positions_[i] = find_position(pattern_, i, i);

  data_rhs_ = system.design.transpose() * system.y.cwiseProduct(inv_var);
  log_det_cc_ = log_det_spd(c * c.transpose());
  data_log_norm_ = 0.0;
  for (Eigen::Index i = 0; i < system.var_y.size(); ++i) {
    data_log_norm_ -= 0.5 * (kLog2Pi + std::log(system.var_y[i]));
  }
  q_ = pattern_;
}

void GaussianConditional::factorize_with_jitter() {
  if (!analyzed_) {
    chol_.analyze(pattern_);
    analyzed_ = true;
  }
  jittered_ = false;
  if (chol_.factorize(q_)) return;
  for (auto pos : diagonal_positions_) q_.valuePtr()[pos] += kJitter;
  jittered_ = true;
  if (chol_.factorize(q_)) return;

  // Name the first block whose own constrained prior is not positive definite.
  const auto& sys = *system_;
  for (std::size_t b = 0; b < sys.blocks.size(); ++b) {
    const auto& block = sys.blocks[b];
    const auto local = std::span<const double>(hyper_).subspan(sys.hyper_offset[b], block.hypers.size());
    SparseMatrix qb = block.precision(local);
    if (block.constraints.rows()) {
      qb += SparseMatrix((block.constraints.transpose() * block.constraints).sparseView(0.0, 0.0));
    }
    SparseCholesky probe;
    if (!probe.compute(qb)) {
      throw NumericalError("prior precision of block '" + block.name + "' is not positive definite");
    }
  }
  throw NumericalError("posterior precision of model " + sys.model_id +
                       " is not positive definite after jitter");
}

void GaussianConditional::set_hyper(std::span<const double> hyper) {
  const auto& sys = *system_;
  if (hyper.size() != sys.n_hyper()) throw InputError("hyperparameter vector has the wrong length");
  hyper_.assign(hyper.begin(), hyper.end());

  Eigen::Map<Eigen::VectorXd> values(q_.valuePtr(), q_.nonZeros());
  values = base_values_;
  std::vector<double> coefficient(term_owner_.size());
  for (std::size_t j = 0; j < term_owner_.size(); ++j) {
    const auto [b, k] = term_owner_[j];
    const auto local = hyper.subspan(sys.hyper_offset[b], sys.blocks[b].hypers.size());
    coefficient[j] = sys.blocks[b].terms[k].coefficient(local);
    if (!std::isfinite(coefficient[j])) throw NumericalError("non-finite prior coefficient");
    for (const auto& [pos, v] : term_values_[j]) values[pos] += coefficient[j] * v;
  }
  factorize_with_jitter();

  const auto& c = sys.constraints;
  const Eigen::VectorXd m = chol_.solve(data_rhs_);
  double log_det_cw = 0.0;
  if (c.rows()) {
    const Eigen::MatrixXd w = chol_.solve(Eigen::MatrixXd(c.transpose()));
    const Eigen::MatrixXd cw = c * w;
    Eigen::LLT<Eigen::MatrixXd> llt(cw);
    if (llt.info() != Eigen::Success) throw NumericalError("constraint covariance is singular");
    log_det_cw = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    kriging_ = llt.solve(w.transpose()).transpose();
    mean_ = m - kriging_ * (c * m);
  } else {
    kriging_.resize(sys.dim, 0);
    mean_ = m;
  }

  if (sys.n_data() == 0) {
    log_marginal_ = 0.0;
    return;
  }
  const Eigen::VectorXd resid = sys.y - sys.design * mean_;
  const double log_lik = data_log_norm_ - 0.5 * resid.cwiseAbs2().cwiseQuotient(sys.var_y).sum();

  double prior_log_det = 0.0;
  for (std::size_t b = 0; b < sys.blocks.size(); ++b) {
    const auto local = hyper.subspan(sys.hyper_offset[b], sys.blocks[b].hypers.size());
    prior_log_det += sys.blocks[b].log_det_scale(local) + sys.blocks[b].log_det_constant;
  }
  double quad = 0.0;
  {
    // x' Q_prior x accumulated term by term over the shared pattern.
    const auto* inner = pattern_.innerIndexPtr();
    for (std::size_t j = 0; j < term_values_.size(); ++j) {
      double s = 0.0;
      for (const auto& [pos, v] : term_values_[j]) {
        s += v * mean_[inner[pos]] * mean_[col_of_[static_cast<std::size_t>(pos)]];
      }
      quad += coefficient[j] * s;
    }
  }
  const double post_log_det = chol_.log_det() + log_det_cw - log_det_cc_;
  log_marginal_ = log_lik + 0.5 * prior_log_det - 0.5 * quad - 0.5 * post_log_det;
}

Eigen::VectorXd GaussianConditional::sample(std::mt19937_64& rng) const {
  std::normal_distribution<double> normal;
  Eigen::VectorXd z(system_->dim);
  for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = normal(rng);
  Eigen::VectorXd x = mean_ + chol_.sample_zero_mean(z);
  if (system_->constraints.rows()) x -= kriging_ * (system_->constraints * x);
  return x;
}

Eigen::VectorXd GaussianConditional::marginal_variances() const {
  const auto n = system_->dim;
  const auto& c = system_->constraints;
  Eigen::VectorXd var(n);
  Eigen::VectorXd e = Eigen::VectorXd::Zero(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    e[i] = 1.0;
    var[i] = chol_.solve(e)[i];
    e[i] = 0.0;
  }
  if (c.rows()) {
    // diag(W (CW)^-1 W') with W = Q~^-1 C' = kriging * (C W).
    const Eigen::MatrixXd w = chol_.solve(Eigen::MatrixXd(c.transpose()));
    var -= kriging_.cwiseProduct(w).rowwise().sum();
  }
  return var;
}

double marginal_loglik(const LatentSystem& system, std::span<const double> hyper) {
  GaussianConditional g(system);
  g.set_hyper(hyper);
  return g.log_marginal();
}

Eigen::VectorXd sample_latent(const LatentSystem& system, std::span<const double> hyper,
                              std::uint64_t seed) {
  GaussianConditional g(system);
  g.set_hyper(hyper);
  std::mt19937_64 rng(seed);
  return g.sample(rng);
}

// ---------------------------------------------------------------------------
// Hyperparameter transforms and prior

std::vector<double> to_natural(const LatentSystem& system, std::span<const double> transformed) {
  std::vector<double> out(transformed.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = system.hypers[i].kind == HyperKind::precision ? std::exp(transformed[i])
                                                           : inv_logit(transformed[i]);
  }
  return out;
}

std::vector<double> to_transformed(const LatentSystem& system, std::span<const double> natural) {
  std::vector<double> out(natural.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = system.hypers[i].kind == HyperKind::precision ? std::log(natural[i]) : logit(natural[i]);
  }
  return out;
}

double log_hyper_prior_transformed(const LatentSystem& system, std::span<const double> u) {
  double lp = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const auto& h = system.hypers[i];
    if (h.kind == HyperKind::precision) {
      const double a = h.prior.shape;
      const double b = h.prior.rate;
      lp += a * std::log(b) - std::lgamma(a) + a * u[i] - b * std::exp(u[i]);
    } else {
      lp += -std::log1p(std::exp(-u[i])) - std::log1p(std::exp(u[i]));
    }
  }
  return lp;
}

namespace {

constexpr double kTransformBound = 40.0;

// Log posterior on the transformed scale; -inf outside the supported box or when
// the conditional cannot be factorized.
double log_posterior(GaussianConditional& g, const LatentSystem& system, std::span<const double> u) {
  for (double v : u) {
    if (!std::isfinite(v) || std::abs(v) > kTransformBound) return -std::numeric_limits<double>::infinity();
  }
  try {
    const auto natural = to_natural(system, u);
    g.set_hyper(natural);
  } catch (const NumericalError&) {
    return -std::numeric_limits<double>::infinity();
  }
  return g.log_marginal() + log_hyper_prior_transformed(system, u);
}

struct ModeProblem {
  const LatentSystem* system;
  GaussianConditional* conditional;
  std::size_t evaluations = 0;
};

double mode_objective(const gsl_vector* x, void* params) {
  auto* p = static_cast<ModeProblem*>(params);
  std::vector<double> u(x->size);
  for (std::size_t i = 0; i < x->size; ++i) u[i] = gsl_vector_get(x, i);
  ++p->evaluations;
  const double lp = log_posterior(*p->conditional, *p->system, u);
  return std::isfinite(lp) ? -lp : 1e100;
}

void mode_gradient(const gsl_vector* x, void* params, gsl_vector* grad) {
  constexpr double h = 1e-4;
  gsl_vector* probe = gsl_vector_alloc(x->size);
  gsl_vector_memcpy(probe, x);
  for (std::size_t i = 0; i < x->size; ++i) {
    const double xi = gsl_vector_get(x, i);
    gsl_vector_set(probe, i, xi + h);
    const double fp = mode_objective(probe, params);
    gsl_vector_set(probe, i, xi - h);
    const double fm = mode_objective(probe, params);
    gsl_vector_set(probe, i, xi);
    gsl_vector_set(grad, i, (fp - fm) / (2.0 * h));
  }
  gsl_vector_free(probe);
}

void mode_fdf(const gsl_vector* x, void* params, double* f, gsl_vector* grad) {
  *f = mode_objective(x, params);
  mode_gradient(x, params, grad);
}

std::vector<double> default_start(const LatentSystem& system) {
  std::vector<double> u(system.n_hyper());
  for (std::size_t i = 0; i < u.size(); ++i) {
    u[i] = system.hypers[i].kind == HyperKind::precision ? 2.0 : 0.0;
  }
  return u;
}

}  // namespace

HyperMode find_hyper_mode(const LatentSystem& system) {
  HyperMode mode;
  GaussianConditional g(system);
  const auto d = system.n_hyper();
  if (d == 0) {
    g.set_hyper({});
    mode.log_posterior = g.log_marginal();
    mode.converged = true;
    return mode;
  }
  ModeProblem problem{&system, &g};
  gsl_multimin_function_fdf fn;
  fn.n = d;
  fn.f = &mode_objective;
  fn.df = &mode_gradient;
  fn.fdf = &mode_fdf;
  fn.params = &problem;

  gsl_set_error_handler_off();
  gsl_vector* x = gsl_vector_alloc(d);
  const auto start = default_start(system);
  for (std::size_t i = 0; i < d; ++i) gsl_vector_set(x, i, start[i]);
  auto* minimizer = gsl_multimin_fdfminimizer_alloc(gsl_multimin_fdfminimizer_vector_bfgs2, d);
  gsl_multimin_fdfminimizer_set(minimizer, &fn, x, 0.5, 0.1);

  int iter = 0;
  int status = GSL_CONTINUE;
  constexpr int kMaxIterations = 300;
  while (iter < kMaxIterations) {
    ++iter;
    status = gsl_multimin_fdfminimizer_iterate(minimizer);
    if (status) break;
    status = gsl_multimin_test_gradient(minimizer->gradient, 1e-3);
    if (status == GSL_SUCCESS) break;
  }
  mode.iterations = iter;
  mode.converged = status == GSL_SUCCESS;
  mode.transformed.resize(d);
  for (std::size_t i = 0; i < d; ++i) mode.transformed[i] = gsl_vector_get(minimizer->x, i);
  mode.log_posterior = -minimizer->f;
  gsl_multimin_fdfminimizer_free(minimizer);
  gsl_vector_free(x);
  mode.natural = to_natural(system, mode.transformed);
  return mode;
}

// ---------------------------------------------------------------------------
// Adaptive random-walk Metropolis

HyperChain sample_hyper(const LatentSystem& system, const McmcSettings& settings,
                        std::uint64_t seed, const RetainedCallback& on_retained,
                        std::optional<std::vector<double>> start) {
  if (settings.samples < 1 || settings.thin < 1 || settings.burn_in < 0 || settings.adapt < 0) {
    throw InputError("invalid MCMC settings");
  }
  const auto d = system.n_hyper();
  HyperChain chain;
  chain.samples.resize(settings.samples, static_cast<Eigen::Index>(d));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> uniform;

  auto current = std::make_unique<GaussianConditional>(system);
  auto proposal = std::make_unique<GaussianConditional>(system);

  std::vector<double> u = start ? to_transformed(system, *start) : find_hyper_mode(system).transformed;
  double lp = log_posterior(*current, system, u);
  if (!std::isfinite(lp)) {
    u = default_start(system);
    lp = log_posterior(*current, system, u);
    if (!std::isfinite(lp)) throw NumericalError("cannot evaluate the starting hyperparameters");
  }

  const auto dd = static_cast<Eigen::Index>(d);
  Eigen::MatrixXd cov = Eigen::MatrixXd::Identity(dd, dd) * 0.25;
  const double base_scale = d ? 2.38 * 2.38 / static_cast<double>(d) : 1.0;
  double log_lambda = 0.0;
  const double target_rate = d == 1 ? 0.44 : 0.234;
  Eigen::MatrixXd chol = (cov * base_scale).llt().matrixL();

  Eigen::VectorXd running_mean = Eigen::VectorXd::Zero(dd);
  Eigen::MatrixXd running_m2 = Eigen::MatrixXd::Zero(dd, dd);
  std::size_t n_seen = 0;

  const long total = static_cast<long>(settings.burn_in) +
                     static_cast<long>(settings.samples) * settings.thin;
  long accepted_post = 0;
  long proposed_post = 0;
  int retained = 0;
  std::vector<double> cand(d);

  for (long it = 0; it < total; ++it) {
    bool accepted = false;
    if (d > 0) {
      Eigen::VectorXd z(dd);
      for (Eigen::Index i = 0; i < dd; ++i) z[i] = normal(rng);
      const Eigen::VectorXd step = std::exp(log_lambda) * (chol * z);
      for (std::size_t i = 0; i < d; ++i) cand[i] = u[i] + step[static_cast<Eigen::Index>(i)];
      const double lp_cand = log_posterior(*proposal, system, cand);
      const double log_alpha = lp_cand - lp;
      if (std::isfinite(lp_cand) && std::log(uniform(rng)) < log_alpha) {
        u = cand;
        lp = lp_cand;
        std::swap(current, proposal);
        accepted = true;
      }
      if (it < settings.adapt) {
        const double rate = std::isfinite(log_alpha) ? std::min(1.0, std::exp(log_alpha)) : 0.0;
        log_lambda += (rate - target_rate) / std::pow(static_cast<double>(it + 1), 0.6);
        Eigen::VectorXd uv = Eigen::Map<const Eigen::VectorXd>(u.data(), dd);
        ++n_seen;
        const Eigen::VectorXd delta = uv - running_mean;
        running_mean += delta / static_cast<double>(n_seen);
        running_m2 += delta * (uv - running_mean).transpose();
        if (n_seen >= 200 && n_seen % 50 == 0) {
          cov = running_m2 / static_cast<double>(n_seen - 1) +
                Eigen::MatrixXd::Identity(dd, dd) * 1e-6;
          Eigen::LLT<Eigen::MatrixXd> llt(cov * base_scale);
          if (llt.info() == Eigen::Success) chol = llt.matrixL();
        }
      }
    }
    if (it >= settings.burn_in) {
      ++proposed_post;
      if (accepted) ++accepted_post;
      if ((it - settings.burn_in + 1) % settings.thin == 0) {
        const auto natural = to_natural(system, u);
        for (std::size_t i = 0; i < d; ++i) chain.samples(retained, static_cast<Eigen::Index>(i)) = natural[i];
        if (on_retained) on_retained(retained, *current);
        ++retained;
      }
    }
  }
  chain.acceptance_rate = proposed_post ? static_cast<double>(accepted_post) / static_cast<double>(proposed_post) : 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    std::vector<double> trace(static_cast<std::size_t>(settings.samples));
    for (int k = 0; k < settings.samples; ++k) {
      trace[static_cast<std::size_t>(k)] = std::log(chain.samples(k, static_cast<Eigen::Index>(i)));
      if (system.hypers[i].kind == HyperKind::mixing) {
        trace[static_cast<std::size_t>(k)] = logit(chain.samples(k, static_cast<Eigen::Index>(i)));
      }
    }
    chain.effective_sample_size.push_back(effective_sample_size(trace));
  }
  if (d > 0 && chain.acceptance_rate < 0.05) {
    chain.warnings.push_back("acceptance rate " + format_double(chain.acceptance_rate) +
                             " below 5% after adaptation");
  }
  return chain;
}

// ---------------------------------------------------------------------------
// Fitting

std::string_view to_string(FitMode mode) {
  return mode == FitMode::full ? "full" : "empirical_bayes";
}

FitMode parse_fit_mode(std::string_view name) {
  if (name == "full") return FitMode::full;
  if (name == "empirical_bayes" || name == "eb") return FitMode::empirical_bayes;
  throw InputError("unknown fit mode '" + std::string(name) + "'");
}

PosteriorFit fit_model(const LatentSystem& system, const FitSettings& settings) {
  PosteriorFit fit;
  fit.model_id = system.model_id;
  for (const auto& h : system.hypers) fit.hyper_names.push_back(h.name);
  fit.y = system.y;
  fit.var_y = system.var_y;
  fit.diagnostics.mode = settings.mode;

  const int k = settings.mcmc.samples;
  const auto d = static_cast<Eigen::Index>(system.n_hyper());
  fit.latent_samples.resize(k, system.dim);
  std::mt19937_64 latent_rng(derive_seed(settings.seed, 1));

  if (settings.mode == FitMode::full) {
    std::size_t jittered = 0;
    auto chain = sample_hyper(
        system, settings.mcmc, derive_seed(settings.seed, 0),
        [&](int index, const GaussianConditional& state) {
          fit.latent_samples.row(index) = state.sample(latent_rng).transpose();
          if (state.jittered()) ++jittered;
        });
    fit.hyper_samples = std::move(chain.samples);
    fit.diagnostics.acceptance_rate = chain.acceptance_rate;
    fit.diagnostics.effective_sample_size = std::move(chain.effective_sample_size);
    fit.diagnostics.warnings = std::move(chain.warnings);
    fit.diagnostics.jittered_factorizations = jittered;
  } else {
    const auto mode = find_hyper_mode(system);
    fit.diagnostics.optimizer_iterations = mode.iterations;
    fit.diagnostics.optimizer_converged = mode.converged;
    if (!mode.converged) fit.diagnostics.warnings.push_back("hyperparameter optimizer did not converge");
    GaussianConditional g(system);
    g.set_hyper(mode.natural);
    if (g.jittered()) fit.diagnostics.jittered_factorizations = 1;
    fit.hyper_samples.resize(k, d);
    for (int s = 0; s < k; ++s) {
      for (Eigen::Index j = 0; j < d; ++j) fit.hyper_samples(s, j) = mode.natural[static_cast<std::size_t>(j)];
      fit.latent_samples.row(s) = g.sample(latent_rng).transpose();
    }
  }

  fit.eta_samples = (system.eta_map * fit.latent_samples.transpose()).transpose();
  fit.cell_eta = (system.design * fit.latent_samples.transpose()).transpose();
  fit.cell_loglik.resize(k, system.n_data());
  for (Eigen::Index j = 0; j < system.n_data(); ++j) {
    const double v = system.var_y[j];
    const double norm = -0.5 * (kLog2Pi + std::log(v));
    for (int s = 0; s < k; ++s) {
      const double r = system.y[j] - fit.cell_eta(s, j);
      fit.cell_loglik(s, j) = norm - 0.5 * r * r / v;
    }
  }
  return fit;
}

double fitted_eta(const LatentSystem& system, const Eigen::VectorXd& latent, Eigen::Index area,
                  Eigen::Index time) {
  return system.eta_map.row(system.eta_index(area, time)).dot(latent);
}

// ---------------------------------------------------------------------------
// Summaries and chain diagnostics

double quantile(std::vector<double> values, double prob) {
  if (values.empty()) throw InputError("quantile of an empty sample");
  std::sort(values.begin(), values.end());
  const double h = (static_cast<double>(values.size()) - 1.0) * prob;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

IntervalSummary summarize_values(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  return {quantile(values, 0.5), quantile(values, 0.025), quantile(values, 0.975)};
}

IntervalSummary summarize(std::span<const double> logit_samples) {
  std::vector<double> p(logit_samples.size());
  std::transform(logit_samples.begin(), logit_samples.end(), p.begin(), inv_logit);
  return summarize_values(std::move(p));
}

double effective_sample_size(std::span<const double> chain) {
  const auto n = chain.size();
  if (n < 4) return static_cast<double>(n);
  const double mean = std::accumulate(chain.begin(), chain.end(), 0.0) / static_cast<double>(n);
  double var = 0.0;
  for (double v : chain) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);
  if (!(var > 0.0)) return static_cast<double>(n);
  const auto autocorr = [&](std::size_t lag) {
    double s = 0.0;
    for (std::size_t i = 0; i + lag < n; ++i) s += (chain[i] - mean) * (chain[i + lag] - mean);
    return s / (static_cast<double>(n) * var);
  };
  // Geyer's initial monotone positive sequence over pairs of autocorrelations.
  double tau = -1.0;
  double prev_pair = std::numeric_limits<double>::infinity();
  for (std::size_t lag = 0; lag + 1 < n; lag += 2) {
    double pair = autocorr(lag) + autocorr(lag + 1);
    if (pair <= 0.0) break;
    pair = std::min(pair, prev_pair);
    tau += 2.0 * pair;
    prev_pair = pair;
  }
  tau = std::max(tau, 1.0 / static_cast<double>(n));
  return static_cast<double>(n) / tau;
}

double potential_scale_reduction(const std::vector<std::vector<double>>& chains) {
  const auto m = chains.size();
  if (m < 2) throw InputError("potential scale reduction needs at least two chains");
  const auto n = chains.front().size();
  std::vector<double> means(m), vars(m);
  for (std::size_t c = 0; c < m; ++c) {
    if (chains[c].size() != n || n < 2) throw InputError("chains must share a length >= 2");
    means[c] = std::accumulate(chains[c].begin(), chains[c].end(), 0.0) / static_cast<double>(n);
    double s = 0.0;
    for (double v : chains[c]) s += (v - means[c]) * (v - means[c]);
    vars[c] = s / static_cast<double>(n - 1);
  }
  const double grand = std::accumulate(means.begin(), means.end(), 0.0) / static_cast<double>(m);
  double b = 0.0;
  for (double mu : means) b += (mu - grand) * (mu - grand);
  b *= static_cast<double>(n) / static_cast<double>(m - 1);
  const double w = std::accumulate(vars.begin(), vars.end(), 0.0) / static_cast<double>(m);
  const double var_plus = (static_cast<double>(n) - 1.0) / static_cast<double>(n) * w + b / static_cast<double>(n);
  return std::sqrt(var_plus / w);
}

}  // namespace sae
