#include "sae/gmrf_priors.hpp"

#include <cmath>
#include <sstream>

#include "sae/common.hpp"
#include "sae/sparse_cholesky.hpp"

namespace sae {

namespace {

using Triplet = Eigen::Triplet<double>;

SparseMatrix from_triplets(Eigen::Index rows, Eigen::Index cols,
                           const std::vector<Triplet>& triplets) {
  SparseMatrix m(rows, cols);
  m.setFromTriplets(triplets.begin(), triplets.end());
  return m;
}

SparseMatrix sparse_identity(Eigen::Index n) {
  SparseMatrix m(n, n);
  m.setIdentity();
  return m;
}

// Places `inner` at (offset, offset) inside an n x n zero matrix.
SparseMatrix embed(const SparseMatrix& inner, Eigen::Index n, Eigen::Index row_offset,
                   Eigen::Index col_offset) {
  std::vector<Triplet> t;
  for (Eigen::Index j = 0; j < inner.outerSize(); ++j) {
    for (SparseMatrix::InnerIterator it(inner, j); it; ++it) {
      t.emplace_back(it.row() + row_offset, it.col() + col_offset, it.value());
    }
  }
  return from_triplets(n, n, t);
}

Eigen::VectorXd centred_trend(Eigen::Index n) {
  Eigen::VectorXd t(n);
  const double mid = 0.5 * static_cast<double>(n - 1);
  for (Eigen::Index i = 0; i < n; ++i) t[i] = static_cast<double>(i) - mid;
  return t.normalized();
}

SparseMatrix dense_to_sparse(const Eigen::MatrixXd& d) { return d.sparseView(0.0, 0.0); }

// Per-component indicator rows, normalized; components listed in label order.
Eigen::MatrixXd component_constraints(const GeographyGraph& graph) {
  const auto n = static_cast<Eigen::Index>(graph.size());
  const auto k = static_cast<Eigen::Index>(graph.component_count());
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(k, n);
  for (Eigen::Index i = 0; i < n; ++i) c(static_cast<Eigen::Index>(graph.component_of()[i]), i) = 1.0;
  for (Eigen::Index r = 0; r < k; ++r) c.row(r).normalize();
  return c;
}

double log_det_spd(const Eigen::MatrixXd& m) {
  Eigen::LLT<Eigen::MatrixXd> llt(m);
  if (llt.info() != Eigen::Success) throw NumericalError("dense matrix not positive definite");
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

}  // namespace

PrecisionStructure rw2_structure(Eigen::Index n_times) {
  if (n_times < 3) throw InputError("RW2 needs at least 3 time points");
  const Eigen::Index T = n_times;
  std::vector<Triplet> d;  // (T-2) x T second differences
  for (Eigen::Index r = 0; r + 2 < T; ++r) {
    d.emplace_back(r, r, 1.0);
    d.emplace_back(r, r + 1, -2.0);
    d.emplace_back(r, r + 2, 1.0);
  }
  const SparseMatrix diff = from_triplets(T - 2, T, d);
  PrecisionStructure s;
  s.dim = T;
  s.structure = SparseMatrix(diff.transpose() * diff);
  s.structure.makeCompressed();
  s.rank_deficiency = 2;
  s.constraints.resize(2, T);
  s.constraints.row(0) = Eigen::RowVectorXd::Constant(T, 1.0 / std::sqrt(static_cast<double>(T)));
  s.constraints.row(1) = centred_trend(T).transpose();
  return s;
}

PrecisionStructure icar_structure(const GeographyGraph& graph) {
  const auto n = static_cast<Eigen::Index>(graph.size());
  if (n == 0) throw InputError("ICAR structure needs a non-empty graph");
  std::vector<Triplet> t;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& nb = graph.neighbours()[static_cast<std::size_t>(i)];
    // Isolated areas keep an explicit zero diagonal so the pattern is complete.
    t.emplace_back(i, i, static_cast<double>(nb.size()));
    for (auto j : nb) t.emplace_back(i, static_cast<Eigen::Index>(j), -1.0);
  }
  PrecisionStructure s;
  s.dim = n;
  s.structure = from_triplets(n, n, t);
  s.rank_deficiency = static_cast<Eigen::Index>(graph.component_count());
  s.constraints = component_constraints(graph);
  return s;
}

Eigen::VectorXd constrained_marginal_variances(const SparseMatrix& precision,
                                               const Eigen::MatrixXd& constraints) {
  const Eigen::Index n = precision.rows();
  SparseMatrix qt = precision;
  if (constraints.rows() > 0) qt += dense_to_sparse(constraints.transpose() * constraints);
  SparseCholesky chol;
  if (!chol.compute(qt)) throw NumericalError("constrained precision is not positive definite");
  const Eigen::MatrixXd inv = chol.solve(Eigen::MatrixXd(Eigen::MatrixXd::Identity(n, n)));
  Eigen::VectorXd var = inv.diagonal();
  if (constraints.rows() > 0) {
    const Eigen::MatrixXd w = inv * constraints.transpose();
    const Eigen::MatrixXd cw = constraints * w;
    const Eigen::MatrixXd correction = w * cw.llt().solve(w.transpose());
    var -= correction.diagonal();
  }
  return var;
}

double constrained_log_det(const SparseMatrix& precision, const Eigen::MatrixXd& constraints) {
  SparseMatrix qt = precision;
  if (constraints.rows() > 0) qt += dense_to_sparse(constraints.transpose() * constraints);
  SparseCholesky chol;
  if (!chol.compute(qt)) throw NumericalError("constrained precision is not positive definite");
  double ld = chol.log_det();
  if (constraints.rows() > 0) {
    const Eigen::MatrixXd w = chol.solve(Eigen::MatrixXd(constraints.transpose()));
    ld += log_det_spd(constraints * w);
    ld -= log_det_spd(constraints * constraints.transpose());
  }
  return ld;
}

PrecisionStructure scaled_icar_structure(const GeographyGraph& graph) {
  auto s = icar_structure(graph);
  const auto var = constrained_marginal_variances(s.structure, s.constraints);
  const auto k = graph.component_count();
  std::vector<double> log_sum(k, 0.0);
  std::vector<std::size_t> count(k, 0);
  for (std::size_t i = 0; i < graph.size(); ++i) {
    const auto c = graph.component_of()[i];
    count[c] += 1;
    if (var[static_cast<Eigen::Index>(i)] > 0.0) log_sum[c] += std::log(var[static_cast<Eigen::Index>(i)]);
  }
  std::vector<double> factor(k, 1.0);
  double log_factor_sum = 0.0;
  std::size_t scaled = 0;
  for (std::size_t c = 0; c < k; ++c) {
    if (count[c] < 2) continue;
    factor[c] = std::exp(log_sum[c] / static_cast<double>(count[c]));
    log_factor_sum += std::log(factor[c]);
    ++scaled;
  }
  std::vector<Triplet> t;
  for (Eigen::Index j = 0; j < s.structure.outerSize(); ++j) {
    for (SparseMatrix::InnerIterator it(s.structure, j); it; ++it) {
      const auto c = graph.component_of()[static_cast<std::size_t>(it.row())];
      t.emplace_back(it.row(), it.col(), it.value() * factor[c]);
    }
  }
  s.structure = from_triplets(s.dim, s.dim, t);
  s.scaling = scaled ? std::exp(log_factor_sum / static_cast<double>(scaled)) : 1.0;
  return s;
}

PrecisionStructure interaction_type2(Eigen::Index n_times, Eigen::Index n_areas) {
  if (n_areas < 1) throw InputError("interaction needs at least one area");
  const auto base = rw2_structure(n_times);
  const Eigen::Index T = n_times;
  std::vector<Triplet> t;
  PrecisionStructure s;
  s.dim = n_areas * T;
  s.constraints = Eigen::MatrixXd::Zero(2 * n_areas, s.dim);
  for (Eigen::Index a = 0; a < n_areas; ++a) {
    for (Eigen::Index j = 0; j < base.structure.outerSize(); ++j) {
      for (SparseMatrix::InnerIterator it(base.structure, j); it; ++it) {
        t.emplace_back(a * T + it.row(), a * T + it.col(), it.value());
      }
    }
    s.constraints.block(2 * a, a * T, 2, T) = base.constraints;
  }
  s.structure = from_triplets(s.dim, s.dim, t);
  s.rank_deficiency = 2 * n_areas;
  return s;
}

PrecisionStructure interaction_type2(Eigen::Index n_times, const GeographyGraph& graph) {
  return interaction_type2(n_times, static_cast<Eigen::Index>(graph.size()));
}

PrecisionStructure iid_structure(Eigen::Index n) {
  if (n < 1) throw InputError("iid block needs n >= 1");
  PrecisionStructure s;
  s.dim = n;
  s.structure = sparse_identity(n);
  s.rank_deficiency = 0;
  s.constraints.resize(0, n);
  return s;
}

std::string_view to_string(Effect effect) {
  switch (effect) {
    case Effect::intercept: return "intercept";
    case Effect::iid_time: return "iid_time";
    case Effect::rw2_time: return "rw2_time";
    case Effect::space: return "space";
    case Effect::interaction: return "interaction";
    case Effect::survey: return "survey";
    case Effect::survey_space: return "survey_space";
    case Effect::survey_time: return "survey_time";
  }
  return "unknown";
}

SparseMatrix EffectBlock::precision(std::span<const double> hyper) const {
  SparseMatrix q(dim, dim);
  for (const auto& term : terms) q += term.coefficient(hyper) * term.matrix;
  return q;
}

namespace {

HyperParameter precision_hyper(std::string name) {
  return {std::move(name), HyperKind::precision, GammaPrior{}};
}

// Sets log_det_constant so that log_det_scale(ref) + constant equals the numeric
// constrained log-determinant at the reference hyperparameters.
void calibrate_log_det(EffectBlock& b, std::span<const double> ref) {
  b.log_det_constant = constrained_log_det(b.precision(ref), b.constraints) - b.log_det_scale(ref);
}

}  // namespace

EffectBlock intercept_block() {
  EffectBlock b;
  b.effect = Effect::intercept;
  b.name = "intercept";
  b.dim = 1;
  b.terms.push_back({sparse_identity(1), [](std::span<const double>) { return kDiffusePrecision; }});
  b.constraints.resize(0, 1);
  b.log_det_scale = [](std::span<const double>) { return 0.0; };
  b.log_det_constant = std::log(kDiffusePrecision);
  b.loading = [](Eigen::Index, Eigen::Index, Eigen::Index) { return std::vector<Eigen::Index>{0}; };
  return b;
}

EffectBlock iid_block(Eigen::Index n, Effect effect, const GridShape& grid) {
  const auto s = iid_structure(n);
  EffectBlock b;
  b.effect = effect;
  b.name = std::string(to_string(effect));
  b.dim = n;
  b.hypers.push_back(precision_hyper("tau_" + b.name));
  b.terms.push_back({s.structure, [](std::span<const double> h) { return h[0]; }});
  b.constraints = s.constraints;
  b.log_det_scale = [n](std::span<const double> h) { return static_cast<double>(n) * std::log(h[0]); };
  b.log_det_constant = 0.0;
  const auto S = std::max<Eigen::Index>(grid.n_surveys, 1);
  switch (effect) {
    case Effect::iid_time:
      b.loading = [](Eigen::Index, Eigen::Index t, Eigen::Index) { return std::vector<Eigen::Index>{t}; };
      break;
    case Effect::survey:
      b.in_fitted_eta = false;
      b.loading = [](Eigen::Index, Eigen::Index, Eigen::Index s) { return std::vector<Eigen::Index>{s}; };
      break;
    case Effect::survey_space:
      b.in_fitted_eta = false;
      b.loading = [S](Eigen::Index i, Eigen::Index, Eigen::Index s) {
        return std::vector<Eigen::Index>{i * S + s};
      };
      break;
    case Effect::survey_time:
      b.in_fitted_eta = false;
      b.loading = [S](Eigen::Index, Eigen::Index t, Eigen::Index s) {
        return std::vector<Eigen::Index>{t * S + s};
      };
      break;
    default:
      // Plain index: coordinate = area for space-like uses, otherwise time.
      b.loading = [](Eigen::Index i, Eigen::Index, Eigen::Index) { return std::vector<Eigen::Index>{i}; };
      break;
  }
  return b;
}

EffectBlock rw2_block(Eigen::Index n_times) {
  const auto s = rw2_structure(n_times);
  const Eigen::Index T = n_times;
  const Eigen::VectorXd trend = s.constraints.row(1).transpose();
  EffectBlock b;
  b.effect = Effect::rw2_time;
  b.name = "rw2_time";
  b.dim = T;
  b.hypers.push_back(precision_hyper("tau_rw2_time"));
  b.terms.push_back({s.structure, [](std::span<const double> h) { return h[0]; }});
  b.terms.push_back({dense_to_sparse(trend * trend.transpose()),
                     [](std::span<const double>) { return kDiffusePrecision; }});
  b.constraints = s.constraints.topRows(1);
  b.log_det_scale = [T](std::span<const double> h) {
    return static_cast<double>(T - 2) * std::log(h[0]);
  };
  const double ref[] = {1.0};
  calibrate_log_det(b, ref);
  b.loading = [](Eigen::Index, Eigen::Index t, Eigen::Index) { return std::vector<Eigen::Index>{t}; };
  return b;
}

EffectBlock bym_block(const GeographyGraph& graph, SpatialVariant variant) {
  const auto n = static_cast<Eigen::Index>(graph.size());
  const auto k = static_cast<Eigen::Index>(graph.component_count());
  EffectBlock b;
  b.effect = Effect::space;
  b.dim = 2 * n;
  const auto I = sparse_identity(n);
  if (variant == SpatialVariant::bym) {
    const auto icar = icar_structure(graph);
    b.name = "space_bym";
    b.hypers = {precision_hyper("tau_space_structured"), precision_hyper("tau_space_unstructured")};
    b.terms.push_back({embed(icar.structure, 2 * n, 0, 0), [](std::span<const double> h) { return h[0]; }});
    b.terms.push_back({embed(I, 2 * n, n, n), [](std::span<const double> h) { return h[1]; }});
    b.constraints = Eigen::MatrixXd::Zero(k, 2 * n);
    b.constraints.leftCols(n) = icar.constraints;
    b.log_det_scale = [n, k](std::span<const double> h) {
      return static_cast<double>(n - k) * std::log(h[0]) + static_cast<double>(n) * std::log(h[1]);
    };
    const double ref[] = {1.0, 1.0};
    calibrate_log_det(b, ref);
    b.loading = [n](Eigen::Index i, Eigen::Index, Eigen::Index) {
      return std::vector<Eigen::Index>{i, n + i};
    };
  } else {
    const auto scaled = scaled_icar_structure(graph);
    b.name = "space_bym2";
    b.hypers = {precision_hyper("tau_space"), {"phi_space", HyperKind::mixing, GammaPrior{}}};
    SparseMatrix offdiag = embed(I, 2 * n, 0, n);
    offdiag += embed(I, 2 * n, n, 0);
    b.terms.push_back({embed(I, 2 * n, 0, 0),
                       [](std::span<const double> h) { return h[0] / (1.0 - h[1]); }});
    b.terms.push_back({offdiag, [](std::span<const double> h) {
                         return -std::sqrt(h[1] * h[0]) / (1.0 - h[1]);
                       }});
    b.terms.push_back({embed(scaled.structure, 2 * n, n, n), [](std::span<const double>) { return 1.0; }});
    b.terms.push_back({embed(I, 2 * n, n, n),
                       [](std::span<const double> h) { return h[1] / (1.0 - h[1]); }});
    b.constraints = Eigen::MatrixXd::Zero(k, 2 * n);
    b.constraints.rightCols(n) = scaled.constraints;
    b.log_det_scale = [n](std::span<const double> h) {
      return static_cast<double>(n) * std::log(h[0] / (1.0 - h[1]));
    };
    const double ref[] = {1.0, 0.5};
    calibrate_log_det(b, ref);
    b.loading = [](Eigen::Index i, Eigen::Index, Eigen::Index) { return std::vector<Eigen::Index>{i}; };
  }
  return b;
}

EffectBlock interaction_block(Eigen::Index n_times, const GeographyGraph& graph) {
  const auto s = interaction_type2(n_times, graph);
  const auto n_areas = static_cast<Eigen::Index>(graph.size());
  const Eigen::Index T = n_times;
  EffectBlock b;
  b.effect = Effect::interaction;
  b.name = "interaction";
  b.dim = s.dim;
  b.hypers.push_back(precision_hyper("tau_interaction"));
  b.terms.push_back({s.structure, [](std::span<const double> h) { return h[0]; }});
  b.constraints = s.constraints;
  const auto free_dim = s.dim - s.rank_deficiency;
  b.log_det_scale = [free_dim](std::span<const double> h) {
    return static_cast<double>(free_dim) * std::log(h[0]);
  };
  // Identical per-area blocks: one small factorization suffices.
  const auto base = rw2_structure(T);
  b.log_det_constant = static_cast<double>(n_areas) * constrained_log_det(base.structure, base.constraints);
  b.loading = [T](Eigen::Index i, Eigen::Index t, Eigen::Index) {
    return std::vector<Eigen::Index>{i * T + t};
  };
  return b;
}

std::string debug_dump(const PrecisionStructure& s) {
  std::ostringstream out;
  out << "dim " << s.dim << "\nrank_deficiency " << s.rank_deficiency << "\nscaling "
      << format_double(s.scaling) << "\nentries\n";
  for (Eigen::Index j = 0; j < s.structure.outerSize(); ++j) {
    for (SparseMatrix::InnerIterator it(s.structure, j); it; ++it) {
      out << it.row() << ' ' << it.col() << ' ' << format_double(it.value()) << '\n';
    }
  }
  out << "constraints " << s.constraints.rows() << '\n';
  for (Eigen::Index r = 0; r < s.constraints.rows(); ++r) {
    for (Eigen::Index c = 0; c < s.constraints.cols(); ++c) {
      out << (c ? " " : "") << format_double(s.constraints(r, c));
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace sae
