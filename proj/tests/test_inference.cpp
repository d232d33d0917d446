#include <cmath>
#include <numeric>
#include <random>

#include <Eigen/Eigenvalues>

#include "doctest.h"
#include "sae/common.hpp"
#include "sae/inference.hpp"

using namespace sae;

namespace {

Eigen::MatrixXd pinv(const Eigen::MatrixXd& m, double tol = 1e-9) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  Eigen::VectorXd inv = es.eigenvalues();
  for (Eigen::Index i = 0; i < inv.size(); ++i) inv[i] = std::abs(inv[i]) < tol ? 0.0 : 1.0 / inv[i];
  return es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
}

GeographyGraph path3() { return GeographyGraph({"A", "B", "C"}, {{"A", "B"}, {"B", "C"}}); }

// Prior covariance of one block written from its generative definition.
Eigen::MatrixXd generative_covariance(const EffectBlock& b, std::span<const double> h,
                                      const GeographyGraph& g, Eigen::Index n_times) {
  const auto n = static_cast<Eigen::Index>(g.size());
  const auto rw2 = rw2_structure(n_times);
  switch (b.effect) {
    case Effect::intercept:
      return Eigen::MatrixXd::Constant(1, 1, 1.0 / kDiffusePrecision);
    case Effect::rw2_time: {
      const Eigen::VectorXd t = rw2.constraints.row(1).transpose();
      return pinv(Eigen::MatrixXd(rw2.structure)) / h[0] + t * t.transpose() / kDiffusePrecision;
    }
    case Effect::interaction: {
      const Eigen::MatrixXd p = pinv(Eigen::MatrixXd(rw2.structure)) / h[0];
      Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n * n_times, n * n_times);
      for (Eigen::Index i = 0; i < n; ++i) out.block(i * n_times, i * n_times, n_times, n_times) = p;
      return out;
    }
    case Effect::space: {
      Eigen::MatrixXd out = Eigen::MatrixXd::Zero(2 * n, 2 * n);
      const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(n, n);
      if (b.name == "space_bym") {
        out.topLeftCorner(n, n) = pinv(Eigen::MatrixXd(icar_structure(g).structure)) / h[0];
        out.bottomRightCorner(n, n) = I / h[1];
      } else {
        const double tau = h[0], phi = h[1];
        const Eigen::MatrixXd pu = pinv(Eigen::MatrixXd(scaled_icar_structure(g).structure));
        out.topLeftCorner(n, n) = ((1 - phi) * I + phi * pu) / tau;
        out.topRightCorner(n, n) = std::sqrt(phi / tau) * pu;
        out.bottomLeftCorner(n, n) = std::sqrt(phi / tau) * pu;
        out.bottomRightCorner(n, n) = pu;
      }
      return out;
    }
    default:
      return Eigen::MatrixXd::Identity(b.dim, b.dim) / h[0];
  }
}

struct DenseOracle {
  double log_marginal = 0.0;
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

// Marginal likelihood log N(y; 0, A S A' + V) and the Gaussian posterior computed
// in covariance form.
DenseOracle dense_oracle(const LatentSystem& s, std::span<const double> h, const GeographyGraph& g) {
  Eigen::MatrixXd S = Eigen::MatrixXd::Zero(s.dim, s.dim);
  for (std::size_t b = 0; b < s.blocks.size(); ++b) {
    const auto local = h.subspan(s.hyper_offset[b], s.blocks[b].hypers.size());
    S.block(s.block_offset[b], s.block_offset[b], s.blocks[b].dim, s.blocks[b].dim) =
        generative_covariance(s.blocks[b], local, g, s.grid.n_times);
  }
  const Eigen::MatrixXd A(s.design);
  const Eigen::MatrixXd M = A * S * A.transpose() + Eigen::MatrixXd(s.var_y.asDiagonal());
  Eigen::LLT<Eigen::MatrixXd> llt(M);
  DenseOracle o;
  const Eigen::VectorXd alpha = llt.solve(s.y);
  o.log_marginal = -0.5 * s.y.dot(alpha) - llt.matrixLLT().diagonal().array().log().sum() -
                   0.5 * static_cast<double>(s.n_data()) * kLog2Pi;
  const Eigen::MatrixXd SA = S * A.transpose();
  o.mean = SA * alpha;
  o.cov = S - SA * llt.solve(SA.transpose());
  return o;
}

std::vector<DirectEstimate> synthetic_cells(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> y(-2.5, 0.0), v(0.05, 0.3);
  std::bernoulli_distribution keep(0.7);
  std::vector<DirectEstimate> cells;
  for (const std::string area : {"A", "B", "C"}) {
    for (int year = 2000; year <= 2003; ++year) {
      for (const std::string fam : {"DHS", "MICS"}) {
        if (!keep(rng)) continue;
        DirectEstimate c;
        c.area_id = area;
        c.year = year;
        c.survey_family = fam;
        c.survey_id = fam + std::to_string(year);
        c.status = CellStatus::ok;
        c.y = y(rng);
        c.var_y = v(rng);
        c.p_hat = inv_logit(c.y);
        cells.push_back(c);
      }
    }
  }
  return cells;
}

std::vector<double> random_hyper(const LatentSystem& s, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> tau(0.5, 5.0), phi(0.1, 0.9);
  std::vector<double> h;
  for (const auto& p : s.hypers) h.push_back(p.kind == HyperKind::precision ? tau(rng) : phi(rng));
  return h;
}

// iid effect of dimension n observed almost exactly: tau | y is close to
// Gamma(a + n/2, b + sum y^2 / 2).
LatentSystem conjugate_system(int n, std::uint64_t seed, double* sum_sq) {
  GridShape grid{1, n, 1};
  std::vector<EffectBlock> blocks = {iid_block(n, Effect::iid_time, grid)};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z(0.0, 1.0 / std::sqrt(4.0));
  std::vector<DataPoint> data;
  *sum_sq = 0.0;
  for (int t = 0; t < n; ++t) {
    const double y = z(rng);
    *sum_sq += y * y;
    data.push_back({0, t, 0, y, 1e-9});
  }
  return build_system(std::move(blocks), grid, std::move(data));
}

double mean_of(const Eigen::VectorXd& v) { return v.mean(); }

}  // namespace

TEST_CASE("model catalog") {
  const auto cat = model_catalog();
  REQUIRE(cat.size() == 12);
  CHECK(cat[0].id == "1a");
  CHECK(cat[11].id == "6b");
  CHECK(model_spec("4b").has(Effect::survey_space));
  CHECK_FALSE(model_spec("5a").has(Effect::survey_space));
  CHECK(model_spec("6a").has(Effect::survey_time));
  CHECK_FALSE(model_spec("1b").has(Effect::interaction));
  CHECK(model_id_less("2b", "3a"));
  CHECK(model_id_less("3a", "3b"));
  CHECK_FALSE(model_id_less("3b", "3a"));
  CHECK_THROWS_AS(model_spec("7a"), InputError);
}

TEST_CASE("assemble_system: dimensions per model") {
  std::mt19937_64 rng(1);
  auto cells = synthetic_cells(rng);
  const auto g = path3();
  const TimeGrid years{2000, 2003};
  // 3 areas, 4 years, 2 survey families.
  const std::map<std::string, Eigen::Index> expected = {
      {"1a", 15}, {"2a", 27}, {"3a", 29}, {"4a", 35}, {"5a", 37}, {"6a", 43}, {"1b", 15}, {"6b", 43}};
  for (const auto& [id, dim] : expected) {
    const auto s = assemble_system(cells, model_spec(id), g, years);
    CHECK(s.dim == dim);
    CHECK(s.n_data() == static_cast<Eigen::Index>(cells.size()));
    CHECK(s.eta_map.rows() == 12);
    CHECK(s.surveys == std::vector<std::string>{"DHS", "MICS"});
  }
}

TEST_CASE("assemble_system: input errors") {
  std::mt19937_64 rng(2);
  auto cells = synthetic_cells(rng);
  const auto g = path3();
  const TimeGrid years{2000, 2003};
  auto bad = cells;
  bad[0].area_id = "Z";
  CHECK_THROWS_WITH_AS(assemble_system(bad, model_spec("1a"), g, years), doctest::Contains("'Z'"), InputError);
  bad = cells;
  bad[0].year = 1999;
  CHECK_THROWS_AS(assemble_system(bad, model_spec("1a"), g, years), InputError);
  CHECK_THROWS_AS(assemble_system(cells, model_spec("1a"), g, TimeGrid{2000, 2001}), InputError);
  for (auto& c : bad) c.status = CellStatus::insufficient_clusters;
  CHECK_THROWS_WITH_AS(assemble_system(bad, model_spec("1a"), g, years), doctest::Contains("empty likelihood"),
                       InputError);
}

TEST_CASE("GaussianConditional matches the dense covariance-form oracle for every model") {
  std::mt19937_64 rng(11);
  const auto g = path3();
  const TimeGrid years{2000, 2003};
  for (const auto& spec : model_catalog()) {
    CAPTURE(spec.id);
    const auto cells = synthetic_cells(rng);
    const auto s = assemble_system(cells, spec, g, years);
    const auto h = random_hyper(s, rng);
    GaussianConditional gc(s);
    gc.set_hyper(h);
    const auto oracle = dense_oracle(s, h, g);
    CHECK(gc.log_marginal() == doctest::Approx(oracle.log_marginal).epsilon(1e-7));
    CHECK((gc.mean() - oracle.mean).norm() < 1e-6 * std::max(1.0, oracle.mean.norm()));
    const auto var = gc.marginal_variances();
    for (Eigen::Index i = 0; i < s.dim; ++i) {
      CHECK(var[i] == doctest::Approx(oracle.cov(i, i)).epsilon(1e-6).scale(1e-9));
    }
    CHECK((s.constraints * gc.mean()).norm() < 1e-8);
  }
}

TEST_CASE("exact latent draws: empirical moments and constraints") {
  std::mt19937_64 rng(21);
  const auto g = path3();
  const auto s = assemble_system(synthetic_cells(rng), model_spec("2b"), g, TimeGrid{2000, 2003});
  const auto h = random_hyper(s, rng);
  GaussianConditional gc(s);
  gc.set_hyper(h);
  const auto oracle = dense_oracle(s, h, g);

  const int K = 20000;
  std::mt19937_64 draw_rng(5);
  Eigen::MatrixXd eta(K, s.eta_map.rows());
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(s.dim);
  double worst_constraint = 0.0;
  for (int k = 0; k < K; ++k) {
    const auto x = gc.sample(draw_rng);
    sum += x;
    worst_constraint = std::max(worst_constraint, (s.constraints * x).norm());
    eta.row(k) = (s.eta_map * x).transpose();
  }
  CHECK(worst_constraint < 1e-8);
  const Eigen::VectorXd mean = sum / K;
  for (Eigen::Index i = 0; i < s.dim; ++i) {
    const double se = std::sqrt(std::max(oracle.cov(i, i), 0.0) / K);
    CHECK(std::abs(mean[i] - oracle.mean[i]) <= 5.0 * se + 1e-9);
  }
  // Posterior variance of the fitted linear predictor: e' S_post e.
  const Eigen::MatrixXd E(s.eta_map);
  const Eigen::MatrixXd eta_cov = E * oracle.cov * E.transpose();
  for (Eigen::Index j = 0; j < eta.cols(); ++j) {
    const Eigen::VectorXd col = eta.col(j);
    const double m = mean_of(col);
    const double v = (col.array() - m).square().sum() / (K - 1);
    CHECK(v == doctest::Approx(eta_cov(j, j)).epsilon(0.05));
    CHECK(std::abs(m - (E * oracle.mean)[j]) <= 5.0 * std::sqrt(eta_cov(j, j) / K));
  }
}

TEST_CASE("fitted_eta uses only survey-free effects") {
  std::mt19937_64 rng(31);
  const auto s = assemble_system(synthetic_cells(rng), model_spec("6a"), path3(), TimeGrid{2000, 2003});
  const auto x = sample_latent(s, random_hyper(s, rng), 9);
  Eigen::VectorXd manual = x;
  for (std::size_t b = 0; b < s.blocks.size(); ++b) {
    if (!s.blocks[b].in_fitted_eta) manual.segment(s.block_offset[b], s.blocks[b].dim).setZero();
  }
  const Eigen::VectorXd full = s.design * x;
  for (Eigen::Index i = 0; i < 3; ++i) {
    for (Eigen::Index t = 0; t < 4; ++t) {
      double expected = 0.0;
      for (std::size_t b = 0; b < s.blocks.size(); ++b) {
        if (!s.blocks[b].in_fitted_eta) continue;
        for (auto c : s.blocks[b].loading(i, t, 0)) expected += x[s.block_offset[b] + c];
      }
      CHECK(fitted_eta(s, x, i, t) == doctest::Approx(expected).epsilon(1e-12));
    }
  }
  CHECK(full.size() == s.n_data());
}

TEST_CASE("hyperparameter transforms and prior") {
  double ss = 0.0;
  const auto s = conjugate_system(5, 1, &ss);
  const std::vector<double> nat = {3.5};
  const auto u = to_transformed(s, nat);
  CHECK(u[0] == doctest::Approx(std::log(3.5)));
  CHECK(to_natural(s, u)[0] == doctest::Approx(3.5));
  // Gamma(1, 5e-5) in log space: log b + u - b e^u.
  CHECK(log_hyper_prior_transformed(s, u) == doctest::Approx(std::log(5e-5) + u[0] - 5e-5 * 3.5));
}

TEST_CASE("find_hyper_mode agrees with a one-dimensional grid search of the exact posterior") {
  double ss = 0.0;
  const int n = 60;
  const auto s = conjugate_system(n, 7, &ss);
  const auto exact = [&](double u) {
    const double var = std::exp(-u) + 1e-9;
    double lp = 0.0;
    for (Eigen::Index i = 0; i < s.n_data(); ++i) lp += -0.5 * (kLog2Pi + std::log(var) + s.y[i] * s.y[i] / var);
    return lp + std::log(5e-5) + u - 5e-5 * std::exp(u);
  };
  double lo = -5, hi = 10;
  for (int it = 0; it < 200; ++it) {
    const double a = lo + (hi - lo) / 3, b = hi - (hi - lo) / 3;
    (exact(a) < exact(b) ? lo : hi) = exact(a) < exact(b) ? a : b;
  }
  const auto mode = find_hyper_mode(s);
  CHECK(mode.converged);
  CHECK(mode.transformed[0] == doctest::Approx(0.5 * (lo + hi)).epsilon(1e-3));
  CHECK(mode.log_posterior == doctest::Approx(exact(0.5 * (lo + hi))).epsilon(1e-6));
  GaussianConditional gc(s);
  gc.set_hyper(mode.natural);
  CHECK(gc.log_marginal() + log_hyper_prior_transformed(s, mode.transformed) ==
        doctest::Approx(exact(mode.transformed[0])).epsilon(1e-9));
}

TEST_CASE("sample_hyper recovers the conjugate Gamma posterior") {
  double ss = 0.0;
  const int n = 60;
  const auto s = conjugate_system(n, 3, &ss);
  McmcSettings m;
  m.samples = 4000;
  m.burn_in = 1000;
  m.adapt = 1000;
  m.thin = 2;
  const auto chain = sample_hyper(s, m, 42);
  const double shape = 1.0 + n / 2.0, rate = 5e-5 + ss / 2.0;
  const Eigen::VectorXd tau = chain.samples.col(0);
  const double mean = tau.mean();
  const double sd = std::sqrt((tau.array() - mean).square().sum() / (tau.size() - 1));
  CHECK(mean == doctest::Approx(shape / rate).epsilon(0.03));
  CHECK(sd == doctest::Approx(std::sqrt(shape) / rate).epsilon(0.1));
  CHECK(chain.acceptance_rate > 0.2);
  CHECK(chain.acceptance_rate < 0.7);
  CHECK(chain.effective_sample_size[0] > 300);

  // Deterministic given the seed.
  const auto again = sample_hyper(s, m, 42);
  CHECK(again.samples == chain.samples);
}

TEST_CASE("sample_hyper without data recovers the prior") {
  const auto g = path3();
  GridShape grid{3, 1, 1};
  const auto s = build_system({bym_block(g, SpatialVariant::bym2)}, grid, {});
  McmcSettings m;
  m.samples = 20000;
  m.burn_in = 2000;
  m.adapt = 2000;
  m.thin = 2;
  const auto chain = sample_hyper(s, m, 8);
  const Eigen::VectorXd tau = chain.samples.col(0);
  const Eigen::VectorXd phi = chain.samples.col(1);
  // log tau under Gamma(1, b): mean digamma(1) - log b, sd pi / sqrt(6).
  const Eigen::ArrayXd lt = tau.array().log();
  const double euler = 0.5772156649015329;
  CHECK(lt.mean() == doctest::Approx(-euler - std::log(5e-5)).epsilon(0.01));
  CHECK(tau.mean() == doctest::Approx(20000.0).epsilon(0.1));
  CHECK(phi.mean() == doctest::Approx(0.5).epsilon(0.05));
  const double phi_var = (phi.array() - phi.mean()).square().mean();
  CHECK(phi_var == doctest::Approx(1.0 / 12.0).epsilon(0.1));
}

TEST_CASE("independent chains mix: potential scale reduction near one") {
  double ss = 0.0;
  const auto s = conjugate_system(40, 5, &ss);
  McmcSettings m;
  m.samples = 1000;
  m.burn_in = 500;
  m.adapt = 500;
  m.thin = 2;
  std::vector<std::vector<double>> chains;
  int stream = 0;
  for (double start : {0.1, 10.0, 1000.0, 1e5}) {
    const auto c = sample_hyper(s, m, derive_seed(99, stream++), {}, std::vector<double>{start});
    std::vector<double> trace;
    for (Eigen::Index k = 0; k < c.samples.rows(); ++k) trace.push_back(std::log(c.samples(k, 0)));
    chains.push_back(trace);
  }
  CHECK(potential_scale_reduction(chains) < 1.05);
}

TEST_CASE("fit_model: empirical-Bayes and full modes") {
  std::mt19937_64 rng(41);
  const auto s = assemble_system(synthetic_cells(rng), model_spec("1b"), path3(), TimeGrid{2000, 2003});
  FitSettings fs;
  fs.mode = FitMode::empirical_bayes;
  fs.mcmc.samples = 200;
  fs.seed = 17;
  const auto eb = fit_model(s, fs);
  CHECK(eb.latent_samples.rows() == 200);
  CHECK(eb.hyper_samples.row(0) == eb.hyper_samples.row(199));
  CHECK(eb.eta_samples.cols() == 12);
  const double r = s.y[0] - eb.cell_eta(3, 0);
  CHECK(eb.cell_loglik(3, 0) == doctest::Approx(-0.5 * (kLog2Pi + std::log(s.var_y[0]) + r * r / s.var_y[0])));
  const auto eb2 = fit_model(s, fs);
  CHECK(eb2.latent_samples == eb.latent_samples);

  fs.mode = FitMode::full;
  fs.mcmc = McmcSettings{100, 200, 200, 2};
  const auto full = fit_model(s, fs);
  CHECK(full.hyper_samples.rows() == 100);
  CHECK(full.diagnostics.effective_sample_size.size() == 4);
  CHECK(full.hyper_names == std::vector<std::string>{"tau_iid_time", "tau_rw2_time", "tau_space", "phi_space"});
  CHECK(parse_fit_mode("eb") == FitMode::empirical_bayes);
  CHECK_THROWS_AS(parse_fit_mode("vb"), InputError);
}

TEST_CASE("quantile and summaries") {
  // Linear interpolation between order statistics (numpy default).
  const std::vector<double> v = {4, 1, 3, 2};
  CHECK(quantile(v, 0.5) == doctest::Approx(2.5));
  CHECK(quantile(v, 0.025) == doctest::Approx(1.075));
  CHECK(quantile(v, 0.975) == doctest::Approx(3.925));
  CHECK(quantile({7.0}, 0.3) == 7.0);
  const std::vector<double> l = {logit(0.1), logit(0.2), logit(0.3)};
  const auto s = summarize(l);
  CHECK(s.median == doctest::Approx(0.2));
  CHECK(s.lo95 == doctest::Approx(0.105));
  CHECK(s.hi95 == doctest::Approx(0.295));
}

TEST_CASE("effective sample size and potential scale reduction") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> z;
  std::vector<double> iid(20000), ar(100000);
  for (auto& x : iid) x = z(rng);
  CHECK(effective_sample_size(iid) == doctest::Approx(20000).epsilon(0.15));
  double x = 0.0;
  for (auto& a : ar) a = x = 0.9 * x + z(rng);
  CHECK(effective_sample_size(ar) == doctest::Approx(100000 * 0.1 / 1.9).epsilon(0.15));
  CHECK(potential_scale_reduction({{1, 2, 3}, {4, 5, 6}}) == doctest::Approx(std::sqrt(31.0 / 6.0)));
  CHECK_THROWS_AS(potential_scale_reduction({{1, 2, 3}}), InputError);
}
