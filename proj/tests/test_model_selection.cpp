#include <cmath>
#include <random>

#include "doctest.h"
#include "sae/common.hpp"
#include "sae/model_selection.hpp"
#include "test_util.hpp"

using namespace sae;

namespace {

ModelReport report(const std::string& id, double dic, double waic, double lcpo) {
  ModelReport r;
  r.model_id = id;
  r.dic.dic = dic;
  r.waic.waic = waic;
  r.lcpo.lcpo = lcpo;
  return r;
}

}  // namespace

TEST_CASE("pointwise log density") {
  CHECK(gaussian_log_density(0.3, 0.3, 1.0) == doctest::Approx(-0.5 * kLog2Pi));
  CHECK(gaussian_log_density(1.0, 0.0, 0.25) == doctest::Approx(-0.5 * std::log(2 * M_PI * 0.25) - 2.0));

  PosteriorFit fit;
  std::mt19937_64 rng(2);
  std::normal_distribution<double> z;
  fit.cell_eta.resize(5, 100);
  fit.y.resize(100);
  fit.var_y.resize(100);
  for (Eigen::Index j = 0; j < 100; ++j) {
    fit.y[j] = z(rng);
    fit.var_y[j] = 0.1 + std::abs(z(rng));
    for (Eigen::Index k = 0; k < 5; ++k) fit.cell_eta(k, j) = z(rng);
  }
  for (Eigen::Index j = 0; j < 100; ++j) {
    const auto l = pointwise_loglik(fit, j);
    for (Eigen::Index k = 0; k < 5; ++k) {
      // Standalone density written from the normal pdf.
      const double r = fit.y[j] - fit.cell_eta(k, j);
      const double pdf = std::exp(-r * r / (2 * fit.var_y[j])) / std::sqrt(2 * M_PI * fit.var_y[j]);
      CHECK(std::abs(l[k] - std::log(pdf)) < 1e-12);
    }
  }
}

TEST_CASE("WAIC, DIC, LCPO: two-sample hand values") {
  // y = 0, var = 1, eta samples 0 and 2.
  Eigen::MatrixXd eta(2, 1);
  eta << 0.0, 2.0;
  const Eigen::VectorXd y = Eigen::VectorXd::Zero(1), v = Eigen::VectorXd::Ones(1);
  Eigen::MatrixXd l(2, 1);
  l << -0.5 * kLog2Pi, -0.5 * kLog2Pi - 2.0;
  const double d1 = std::exp(l(0, 0)), d2 = std::exp(l(1, 0));

  const auto w = compute_waic(l);
  CHECK(w.lppd == doctest::Approx(std::log((d1 + d2) / 2)).epsilon(1e-14));
  CHECK(w.p_waic == doctest::Approx(2.0).epsilon(1e-14));  // (l1 - l2)^2 / 2
  CHECK(w.waic == doctest::Approx(-2.0 * (std::log((d1 + d2) / 2) - 2.0)).epsilon(1e-14));

  const auto d = compute_dic(eta, y, v);
  CHECK(d.mean_deviance == doctest::Approx(kLog2Pi + 2.0).epsilon(1e-14));
  CHECK(d.deviance_at_mean == doctest::Approx(kLog2Pi + 1.0).epsilon(1e-14));
  CHECK(d.p_d == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(d.dic == doctest::Approx(kLog2Pi + 3.0).epsilon(1e-14));

  const auto c = compute_lcpo(l);
  CHECK(c.excluded == 0);
  CHECK(c.lcpo == doctest::Approx(std::log(2.0 / (1.0 / d1 + 1.0 / d2))).epsilon(1e-14));
}

TEST_CASE("degenerate posteriors") {
  Eigen::MatrixXd l = Eigen::MatrixXd::Constant(10, 3, -1.7);
  const auto w = compute_waic(l);
  CHECK(w.p_waic == 0.0);
  CHECK(w.waic == doctest::Approx(-2.0 * 3 * -1.7));
  CHECK(compute_lcpo(l).lcpo == doctest::Approx(3 * -1.7));
  Eigen::MatrixXd eta = Eigen::MatrixXd::Constant(10, 3, 0.4);
  CHECK(std::abs(compute_dic(eta, Eigen::VectorXd::Zero(3), Eigen::VectorXd::Ones(3)).p_d) < 1e-12);
}

TEST_CASE("LCPO excludes underflowing cells with a count") {
  Eigen::MatrixXd l(3, 2);
  l << -1.0, -1.0, -2.0, -800.0, -1.5, -3.0;
  const auto c = compute_lcpo(l);
  CHECK(c.excluded == 1);
  CHECK(std::isnan(c.log_cpo[1]));
  CHECK(std::isfinite(c.lcpo));
  l(0, 1) = -std::numeric_limits<double>::infinity();
  CHECK(compute_lcpo(l).excluded == 1);
}

TEST_CASE("property: criteria are invariant to sample order; CPO never exceeds the mean density") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> z;
  Eigen::MatrixXd eta(50, 8);
  for (Eigen::Index i = 0; i < eta.size(); ++i) eta.data()[i] = z(rng);
  Eigen::VectorXd y(8), v(8);
  for (Eigen::Index j = 0; j < 8; ++j) {
    y[j] = z(rng);
    v[j] = 0.3 + 0.1 * j;
  }
  Eigen::MatrixXd l(50, 8);
  for (Eigen::Index k = 0; k < 50; ++k) {
    for (Eigen::Index j = 0; j < 8; ++j) l(k, j) = gaussian_log_density(y[j], eta(k, j), v[j]);
  }
  Eigen::PermutationMatrix<Eigen::Dynamic> perm(50);
  perm.setIdentity();
  std::shuffle(perm.indices().data(), perm.indices().data() + 50, rng);
  const Eigen::MatrixXd lp = perm * l, etap = perm * eta;
  CHECK(compute_waic(lp).waic == doctest::Approx(compute_waic(l).waic).epsilon(1e-12));
  CHECK(compute_lcpo(lp).lcpo == doctest::Approx(compute_lcpo(l).lcpo).epsilon(1e-12));
  CHECK(compute_dic(etap, y, v).dic == doctest::Approx(compute_dic(eta, y, v).dic).epsilon(1e-12));
  const auto c = compute_lcpo(l);
  for (Eigen::Index j = 0; j < 8; ++j) CHECK(c.log_cpo[j] <= log_mean_exp(l.col(j)) + 1e-12);
  CHECK(compute_dic(eta, y, v).p_d > 0.0);
}

TEST_CASE("CPO agrees with brute-force leave-one-out refits") {
  // Intercept + iid effect over 10 time points, one observation each, at fixed
  // hyperparameters: the leave-one-out predictive density is Gaussian.
  const int n = 10;
  GridShape grid{1, n, 1};
  std::mt19937_64 rng(13);
  std::normal_distribution<double> z;
  std::vector<DataPoint> data;
  for (int t = 0; t < n; ++t) data.push_back({0, t, 0, -1.0 + 0.7 * z(rng), 0.2 + 0.05 * t});
  const auto build = [&](std::vector<DataPoint> d) {
    return build_system({intercept_block(), iid_block(n, Effect::iid_time, grid)}, grid, std::move(d));
  };
  const auto full = build(data);
  const std::vector<double> h = {2.0};
  GaussianConditional gc(full);
  gc.set_hyper(h);
  const int K = 20000;
  std::mt19937_64 draw(3);
  Eigen::MatrixXd l(K, n);
  for (int k = 0; k < K; ++k) {
    const Eigen::VectorXd eta = full.design * gc.sample(draw);
    for (int j = 0; j < n; ++j) l(k, j) = gaussian_log_density(full.y[j], eta[j], full.var_y[j]);
  }
  const auto c = compute_lcpo(l);
  for (int i = 0; i < n; ++i) {
    auto rest = data;
    rest.erase(rest.begin() + i);
    const auto loo = build(rest);
    GaussianConditional g(loo);
    g.set_hyper(h);
    // Predictive of y_i: eta_i = mu + gamma_i has posterior mean/var from the reduced fit.
    const double m = g.mean()[0] + g.mean()[1 + i];
    const auto var = g.marginal_variances();
    // Covariance of mu and gamma_i by a unit-vector solve on the dense posterior.
    Eigen::MatrixXd Q = Eigen::MatrixXd(loo.prior_precision(h)) +
                        Eigen::MatrixXd(loo.design.transpose() * loo.var_y.cwiseInverse().asDiagonal() * loo.design);
    const Eigen::MatrixXd S = Q.inverse();
    const double eta_var = S(0, 0) + S(1 + i, 1 + i) + 2 * S(0, 1 + i);
    CHECK(eta_var == doctest::Approx(var[0] + var[1 + i] + 2 * S(0, 1 + i)));
    const double cpo = std::exp(gaussian_log_density(data[i].y, m, eta_var + data[i].var_y));
    CHECK(std::exp(c.log_cpo[i]) == doctest::Approx(cpo).epsilon(0.1));
  }
}

TEST_CASE("variance decomposition") {
  PosteriorFit fit;
  fit.hyper_names = {"tau_rw2_time", "tau_iid_time"};
  fit.hyper_samples.resize(3, 2);
  fit.hyper_samples << 1.0 / 3, 1.0,  //
      1.0 / 2, 1.0 / 2,               //
      1.0 / 4, 2.0;
  const auto s = variance_decomposition(fit);
  REQUIRE(s.size() == 2);
  CHECK(s[0].effect == "rw2_time");
  CHECK(s[0].median_variance == doctest::Approx(3.0));
  CHECK(s[1].median_variance == doctest::Approx(1.0));
  CHECK(s[0].share == doctest::Approx(75.0));
  CHECK(s[1].share == doctest::Approx(25.0));

  // BYM components summed per sample before the median; mixing ignored.
  fit.hyper_names = {"tau_space_structured", "tau_space_unstructured"};
  fit.hyper_samples << 1, 1, 0.5, 1, 0.25, 0.25;
  const auto b = variance_decomposition(fit);
  REQUIRE(b.size() == 1);
  CHECK(b[0].effect == "space");
  CHECK(b[0].median_variance == doctest::Approx(3.0));
  CHECK(b[0].share == doctest::Approx(100.0));

  fit.hyper_names = {"tau_space", "phi_space"};
  CHECK(variance_decomposition(fit).size() == 1);
}

TEST_CASE("select_model") {
  // Unanimous.
  auto s = select_model({report("6a", 10, 10, -5), report("6b", 9, 9, -4)});
  CHECK(s.winner == "6b");
  CHECK(s.unanimous);
  // DIC favours 6a, WAIC favours 4b.
  s = select_model({report("6a", 1, 10, -5), report("4b", 5, 2, -6)});
  CHECK(s.winner == "4b");
  CHECK(s.by_dic == "6a");
  CHECK_FALSE(s.unanimous);
  // Exact WAIC tie.
  CHECK(select_model({report("3b", 1, 7, -1), report("3a", 2, 7, -2)}).winner == "3a");
  CHECK(select_model({report("1a", 1, 1, -1)}).winner == "1a");
  CHECK_THROWS_AS(select_model({}), InputError);
}

TEST_CASE("report tables") {
  sae::testing::TempDir dir("sel");
  auto r = report("2a", 1.5, 2.5, -3.5);
  r.shares = {{"space", 2.0, 40.0}, {"rw2_time", 3.0, 60.0}};
  write_selection_table(dir.file("s.csv"), {r}, "2a");
  CHECK(sae::testing::slurp(dir.file("s.csv")) ==
        "model,dic,p_d,lcpo,lcpo_excluded,waic,p_waic,selected\n2a,1.5,0,-3.5,0,2.5,0,1\n");
  write_variance_shares(dir.file("v.csv"), {r});
  CHECK(sae::testing::slurp(dir.file("v.csv")) ==
        "model,effect,median_variance,share\n2a,space,2,40\n2a,rw2_time,3,60\n");
}
