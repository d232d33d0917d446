#include <cmath>
#include <random>

#include <Eigen/Eigenvalues>

#include "doctest.h"
#include "sae/common.hpp"
#include "sae/gmrf_priors.hpp"

using namespace sae;

namespace {

Eigen::MatrixXd dense(const SparseMatrix& m) { return Eigen::MatrixXd(m); }

Eigen::VectorXd eigenvalues(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  return es.eigenvalues();
}

int count_zero_eigenvalues(const Eigen::MatrixXd& m, double tol = 1e-9) {
  const auto ev = eigenvalues(m);
  int z = 0;
  for (Eigen::Index i = 0; i < ev.size(); ++i) z += std::abs(ev[i]) < tol;
  return z;
}

// Moore-Penrose inverse and log pseudo-determinant from the eigendecomposition.
Eigen::MatrixXd pinv(const Eigen::MatrixXd& m, double tol = 1e-9) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  Eigen::VectorXd inv = es.eigenvalues();
  for (Eigen::Index i = 0; i < inv.size(); ++i) inv[i] = std::abs(inv[i]) < tol ? 0.0 : 1.0 / inv[i];
  return es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
}

double log_pdet(const Eigen::MatrixXd& m, double tol = 1e-9) {
  double s = 0.0;
  for (double e : eigenvalues(m)) {
    if (std::abs(e) >= tol) s += std::log(e);
  }
  return s;
}

GeographyGraph path(int n) {
  std::vector<std::string> ids;
  std::vector<std::pair<std::string, std::string>> edges;
  for (int i = 0; i < n; ++i) {
    ids.push_back("a" + std::to_string(i));
    if (i) edges.emplace_back(ids[i - 1], ids[i]);
  }
  return GeographyGraph(ids, edges);
}

GeographyGraph two_components() {
  // Triangle {A,B,C}, path {D,E}, isolated F.
  return GeographyGraph({"A", "B", "C", "D", "E", "F"}, {{"A", "B"}, {"B", "C"}, {"A", "C"}, {"D", "E"}});
}

}  // namespace

TEST_CASE("rw2_structure: hand-computed T=4 matrix") {
  const auto s = rw2_structure(4);
  Eigen::MatrixXd expected(4, 4);
  expected << 1, -2, 1, 0,  //
      -2, 5, -4, 1,         //
      1, -4, 5, -2,         //
      0, 1, -2, 1;
  CHECK((dense(s.structure) - expected).norm() == doctest::Approx(0.0));
  CHECK(s.rank_deficiency == 2);
  CHECK_THROWS_AS(rw2_structure(2), InputError);
}

TEST_CASE("rw2_structure: null space is spanned by the constraint rows") {
  for (int T : {3, 10, 29}) {
    const auto s = rw2_structure(T);
    const auto R = dense(s.structure);
    CHECK(count_zero_eigenvalues(R) == 2);
    CHECK((R * s.constraints.transpose()).norm() < 1e-10);
    CHECK((s.constraints * s.constraints.transpose() - Eigen::MatrixXd::Identity(2, 2)).norm() < 1e-12);
  }
}

TEST_CASE("property: x'Rx equals the sum of squared second differences") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> z;
  const auto R = dense(rw2_structure(12).structure);
  for (int rep = 0; rep < 20; ++rep) {
    Eigen::VectorXd x(12);
    for (auto& v : x) v = z(rng);
    double ss = 0.0;
    for (int t = 2; t < 12; ++t) ss += std::pow(x[t] - 2 * x[t - 1] + x[t - 2], 2);
    CHECK(x.dot(R * x) == doctest::Approx(ss).epsilon(1e-12));
    CHECK(x.dot(R * x) >= 0.0);
  }
}

TEST_CASE("icar_structure: path graph and component constraints") {
  const auto s = icar_structure(path(3));
  Eigen::MatrixXd expected(3, 3);
  expected << 1, -1, 0, -1, 2, -1, 0, -1, 1;
  CHECK((dense(s.structure) - expected).norm() == doctest::Approx(0.0));
  CHECK(s.rank_deficiency == 1);

  const auto g = two_components();
  const auto m = icar_structure(g);
  const auto R = dense(m.structure);
  CHECK(m.rank_deficiency == 3);
  CHECK(count_zero_eigenvalues(R) == 3);
  CHECK(m.constraints.rows() == 3);
  CHECK((R * m.constraints.transpose()).norm() < 1e-12);

  // x'Rx = sum over edges of squared differences.
  std::mt19937_64 rng(1);
  std::normal_distribution<double> z;
  Eigen::VectorXd x(6);
  for (auto& v : x) v = z(rng);
  double ss = 0.0;
  for (const auto& [i, j] : g.edges()) ss += std::pow(x[static_cast<Eigen::Index>(i)] - x[static_cast<Eigen::Index>(j)], 2);
  CHECK(x.dot(R * x) == doctest::Approx(ss).epsilon(1e-12));
}

TEST_CASE("constrained marginal variances of an ICAR match the pseudo-inverse") {
  const auto s = icar_structure(path(3));
  const auto v = constrained_marginal_variances(s.structure, s.constraints);
  CHECK(v[0] == doctest::Approx(5.0 / 9.0).epsilon(1e-12));
  CHECK(v[1] == doctest::Approx(2.0 / 9.0).epsilon(1e-12));
  CHECK(v[2] == doctest::Approx(5.0 / 9.0).epsilon(1e-12));

  const auto m = icar_structure(two_components());
  const auto vm = constrained_marginal_variances(m.structure, m.constraints);
  const auto P = pinv(dense(m.structure));
  for (Eigen::Index i = 0; i < 6; ++i) CHECK(vm[i] == doctest::Approx(P(i, i)).epsilon(1e-10));
  CHECK(vm[5] == doctest::Approx(0.0).scale(1e-12));
}

TEST_CASE("scaled_icar_structure: geometric mean of constrained variances is one") {
  const auto s = scaled_icar_structure(path(3));
  // Frozen from an independent script: cube root of (5/9)^2 (2/9).
  CHECK(s.scaling == doctest::Approx(0.4093368331822651).epsilon(1e-12));
  const auto v = constrained_marginal_variances(s.structure, s.constraints);
  CHECK(std::exp(v.array().log().mean()) == doctest::Approx(1.0).epsilon(1e-12));

  const auto g = two_components();
  const auto m = scaled_icar_structure(g);
  const auto vm = constrained_marginal_variances(m.structure, m.constraints);
  for (std::size_t c = 0; c < 2; ++c) {
    double log_sum = 0.0;
    int n = 0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (g.component_of()[i] == g.component_of()[c == 0 ? 0 : 3]) {
        log_sum += std::log(vm[static_cast<Eigen::Index>(i)]);
        ++n;
      }
    }
    CHECK(std::exp(log_sum / n) == doctest::Approx(1.0).epsilon(1e-10));
  }
}

TEST_CASE("constrained_log_det equals the log pseudo-determinant when constraints span the null space") {
  const auto r = rw2_structure(9);
  CHECK(constrained_log_det(r.structure, r.constraints) == doctest::Approx(log_pdet(dense(r.structure))).epsilon(1e-10));
  const auto m = icar_structure(path(6));
  CHECK(constrained_log_det(3.0 * m.structure, m.constraints) ==
        doctest::Approx(log_pdet(3.0 * dense(m.structure))).epsilon(1e-10));
}

TEST_CASE("interaction_type2: dimension, rank deficiency and constraints") {
  const auto s = interaction_type2(5, path(3));
  CHECK(s.dim == 15);
  CHECK(s.rank_deficiency == 6);
  CHECK(count_zero_eigenvalues(dense(s.structure)) == 6);
  CHECK(s.constraints.rows() == 6);
  CHECK((dense(s.structure) * s.constraints.transpose()).norm() < 1e-10);
  CHECK_THROWS_AS(interaction_type2(5, Eigen::Index{0}), InputError);
}

TEST_CASE("debug_dump") {
  const auto text = debug_dump(rw2_structure(3));
  CHECK(text.find("dim 3\nrank_deficiency 2\n") == 0);
  CHECK(text.find("constraints 2") != std::string::npos);
}

namespace {

// Covariance of a block restricted to its hard constraints, computed densely.
Eigen::MatrixXd dense_constrained_covariance(const EffectBlock& b, std::span<const double> h) {
  const Eigen::MatrixXd Q = dense(b.precision(h));
  const Eigen::MatrixXd& C = b.constraints;
  const Eigen::MatrixXd S = (Q + C.transpose() * C).inverse();
  if (C.rows() == 0) return S;
  const Eigen::MatrixXd W = S * C.transpose();
  return S - W * (C * W).inverse() * W.transpose();
}

}  // namespace

TEST_CASE("rw2_block: generative covariance and log-determinant") {
  const int T = 7;
  const auto b = rw2_block(T);
  const auto s = rw2_structure(T);
  const double tau = 2.5;
  const double h[] = {tau};
  // alpha = structured part with precision tau R on the non-null space, plus a
  // diffuse draw along the centred trend.
  const Eigen::VectorXd t = s.constraints.row(1).transpose();
  const Eigen::MatrixXd expected = pinv(dense(s.structure)) / tau + t * t.transpose() / kDiffusePrecision;
  CHECK((dense_constrained_covariance(b, h) - expected).norm() < 1e-6 * expected.norm());
  const double ld = (T - 2) * std::log(tau) + log_pdet(dense(s.structure)) + std::log(kDiffusePrecision);
  CHECK(b.log_det_scale(h) + b.log_det_constant == doctest::Approx(ld).epsilon(1e-9));
  CHECK(b.constraints.rows() == 1);
}

TEST_CASE("bym_block: generative covariance and log-determinant") {
  const auto g = two_components();
  const auto b = bym_block(g, SpatialVariant::bym);
  CHECK(b.dim == 12);
  CHECK(b.hypers.size() == 2);
  const double tu = 1.7, tv = 0.6;
  const double h[] = {tu, tv};
  const auto R = dense(icar_structure(g).structure);
  Eigen::MatrixXd expected = Eigen::MatrixXd::Zero(12, 12);
  expected.topLeftCorner(6, 6) = pinv(R) / tu;
  expected.bottomRightCorner(6, 6) = Eigen::MatrixXd::Identity(6, 6) / tv;
  CHECK((dense_constrained_covariance(b, h) - expected).norm() < 1e-9);
  const double ld = 3 * std::log(tu) + log_pdet(R) + 6 * std::log(tv);
  CHECK(b.log_det_scale(h) + b.log_det_constant == doctest::Approx(ld).epsilon(1e-9));
  CHECK(b.loading(4, 0, 0) == std::vector<Eigen::Index>{4, 10});
}

TEST_CASE("bym2_block: generative covariance and log-determinant") {
  const auto g = two_components();
  const auto b = bym_block(g, SpatialVariant::bym2);
  const auto Rs = dense(scaled_icar_structure(g).structure);
  for (auto [tau, phi] : {std::pair{0.8, 0.3}, std::pair{4.0, 0.9}, std::pair{1.0, 0.05}}) {
    const double h[] = {tau, phi};
    // b = (sqrt(1-phi) v + sqrt(phi) u*) / sqrt(tau), v ~ N(0, I), u* ~ N(0, R*^-).
    const Eigen::MatrixXd Pu = pinv(Rs);
    const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(6, 6);
    Eigen::MatrixXd expected(12, 12);
    expected.topLeftCorner(6, 6) = ((1 - phi) * I + phi * Pu) / tau;
    expected.topRightCorner(6, 6) = std::sqrt(phi / tau) * Pu;
    expected.bottomLeftCorner(6, 6) = std::sqrt(phi / tau) * Pu;
    expected.bottomRightCorner(6, 6) = Pu;
    CHECK((dense_constrained_covariance(b, h) - expected).norm() < 1e-8);
    const double ld = 6 * std::log(tau / (1 - phi)) + log_pdet(Rs);
    CHECK(b.log_det_scale(h) + b.log_det_constant == doctest::Approx(ld).epsilon(1e-9));
  }
  CHECK(b.loading(2, 0, 0) == std::vector<Eigen::Index>{2});
}

TEST_CASE("interaction_block and iid blocks: log-determinants") {
  const auto g = path(4);
  const auto b = interaction_block(6, g);
  const double h[] = {3.0};
  const double ld = 16 * std::log(3.0) + 4 * log_pdet(dense(rw2_structure(6).structure));
  CHECK(b.log_det_scale(h) + b.log_det_constant == doctest::Approx(ld).epsilon(1e-9));
  CHECK(constrained_log_det(b.precision(h), b.constraints) == doctest::Approx(ld).epsilon(1e-9));
  CHECK(b.loading(2, 3, 0) == std::vector<Eigen::Index>{15});

  GridShape grid{4, 6, 3};
  const auto phi = iid_block(12, Effect::survey_space, grid);
  CHECK_FALSE(phi.in_fitted_eta);
  CHECK(phi.loading(2, 5, 1) == std::vector<Eigen::Index>{7});
  const auto psi = iid_block(18, Effect::survey_time, grid);
  CHECK(psi.loading(2, 5, 1) == std::vector<Eigen::Index>{16});
  const auto gamma = iid_block(6, Effect::iid_time, grid);
  CHECK(gamma.in_fitted_eta);
  CHECK(gamma.log_det_scale(h) + gamma.log_det_constant == doctest::Approx(6 * std::log(3.0)));

  const auto mu = intercept_block();
  CHECK(mu.log_det_scale(h) + mu.log_det_constant == doctest::Approx(std::log(kDiffusePrecision)));
}
