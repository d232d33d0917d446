#pragma once
// Structure matrices, identifiability constraints and prior blocks for the
// random effects of the space-time-survey model.
//
// Every block's precision is a sum of fixed sparse matrices weighted by
// coefficients that depend on the block's hyperparameters. Hard constraints
// (Cx = 0) are imposed by conditioning by kriging; directions of the null
// space that are not hard-constrained carry a fixed diffuse precision.

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "sae/survey_data.hpp"

namespace sae {

using SparseMatrix = Eigen::SparseMatrix<double>;

/// Precision of the diffuse Gaussian priors on the intercept and the global
/// linear time trend.
inline constexpr double kDiffusePrecision = 1e-4;

/// Gamma(shape, rate) on a precision.
struct GammaPrior {
  double shape = 1.0;
  double rate = 5e-5;
};

struct PrecisionStructure {
  Eigen::Index dim = 0;
  SparseMatrix structure;  // R, with precision = tau * R
  Eigen::Index rank_deficiency = 0;
  Eigen::MatrixXd constraints;  // one row per constraint vector
  double scaling = 1.0;
};

/// R = D'D for the (T-2) x T second-difference operator D. Constraints are the
/// normalized constant and centred linear-trend vectors (they span the null space).
PrecisionStructure rw2_structure(Eigen::Index n_times);

/// R = diag(degree) - adjacency. One sum-to-zero constraint per connected component.
PrecisionStructure icar_structure(const GeographyGraph& graph);

/// ICAR structure rescaled per component of size >= 2 so the geometric mean of the
/// constrained marginal variances is 1. `scaling` holds the factor for a connected
/// graph, or the geometric mean of per-component factors otherwise.
PrecisionStructure scaled_icar_structure(const GeographyGraph& graph);

/// Kronecker I_areas (x) R_rw2(T), area-major. Per-area sum-to-zero and
/// linear-trend-zero constraints.
PrecisionStructure interaction_type2(Eigen::Index n_times, const GeographyGraph& graph);
PrecisionStructure interaction_type2(Eigen::Index n_times, Eigen::Index n_areas);

PrecisionStructure iid_structure(Eigen::Index n);

/// Diagonal of the covariance of the zero-mean Gaussian with precision Q restricted
/// to {x : Cx = 0}. Requires null(Q) and null(C) to intersect only in 0.
Eigen::VectorXd constrained_marginal_variances(const SparseMatrix& precision,
                                               const Eigen::MatrixXd& constraints);

/// Log-determinant of Q restricted to {x : Cx = 0}, measured in an orthonormal
/// basis of that subspace.
double constrained_log_det(const SparseMatrix& precision, const Eigen::MatrixXd& constraints);

enum class Effect {
  intercept,
  iid_time,
  rw2_time,
  space,
  interaction,
  survey,
  survey_space,
  survey_time
};
enum class SpatialVariant { bym, bym2 };

std::string_view to_string(Effect effect);

enum class HyperKind { precision, mixing };

struct HyperParameter {
  std::string name;
  HyperKind kind = HyperKind::precision;
  GammaPrior prior;  // used for precisions; mixing parameters are uniform(0,1)
};

/// coefficient(h) * matrix, where h holds the block's hyperparameters on the natural
/// scale (precisions, mixing fractions).
struct PrecisionTerm {
  SparseMatrix matrix;
  std::function<double(std::span<const double>)> coefficient;
};

/// Indexing dimensions shared by all blocks of one model.
struct GridShape {
  Eigen::Index n_areas = 0;
  Eigen::Index n_times = 0;
  Eigen::Index n_surveys = 0;
};

struct EffectBlock {
  Effect effect = Effect::intercept;
  std::string name;
  Eigen::Index dim = 0;
  std::vector<HyperParameter> hypers;
  std::vector<PrecisionTerm> terms;
  Eigen::MatrixXd constraints;  // hard constraints, block-local coordinates
  /// log pseudo-determinant of the constrained prior precision:
  /// log_det_scale(h) + log_det_constant.
  std::function<double(std::span<const double>)> log_det_scale;
  double log_det_constant = 0.0;
  /// Whether the block enters the survey-free fitted linear predictor.
  bool in_fitted_eta = true;
  /// Local coordinates a data point at (area, time, survey) loads on.
  std::function<std::vector<Eigen::Index>(Eigen::Index, Eigen::Index, Eigen::Index)> loading;

  /// Block precision at the given hyperparameters (dense-friendly, for tests and dumps).
  SparseMatrix precision(std::span<const double> hyper) const;
};

EffectBlock intercept_block();
/// n unconstrained N(0, 1/tau) coordinates. `effect` selects the index map.
EffectBlock iid_block(Eigen::Index n, Effect effect, const GridShape& grid);
/// RW2 over time with a sum-to-zero hard constraint; the centred linear trend
/// direction carries kDiffusePrecision.
EffectBlock rw2_block(Eigen::Index n_times);
/// bym: [U (ICAR, tau_U) ; V (iid, tau_V)], data load on U_i + V_i.
/// bym2: [b ; u*] with b = (sqrt(1-phi) v + sqrt(phi) u*) / sqrt(tau), data load on b_i.
EffectBlock bym_block(const GeographyGraph& graph, SpatialVariant variant);
EffectBlock interaction_block(Eigen::Index n_times, const GeographyGraph& graph);

/// Text dump of a structure (dimension, rank deficiency, triplets, constraints).
std::string debug_dump(const PrecisionStructure& s);

}  // namespace sae
