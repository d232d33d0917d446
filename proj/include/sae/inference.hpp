#pragma once
// Latent Gaussian inference for the space-time-survey model.
//
// Given hyperparameters the latent field has an exact Gaussian conditional
// (Gaussian working likelihood on the logit scale), so the marginal likelihood
// of the hyperparameters is available in closed form. Hyperparameters are
// sampled by adaptive random-walk Metropolis on (log precision, logit mixing),
// or fixed at their posterior mode in empirical-Bayes mode.

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sae/direct_estimates.hpp"
#include "sae/gmrf_priors.hpp"
#include "sae/sparse_cholesky.hpp"

namespace sae {

struct ModelSpec {
  std::string id;  // "1a" .. "6b"
  int number = 1;
  SpatialVariant variant = SpatialVariant::bym;
  std::vector<Effect> effects;

  bool has(Effect e) const;
};

/// The twelve candidate models, ordered 1a..6a then 1b..6b.
std::vector<ModelSpec> model_catalog();
ModelSpec model_spec(std::string_view id);
/// Orders model ids by number, then variant a before b.
bool model_id_less(const std::string& lhs, const std::string& rhs);

/// Years covered by the latent grid: first..last inclusive.
struct TimeGrid {
  int first = 0;
  int last = 0;
  Eigen::Index size() const { return last - first + 1; }
};

/// One observation in grid coordinates.
struct DataPoint {
  Eigen::Index area = 0;
  Eigen::Index time = 0;
  Eigen::Index survey = 0;
  double y = 0.0;
  double var_y = 1.0;
};

struct LatentSystem {
  std::vector<EffectBlock> blocks;
  std::vector<Eigen::Index> block_offset;
  std::vector<std::size_t> hyper_offset;  // first global hyper index of each block
  Eigen::Index dim = 0;

  std::vector<HyperParameter> hypers;
  SparseMatrix design;           // n_data x dim, loads every effect of the model
  SparseMatrix eta_map;          // (n_areas * n_times) x dim, survey-free effects only
  Eigen::MatrixXd constraints;   // stacked hard constraints, k x dim
  Eigen::VectorXd y;
  Eigen::VectorXd var_y;
  GridShape grid;
  std::vector<DataPoint> data;

  // Labels, filled by assemble_system.
  std::string model_id;
  std::vector<std::string> areas;
  TimeGrid years;
  std::vector<std::string> surveys;
  std::vector<DirectEstimate> cells;  // the usable cells, row-aligned with `design`

  Eigen::Index n_data() const { return static_cast<Eigen::Index>(y.size()); }
  std::size_t n_hyper() const { return hypers.size(); }
  /// Row of eta_map for (area, time).
  Eigen::Index eta_index(Eigen::Index area, Eigen::Index time) const {
    return area * grid.n_times + time;
  }
  /// Human-readable name of each latent coordinate.
  std::vector<std::string> coordinate_names() const;
  /// Block-diagonal prior precision at natural-scale hyperparameters.
  SparseMatrix prior_precision(std::span<const double> hyper) const;
};

/// Generic assembly from blocks and grid-coordinate data (used by tests and by
/// assemble_system).
LatentSystem build_system(std::vector<EffectBlock> blocks, const GridShape& grid,
                          std::vector<DataPoint> data);

/// Assembles the catalog model over the usable cells. Surveys are indexed by survey
/// family in sorted order. Throws InputError on an empty likelihood, an area missing
/// from the roster, or a year outside the grid.
LatentSystem assemble_system(const std::vector<DirectEstimate>& cells, const ModelSpec& spec,
                             const GeographyGraph& geography, const TimeGrid& years);

/// Conditional Gaussian of the latent field at fixed hyperparameters. Holds the
/// symbolic factorization, so repeated set_hyper calls only refactorize numerically.
class GaussianConditional {
 public:
  explicit GaussianConditional(const LatentSystem& system);

  /// Factorizes at natural-scale hyperparameters. Throws NumericalError when the
  /// posterior precision stays indefinite after diagonal jitter.
  void set_hyper(std::span<const double> hyper);

  /// log p(y | hyper); 0 for a system with no data.
  double log_marginal() const { return log_marginal_; }
  /// Constrained posterior mean.
  const Eigen::VectorXd& mean() const { return mean_; }
  /// Exact constrained draw.
  Eigen::VectorXd sample(std::mt19937_64& rng) const;
  /// Constrained posterior marginal variances (one solve per coordinate).
  Eigen::VectorXd marginal_variances() const;
  bool jittered() const { return jittered_; }

 private:
  void factorize_with_jitter();

  const LatentSystem* system_;
  // Sparsity pattern shared by every posterior precision of this system, with each
  // prior term's values scattered onto it.
  SparseMatrix pattern_;
  Eigen::VectorXd base_values_;  // C'C + A' V^-1 A
  std::vector<std::vector<std::pair<Eigen::Index, double>>> term_values_;
  std::vector<std::pair<std::size_t, std::size_t>> term_owner_;  // (block, term)
  std::vector<Eigen::Index> diagonal_positions_;
  std::vector<Eigen::Index> col_of_;  // column of each pattern entry
  Eigen::VectorXd data_rhs_;       // A' V^-1 y
  double log_det_cc_ = 0.0;        // log det(C C')
  double data_log_norm_ = 0.0;     // -0.5 sum log(2 pi v)
  SparseCholesky chol_;
  bool analyzed_ = false;

  std::vector<double> hyper_;
  SparseMatrix q_;
  Eigen::MatrixXd kriging_;        // W (C W)^-1 with W = Q~^-1 C'
  Eigen::VectorXd mean_;
  double log_marginal_ = 0.0;
  bool jittered_ = false;
};

double marginal_loglik(const LatentSystem& system, std::span<const double> hyper);

/// Log prior density of the natural-scale hyperparameters on the transformed
/// (log precision, logit mixing) scale, Jacobian included.
double log_hyper_prior_transformed(const LatentSystem& system, std::span<const double> transformed);
std::vector<double> to_natural(const LatentSystem& system, std::span<const double> transformed);
std::vector<double> to_transformed(const LatentSystem& system, std::span<const double> natural);

struct McmcSettings {
  int samples = 1000;
  int burn_in = 2000;
  int adapt = 1000;
  int thin = 5;
};

struct HyperChain {
  Eigen::MatrixXd samples;  // retained draws x n_hyper, natural scale
  double acceptance_rate = 0.0;
  std::vector<double> effective_sample_size;
  std::vector<std::string> warnings;
};

/// Called at every retained iteration with the chain's current conditional.
using RetainedCallback = std::function<void(int index, const GaussianConditional& state)>;

/// Adaptive random-walk Metropolis over the transformed hyperparameters targeting
/// marginal likelihood + prior. Proposal covariance adapts during the first `adapt`
/// iterations and is frozen afterwards. Deterministic given the seed.
HyperChain sample_hyper(const LatentSystem& system, const McmcSettings& settings,
                        std::uint64_t seed, const RetainedCallback& on_retained = {},
                        std::optional<std::vector<double>> start = std::nullopt);

struct HyperMode {
  std::vector<double> natural;
  std::vector<double> transformed;
  double log_posterior = 0.0;
  int iterations = 0;
  bool converged = false;
};

/// Posterior mode of the transformed hyperparameters by quasi-Newton (BFGS) with
/// central-difference gradients.
HyperMode find_hyper_mode(const LatentSystem& system);

/// A single exact draw from the constrained latent conditional.
Eigen::VectorXd sample_latent(const LatentSystem& system, std::span<const double> hyper,
                              std::uint64_t seed);

enum class FitMode { full, empirical_bayes };
std::string_view to_string(FitMode mode);
FitMode parse_fit_mode(std::string_view name);

struct FitSettings {
  FitMode mode = FitMode::full;
  McmcSettings mcmc;
  std::uint64_t seed = 1;
};

struct FitDiagnostics {
  FitMode mode = FitMode::full;
  double acceptance_rate = 0.0;
  std::vector<double> effective_sample_size;
  int optimizer_iterations = 0;
  bool optimizer_converged = true;
  std::size_t jittered_factorizations = 0;
  std::vector<std::string> warnings;
};

struct PosteriorFit {
  std::string model_id;
  std::vector<std::string> hyper_names;
  Eigen::MatrixXd hyper_samples;   // K x n_hyper (natural scale)
  Eigen::MatrixXd latent_samples;  // K x dim
  Eigen::MatrixXd eta_samples;     // K x (n_areas * n_times), survey-free
  Eigen::MatrixXd cell_eta;        // K x n_data, all effects
  Eigen::MatrixXd cell_loglik;     // K x n_data
  Eigen::VectorXd y;
  Eigen::VectorXd var_y;
  FitDiagnostics diagnostics;

  Eigen::Index n_samples() const { return latent_samples.rows(); }
};

PosteriorFit fit_model(const LatentSystem& system, const FitSettings& settings);

/// Survey-free fitted linear predictor mu + gamma_t + alpha_t + theta_i + delta_it.
double fitted_eta(const LatentSystem& system, const Eigen::VectorXd& latent, Eigen::Index area,
                  Eigen::Index time);

struct IntervalSummary {
  double median = 0.0;
  double lo95 = 0.0;
  double hi95 = 0.0;
};

/// Sample quantile with linear interpolation between order statistics.
double quantile(std::vector<double> values, double prob);
IntervalSummary summarize_values(std::vector<double> values);
/// Median and 95% interval on the proportion scale of logit-scale samples.
IntervalSummary summarize(std::span<const double> logit_samples);

double effective_sample_size(std::span<const double> chain);
/// Gelman-Rubin potential scale reduction over equal-length chains.
double potential_scale_reduction(const std::vector<std::vector<double>>& chains);

}  // namespace sae
