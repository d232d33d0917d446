#pragma once
// Predictive model comparison (WAIC, DIC, LCPO), variance decomposition and the
// final model choice.

#include <Eigen/Dense>
#include <filesystem>
#include <string>
#include <vector>

#include "sae/inference.hpp"

namespace sae {

/// Gaussian log density of y at mean eta with variance var.
double gaussian_log_density(double y, double eta, double var);

/// K log-density values of cell j (survey effects included in eta).
Eigen::VectorXd pointwise_loglik(const PosteriorFit& fit, Eigen::Index cell);

struct WaicResult {
  double waic = 0.0;
  double lppd = 0.0;
  double p_waic = 0.0;
};
/// loglik is K x n_cells.
WaicResult compute_waic(const Eigen::MatrixXd& loglik);
WaicResult compute_waic(const PosteriorFit& fit);

struct DicResult {
  double dic = 0.0;
  double mean_deviance = 0.0;
  double deviance_at_mean = 0.0;
  double p_d = 0.0;
};
/// Plug-in point is the posterior mean of each cell's eta.
DicResult compute_dic(const Eigen::MatrixXd& cell_eta, const Eigen::VectorXd& y,
                      const Eigen::VectorXd& var_y);
DicResult compute_dic(const PosteriorFit& fit);

struct LcpoResult {
  double lcpo = 0.0;               // sum of log CPO over included cells
  std::size_t excluded = 0;        // cells with an underflowing density
  Eigen::VectorXd log_cpo;         // NaN for excluded cells
};
LcpoResult compute_lcpo(const Eigen::MatrixXd& loglik);
LcpoResult compute_lcpo(const PosteriorFit& fit);

/// log mean_k exp(l_k), shifted for overflow safety.
double log_mean_exp(const Eigen::Ref<const Eigen::VectorXd>& l);

struct VarianceShare {
  std::string effect;
  double median_variance = 0.0;
  double share = 0.0;  // percent
};
/// Shares of the posterior-median effect variances. The intercept carries no
/// variance; the two BYM components are reported together as the spatial effect.
std::vector<VarianceShare> variance_decomposition(const PosteriorFit& fit);

struct ModelReport {
  std::string model_id;
  DicResult dic;
  WaicResult waic;
  LcpoResult lcpo;
  std::vector<VarianceShare> shares;
};

ModelReport evaluate_model(const PosteriorFit& fit);

struct Selection {
  std::string winner;
  std::string by_dic;
  std::string by_waic;
  std::string by_lcpo;
  bool unanimous = false;
};

/// Agreeing minimizer of DIC, WAIC and -LCPO, else the WAIC minimizer. Ties go to the
/// smaller model id.
Selection select_model(const std::vector<ModelReport>& reports);

/// model, dic, p_d, lcpo, lcpo_excluded, waic, p_waic, selected
void write_selection_table(const std::filesystem::path& path, const std::vector<ModelReport>& reports,
                           const std::string& winner);
/// model, effect, median_variance, share
void write_variance_shares(const std::filesystem::path& path, const std::vector<ModelReport>& reports);

}  // namespace sae
