#pragma once
// Synthetic truth surfaces, survey microdata and calibration runs drawn from the
// model's own generative structure.

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "sae/direct_estimates.hpp"
#include "sae/inference.hpp"

namespace sae {

struct TruthConfig {
  SpatialVariant variant = SpatialVariant::bym2;
  double intercept = -2.0;
  double trend_per_year = 0.05;  // national linear trend, logit scale
  double tau_iid_time = 400.0;
  double tau_rw2_time = 2000.0;
  // bym2
  double tau_space = 4.0;
  double phi_space = 0.6;
  // bym
  double tau_space_structured = 2.0;
  double tau_space_unstructured = 10.0;
  std::optional<double> tau_interaction;  // no interaction when absent
  /// Survey families and their biases; a missing or short bias vector means zero.
  std::vector<std::string> families;
  std::vector<double> survey_bias;
  std::optional<double> tau_survey_space;
  std::optional<double> tau_survey_time;
};

struct TruthSurface {
  std::vector<std::string> areas;
  TimeGrid years;
  std::vector<std::string> families;

  double intercept = 0.0;
  Eigen::VectorXd trend;        // per time
  Eigen::VectorXd iid_time;     // gamma
  Eigen::VectorXd rw2_time;     // alpha (trend-free part)
  Eigen::VectorXd space;        // theta
  Eigen::MatrixXd interaction;  // delta, areas x times
  Eigen::VectorXd survey;       // nu, per family
  Eigen::MatrixXd survey_space; // families x areas
  Eigen::MatrixXd survey_time;  // families x times
  Eigen::MatrixXd eta;          // survey-free truth, areas x times

  /// Sum of the survey-free components.
  Eigen::MatrixXd reconstruct() const;
  /// Truth seen by a survey of the given family; families without a draw are unbiased.
  double observed_eta(Eigen::Index area, Eigen::Index time, const std::string& family) const;
  Eigen::Index family_index(const std::string& family) const;
};

/// Zero-mean draw with precision Q restricted to {Cx = 0}.
Eigen::VectorXd draw_constrained(const SparseMatrix& precision, const Eigen::MatrixXd& constraints,
                                 std::mt19937_64& rng);

TruthSurface draw_truth(const GeographyGraph& geography, const TimeGrid& years, const TruthConfig& config,
                        std::uint64_t seed);

struct SurveyDesign {
  std::string survey_id;
  std::string family;
  int year = 0;
  std::vector<std::string> areas;  // empty: every area
  int strata_per_area = 2;
  int clusters_per_stratum = 4;
  int women_per_cluster = 15;
  bool variable_weights = true;
  bool asks_unmet_need = true;
};

struct SurveyPlan {
  std::vector<SurveyDesign> surveys;
  double cluster_sd = 0.3;         // logit-scale cluster effect
  double traditional_rate = 0.05;  // among non-modern users
  double unmet_rate = 0.25;        // among non-users
};

/// Microdata for every survey of the plan. mCPR is Bernoulli(invlogit(truth +
/// cluster effect)); the other columns follow the plan's rates. Weights are the
/// inverse inclusion probabilities of each stratum.
SurveyDataset simulate_survey(const TruthSurface& truth, const SurveyPlan& plan, std::uint64_t seed);

/// Logit-scale cells drawn directly from the Gaussian working likelihood,
/// y ~ N(observed eta, v) with v uniform on [var_lo, var_hi].
std::vector<DirectEstimate> simulate_cells(const TruthSurface& truth, const std::vector<SurveyDesign>& surveys,
                                           double var_lo, double var_hi, std::uint64_t seed);

/// Women of reproductive age per (area, year): a lognormal base size growing at an
/// area-specific rate between 1% and 4% per year.
std::map<std::pair<std::string, int>, double> synthetic_population(const GeographyGraph& geography,
                                                                  const TimeGrid& years, std::uint64_t seed);

struct ScenarioFiles {
  std::filesystem::path microdata;
  std::filesystem::path roster;
  std::filesystem::path edges;
  std::optional<std::filesystem::path> population;
};

/// Writes the flat files the pipeline reads: microdata.csv, roster.csv, edges.csv and,
/// when given, population.csv.
ScenarioFiles write_scenario(const std::filesystem::path& dir, const GeographyGraph& geography,
                             const SurveyDataset& data,
                             const std::map<std::pair<std::string, int>, double>* population = nullptr);

/// The 37-area roster with a synthetic planar adjacency (connected).
GeographyGraph default_geography();
/// Thirteen surveys over 1990-2017 from four families; PMA2020 rounds sample two areas.
std::vector<SurveyDesign> default_survey_program();

struct CalibrationConfig {
  GeographyGraph geography;
  TimeGrid years;
  TruthConfig truth;
  std::vector<SurveyDesign> surveys;
  std::string model_id = "1b";
  FitSettings fit;
  double var_lo = 0.01;
  double var_hi = 0.05;
  bool from_microdata = false;
  SurveyPlan plan;  // used when from_microdata
};

struct CalibrationReport {
  int replicates = 0;
  std::size_t cells = 0;
  std::size_t covered = 0;
  double coverage = 0.0;
  double mean_bias = 0.0;   // posterior median minus truth, logit scale
  double mean_width = 0.0;  // 95% interval width, logit scale
  std::vector<double> replicate_coverage;
};

/// Fits the configured model to independent synthetic replicates and reports how
/// often the 95% interval of each (area, year) eta covers the truth.
CalibrationReport calibration_run(int n_replicates, const CalibrationConfig& config, std::uint64_t seed);

}  // namespace sae
