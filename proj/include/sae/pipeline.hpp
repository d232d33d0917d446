#pragma once
// End-to-end orchestration: direct estimates, per-outcome model search, selection and
// reporting of levels, trends, composed indicators and population aggregates.
//
// Output layout under the configured output directory:
//   direct_estimates.csv                 every cell of every configured outcome
//   <indicator>/<subgroup>/              one directory per outcome
//     direct_estimates.csv
//     selection.csv, variance_shares.csv
//     fits/<model>/hyper_samples.csv, latent_summary.csv, pointwise.csv, diagnostics.json
//     eta_samples.csv                    winning model, survey-free logit draws
//     estimates.csv, annual_change.csv, aggregate.csv (or aggregate_skipped.txt)
//   demand_satisfied_check/<subgroup>.csv
//   manifest.json
//   FAILED                               only when a stage aborted

#include <Eigen/Dense>
#include <filesystem>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sae/direct_estimates.hpp"
#include "sae/inference.hpp"
#include "sae/model_selection.hpp"
#include "sae/survey_data.hpp"

namespace sae {

std::string_view version_string();

struct RunPaths {
  std::filesystem::path microdata;
  std::filesystem::path roster;
  std::filesystem::path edges;
  std::optional<std::filesystem::path> population;
  std::filesystem::path output = "output";
};

struct RunConfig {
  RunPaths paths;
  int first_year = 0;
  int last_year = 0;
  std::optional<int> projection_horizon;  // default: last survey year + 1
  std::vector<Indicator> indicators;
  std::vector<Subgroup> subgroups;
  std::vector<std::string> models;
  FitMode mode = FitMode::full;
  std::optional<std::uint64_t> seed;
  McmcSettings mcmc;
  CellOptions cell_options;
  std::optional<std::pair<int, int>> change_window;  // default: last survey year - 5 .. last survey year
  double sparsity_threshold = 3.0;
  unsigned threads = 1;  // 0: one per hardware thread

  /// Throws InputError on an invalid combination (unknown model, empty lists,
  /// full mode without a seed, inverted years).
  void validate() const;
  std::uint64_t effective_seed() const { return seed.value_or(1); }
};

/// Parses a JSON config. Relative paths are resolved against base_dir.
RunConfig parse_run_config(const std::string& json_text, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);
/// Canonical JSON rendering; the config hash is FNV-1a over this text.
std::string canonical_config(const RunConfig& config);
std::string config_hash(const RunConfig& config);

/// An aborted stage; the message names the stage and the outcome it was working on.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& detail)
      : std::runtime_error("stage '" + stage + "' failed: " + detail), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

/// Survey-free logit-scale posterior draws on the (area, year) grid.
struct EtaSamples {
  std::vector<std::string> areas;
  TimeGrid years;
  Eigen::MatrixXd samples;  // K x (areas * years), area-major

  Eigen::Index column(Eigen::Index area, int year) const {
    return area * years.size() + (year - years.first);
  }
  Eigen::Index area_index(const std::string& area) const;
};

EtaSamples eta_samples_from_fit(const PosteriorFit& fit, const LatentSystem& system);
void write_eta_samples(const std::filesystem::path& path, const EtaSamples& eta);
EtaSamples read_eta_samples(const std::filesystem::path& path);

struct ChangeSummary {
  double median = 0.0;  // percentage points per year
  double lo95 = 0.0;
  double hi95 = 0.0;
  bool significant = false;  // interval excludes zero
};

/// Per-sample (invlogit(eta_y1) - invlogit(eta_y0)) / (y1 - y0), in percentage points.
ChangeSummary annual_change(const EtaSamples& eta, Eigen::Index area, int y0, int y1);

/// mcpr / (cpr + unmet); nullopt when the denominator is not positive.
std::optional<double> demand_satisfied_composed(double mcpr, double cpr, double unmet);

struct AggregateRow {
  int year = 0;
  IntervalSummary rate;   // population-weighted proportion
  IntervalSummary users;  // sum of p * pop
  double population = 0.0;
};

/// Sample-wise national aggregation. Throws InputError when a population row is missing.
std::vector<AggregateRow> aggregate(const EtaSamples& eta, const GeographyGraph& geography);

struct EstimateRow {
  std::string area;
  int year = 0;
  IntervalSummary summary;
  int n_surveys_informing = 0;
};

/// Proportion-scale medians and 95% intervals per (area, year); the survey count is the
/// number of distinct surveys with a usable cell in that area and year.
std::vector<EstimateRow> estimate_table(const EtaSamples& eta, const std::vector<DirectEstimate>& cells);

/// Median over areas of the number of usable cells per area.
double median_cells_per_area(const std::vector<DirectEstimate>& cells, const GeographyGraph& geography);

std::filesystem::path outcome_dir(const std::filesystem::path& output, Indicator indicator, Subgroup subgroup);

struct OutcomeSummary {
  Indicator indicator = Indicator::mcpr;
  Subgroup subgroup = Subgroup::all_women;
  std::size_t usable_cells = 0;
  std::string winner;
  Selection selection;
  std::vector<std::string> warnings;
};

struct RunSummary {
  std::vector<OutcomeSummary> outcomes;
  std::vector<std::string> warnings;
  std::string config_hash;
  int projection_horizon = 0;
  std::ostream* log = nullptr;  // progress lines, when set
};

/// Microdata to the top-level and per-outcome direct-estimate tables.
std::vector<DirectEstimate> run_direct(const RunConfig& config, RunSummary& summary);
/// Cell table to per-model fits and selection for every outcome.
void run_fit(const RunConfig& config, const std::vector<DirectEstimate>& cells, RunSummary& summary);
/// Winning fits to estimate, change, aggregate and composition tables.
void run_report(const RunConfig& config, RunSummary& summary);

enum class Stages { direct, fit, report, all };

/// Runs the requested stages and writes the manifest. On failure writes a FAILED
/// marker beside the partial outputs and rethrows as StageError.
RunSummary run_pipeline(const RunConfig& config, Stages stages, std::ostream* log = nullptr);

}  // namespace sae
