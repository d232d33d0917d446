#pragma once
// Design-based direct estimates: Hajek ratio, stratified with-replacement Taylor
// linearization variance, and the logit transform with delta-method variance.

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sae/survey_data.hpp"

namespace sae {

enum class CellStatus { ok, degenerate_zero, degenerate_one, insufficient_clusters, zero_variance };

std::string_view to_string(CellStatus status);
CellStatus parse_cell_status(std::string_view name);

/// One woman's contribution to a cell: design coordinates plus her 0/1 value.
struct Observation {
  std::string stratum_id;
  std::string cluster_id;
  double weight = 0.0;
  double value = 0.0;
};

enum class LonelyPsu {
  skip,    // single-cluster strata contribute zero
  adjust,  // single-cluster strata are centred at the grand mean of cluster totals
};

struct VarianceOptions {
  LonelyPsu lonely_psu = LonelyPsu::skip;
};

struct DesignVariance {
  double var_p = 0.0;
  std::size_t n_clusters = 0;
  std::size_t n_strata = 0;
  std::size_t n_lonely_strata = 0;
  bool estimable = false;
};

/// Sum(x w) / Sum(w); nullopt for an empty cell or zero total weight.
std::optional<double> hajek_estimate(std::span<const Observation> obs);

/// Linearized variance of the Hajek ratio. Residuals z_j = w_j (x_j - p) / W are
/// totalled per cluster; each stratum contributes n_h/(n_h-1) * sum_c (z_hc - mean_h)^2.
DesignVariance design_variance(std::span<const Observation> obs, double p_hat,
                               const VarianceOptions& options = {});

struct LogitEstimate {
  double y = 0.0;
  double var_y = 0.0;
};

/// y = logit(p), var_y = var_p / (p(1-p))^2. Requires 0 < p < 1.
LogitEstimate logit_transform(double p_hat, double var_p);

struct DirectEstimate {
  std::string area_id;
  int year = 0;
  std::string survey_id;
  std::string survey_family;
  Subgroup subgroup = Subgroup::all_women;
  Indicator indicator = Indicator::mcpr;
  double p_hat = 0.0;
  double var_p = 0.0;
  double y = 0.0;
  double var_y = 0.0;
  std::size_t n_records = 0;
  std::size_t n_clusters = 0;
  CellStatus status = CellStatus::ok;
  /// True when a degenerate cell was given continuity-corrected values.
  bool corrected = false;

  /// Whether the cell enters the smoothing likelihood.
  bool usable() const { return status == CellStatus::ok || corrected; }
};

struct CellOptions {
  VarianceOptions variance;
  /// Degenerate cells (p = 0 or 1) get p = (n p + 1/2)/(n + 1), var = p(1-p)/n.
  bool continuity_correction = false;
};

struct CellBuildReport {
  std::vector<DirectEstimate> cells;
  std::size_t records_without_subgroup = 0;
  std::size_t empty_cells_skipped = 0;
};

/// Direct estimate for a single cell of observations.
DirectEstimate estimate_cell(std::span<const Observation> obs, const CellOptions& options = {});

/// One cell per non-empty (indicator, subgroup, area, year, survey), ordered by
/// indicator, subgroup, roster position of the area, year, survey id.
CellBuildReport build_cells(const SurveyDataset& dataset, const GeographyGraph& geography,
                            std::span<const Subgroup> subgroups,
                            std::span<const Indicator> indicators,
                            const CellOptions& options = {});

void write_cells(const std::filesystem::path& path, const std::vector<DirectEstimate>& cells);
std::vector<DirectEstimate> read_cells(const std::filesystem::path& path);

}  // namespace sae
