#include "sae/direct_estimates.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <tuple>

#include "sae/common.hpp"
#include "sae/table.hpp"

namespace sae {

namespace {
constexpr std::array<std::string_view, 5> kStatusNames = {
    "ok", "degenerate_zero", "degenerate_one", "insufficient_clusters", "zero_variance"};
}

std::string_view to_string(CellStatus status) {
  return kStatusNames[static_cast<std::size_t>(status)];
}

CellStatus parse_cell_status(std::string_view name) {
  for (std::size_t i = 0; i < kStatusNames.size(); ++i) {
    if (kStatusNames[i] == name) return static_cast<CellStatus>(i);
  }
  throw InputError("unknown cell status '" + std::string(name) + "'");
}

std::optional<double> hajek_estimate(std::span<const Observation> obs) {
  double num = 0.0;
  double den = 0.0;
  for (const auto& o : obs) {
    num += o.value * o.weight;
    den += o.weight;
  }
  if (obs.empty() || !(den > 0.0)) return std::nullopt;
  return num / den;
}

DesignVariance design_variance(std::span<const Observation> obs, double p_hat,
                               const VarianceOptions& options) {
  DesignVariance out;
  double total_weight = 0.0;
  for (const auto& o : obs) total_weight += o.weight;
  if (obs.empty() || !(total_weight > 0.0)) return out;

  std::map<std::string, std::map<std::string, double>> totals;  // stratum -> cluster -> z
  for (const auto& o : obs) {
    totals[o.stratum_id][o.cluster_id] += o.weight * (o.value - p_hat) / total_weight;
  }

  out.n_strata = totals.size();
  double grand_sum = 0.0;
  for (const auto& [stratum, clusters] : totals) {
    out.n_clusters += clusters.size();
    for (const auto& [id, z] : clusters) grand_sum += z;
  }
  const double grand_mean = out.n_clusters ? grand_sum / static_cast<double>(out.n_clusters) : 0.0;

  bool any_paired_stratum = false;
  double var = 0.0;
  for (const auto& [stratum, clusters] : totals) {
    const auto n_h = clusters.size();
    if (n_h == 1) {
      ++out.n_lonely_strata;
      if (options.lonely_psu == LonelyPsu::adjust) {
        const double d = clusters.begin()->second - grand_mean;
        var += d * d;
      }
      continue;
    }
    any_paired_stratum = true;
    double mean = 0.0;
    for (const auto& [id, z] : clusters) mean += z;
    mean /= static_cast<double>(n_h);
    double ss = 0.0;
    for (const auto& [id, z] : clusters) ss += (z - mean) * (z - mean);
    var += static_cast<double>(n_h) / static_cast<double>(n_h - 1) * ss;
  }
  out.var_p = var;
  out.estimable = out.n_clusters >= 2 &&
                  (any_paired_stratum || options.lonely_psu == LonelyPsu::adjust);
  return out;
}

LogitEstimate logit_transform(double p_hat, double var_p) {
  if (!(p_hat > 0.0 && p_hat < 1.0)) {
    throw NumericalError("logit_transform requires 0 < p < 1, got " + format_double(p_hat));
  }
  const double d = p_hat * (1.0 - p_hat);
  return {logit(p_hat), var_p / (d * d)};
}

DirectEstimate estimate_cell(std::span<const Observation> obs, const CellOptions& options) {
  DirectEstimate cell;
  const auto p = hajek_estimate(obs);
  if (!p) throw InputError("estimate_cell called on an empty cell");
  cell.p_hat = *p;
  cell.n_records = obs.size();

  const bool all_zero =
      std::all_of(obs.begin(), obs.end(), [](const Observation& o) { return o.value == 0.0; });
  const bool all_one =
      std::all_of(obs.begin(), obs.end(), [](const Observation& o) { return o.value == 1.0; });

  const auto dv = design_variance(obs, cell.p_hat, options.variance);
  cell.n_clusters = dv.n_clusters;
  cell.var_p = dv.var_p;

  if (all_zero || all_one) {
    cell.p_hat = all_zero ? 0.0 : 1.0;
    cell.var_p = 0.0;
    cell.status = all_zero ? CellStatus::degenerate_zero : CellStatus::degenerate_one;
    if (options.continuity_correction) {
      const double n = static_cast<double>(obs.size());
      const double pc = (n * cell.p_hat + 0.5) / (n + 1.0);
      const auto lt = logit_transform(pc, pc * (1.0 - pc) / n);
      cell.y = lt.y;
      cell.var_y = lt.var_y;
      cell.corrected = true;
    }
    return cell;
  }
  if (!dv.estimable) {
    cell.status = CellStatus::insufficient_clusters;
    return cell;
  }
  if (!(dv.var_p > 0.0)) {
    cell.status = CellStatus::zero_variance;
    return cell;
  }
  const auto lt = logit_transform(cell.p_hat, cell.var_p);
  cell.y = lt.y;
  cell.var_y = lt.var_y;
  cell.status = CellStatus::ok;
  return cell;
}

CellBuildReport build_cells(const SurveyDataset& dataset, const GeographyGraph& geography,
                            std::span<const Subgroup> subgroups,
                            std::span<const Indicator> indicators, const CellOptions& options) {
  CellBuildReport report;
  std::vector<std::size_t> area_index(dataset.records.size());
  for (std::size_t j = 0; j < dataset.records.size(); ++j) {
    const auto& r = dataset.records[j];
    area_index[j] = geography.require_index(r.area_id);
    if (!classify_subgroup(r)) ++report.records_without_subgroup;
  }

  using Key = std::tuple<std::size_t, int, std::string>;
  for (auto indicator : indicators) {
    for (auto subgroup : subgroups) {
      std::map<Key, std::vector<Observation>> groups;
      std::map<Key, std::string> family;
      for (std::size_t j = 0; j < dataset.records.size(); ++j) {
        const auto& r = dataset.records[j];
        if (!in_subgroup(r, subgroup)) continue;
        const auto v = r.indicator(indicator);
        if (!v) continue;
        Key key{area_index[j], r.year, r.survey_id};
        groups[key].push_back({r.stratum_id, r.cluster_id, r.weight, *v ? 1.0 : 0.0});
        family.emplace(key, r.survey_family);
      }
      for (const auto& [key, obs] : groups) {
        if (!hajek_estimate(obs)) {
          ++report.empty_cells_skipped;
          continue;
        }
        auto cell = estimate_cell(obs, options);
        cell.area_id = geography.areas()[std::get<0>(key)];
        cell.year = std::get<1>(key);
        cell.survey_id = std::get<2>(key);
        cell.survey_family = family.at(key);
        cell.subgroup = subgroup;
        cell.indicator = indicator;
        report.cells.push_back(std::move(cell));
      }
    }
  }
  return report;
}

namespace {
const std::vector<std::string> kCellHeader = {
    "indicator", "subgroup", "area_id", "year", "survey_id", "survey_family", "p_hat", "var_p",
    "y",         "var_y",    "n_records", "n_clusters", "status", "corrected"};
}

void write_cells(const std::filesystem::path& path, const std::vector<DirectEstimate>& cells) {
  std::vector<std::vector<std::string>> rows;
  rows.reserve(cells.size());
  for (const auto& c : cells) {
    rows.push_back({std::string(to_string(c.indicator)), std::string(to_string(c.subgroup)),
                    c.area_id, std::to_string(c.year), c.survey_id, c.survey_family,
                    format_double(c.p_hat), format_double(c.var_p), format_double(c.y),
                    format_double(c.var_y), std::to_string(c.n_records),
                    std::to_string(c.n_clusters), std::string(to_string(c.status)),
                    c.corrected ? "1" : "0"});
  }
  write_delimited(path, kCellHeader, rows);
}

std::vector<DirectEstimate> read_cells(const std::filesystem::path& path) {
  const auto t = read_delimited(path);
  std::vector<std::size_t> col;
  for (const auto& name : kCellHeader) col.push_back(t.require_column(name));
  std::vector<DirectEstimate> cells;
  for (const auto& row : t.rows) {
    DirectEstimate c;
    c.indicator = parse_indicator(row[col[0]]);
    c.subgroup = parse_subgroup(row[col[1]]);
    c.area_id = row[col[2]];
    c.year = static_cast<int>(parse_int(row[col[3]], "year"));
    c.survey_id = row[col[4]];
    c.survey_family = row[col[5]];
    c.p_hat = parse_double(row[col[6]], "p_hat");
    c.var_p = parse_double(row[col[7]], "var_p");
    c.y = parse_double(row[col[8]], "y");
    c.var_y = parse_double(row[col[9]], "var_y");
    c.n_records = static_cast<std::size_t>(parse_int(row[col[10]], "n_records"));
    c.n_clusters = static_cast<std::size_t>(parse_int(row[col[11]], "n_clusters"));
    c.status = parse_cell_status(row[col[12]]);
    c.corrected = row[col[13]] == "1";
    cells.push_back(std::move(c));
  }
  return cells;
}

}  // namespace sae
