#include "sae/survey_data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>

#include "sae/common.hpp"
#include "sae/table.hpp"

namespace sae {

namespace {

constexpr std::array<std::string_view, 5> kIndicatorNames = {
    "mcpr", "tcpr", "cpr", "unmet_need", "demand_satisfied"};
constexpr std::array<std::string_view, 5> kSubgroupNames = {
    "all_women", "young_nulliparous", "young_parous", "older_nulliparous", "older_parous"};

bool is_missing_token(std::string_view s) { return s.empty() || s == "NA" || s == "." ; }

}  // namespace

std::string_view to_string(Indicator indicator) {
  return kIndicatorNames[static_cast<std::size_t>(indicator)];
}

std::string_view to_string(Subgroup subgroup) {
  return kSubgroupNames[static_cast<std::size_t>(subgroup)];
}

Indicator parse_indicator(std::string_view name) {
  for (std::size_t i = 0; i < kIndicatorNames.size(); ++i) {
    if (kIndicatorNames[i] == name) return static_cast<Indicator>(i);
  }
  throw InputError("unknown indicator '" + std::string(name) + "'");
}

Subgroup parse_subgroup(std::string_view name) {
  for (std::size_t i = 0; i < kSubgroupNames.size(); ++i) {
    if (kSubgroupNames[i] == name) return static_cast<Subgroup>(i);
  }
  throw InputError("unknown subgroup '" + std::string(name) + "'");
}

SubgroupRule subgroup_rule(Subgroup subgroup) {
  using P = SubgroupRule::Parity;
  switch (subgroup) {
    case Subgroup::all_women: return {15, 49, P::any};
    case Subgroup::young_nulliparous: return {15, 24, P::nulliparous};
    case Subgroup::young_parous: return {15, 24, P::parous};
    case Subgroup::older_nulliparous: return {25, 49, P::nulliparous};
    case Subgroup::older_parous: return {25, 49, P::parous};
  }
  return {15, 49, P::any};
}

std::optional<bool> WomanRecord::indicator(Indicator which) const {
  const auto mcpr = column(SourceColumn::mcpr);
  const auto tcpr = column(SourceColumn::tcpr);
  const auto unmet = column(SourceColumn::unmet_need);
  auto cpr = column(SourceColumn::cpr);
  if (!cpr) {
    if ((mcpr && *mcpr) || (tcpr && *tcpr)) {
      cpr = true;
    } else if (mcpr && tcpr) {
      cpr = false;
    }
  }
  switch (which) {
    case Indicator::mcpr: return mcpr;
    case Indicator::tcpr: return tcpr;
    case Indicator::cpr: return cpr;
    case Indicator::unmet_need: return unmet;
    case Indicator::demand_satisfied:
      if (!cpr || !mcpr) return std::nullopt;
      if (*cpr) return mcpr;
      if (!unmet || !*unmet) return std::nullopt;
      return mcpr;
  }
  return std::nullopt;
}

std::optional<Subgroup> classify_subgroup(const WomanRecord& record) {
  if (record.age_years < 15 || record.age_years > 49 || !record.parity) return std::nullopt;
  const bool young = record.age_years <= 24;
  const bool parous = *record.parity >= 1;
  if (young) return parous ? Subgroup::young_parous : Subgroup::young_nulliparous;
  return parous ? Subgroup::older_parous : Subgroup::older_nulliparous;
}

bool in_subgroup(const WomanRecord& record, Subgroup subgroup) {
  if (subgroup == Subgroup::all_women) {
    return record.age_years >= 15 && record.age_years <= 49;
  }
  auto s = classify_subgroup(record);
  return s && *s == subgroup;
}

namespace {

// Returns an empty string when the record satisfies the row-level invariants.
std::string row_violation(const WomanRecord& r) {
  if (!std::isfinite(r.weight) || r.weight <= 0.0) return "non-positive weight";
  if (r.age_years < 15 || r.age_years > 49) return "age outside 15-49";
  if (r.parity && *r.parity < 0) return "negative parity";
  const auto m = r.column(SourceColumn::mcpr);
  const auto t = r.column(SourceColumn::tcpr);
  const auto c = r.column(SourceColumn::cpr);
  if (m && t && c && (*c != (*m || *t))) return "cpr inconsistent with mcpr/tcpr";
  return {};
}

void check_nesting(const std::vector<WomanRecord>& records) {
  std::map<std::pair<std::string, std::string>, std::string> stratum_of;
  for (const auto& r : records) {
    auto [it, inserted] = stratum_of.emplace(std::pair{r.survey_id, r.cluster_id}, r.stratum_id);
    if (!inserted && it->second != r.stratum_id) {
      throw InputError("cluster " + r.cluster_id + " in survey " + r.survey_id +
                       " spans strata " + it->second + " and " + r.stratum_id);
    }
  }
}

void fill_report(SurveyDataset& ds) {
  for (const auto& r : ds.records) ++ds.load_report[{r.survey_id, r.year, r.area_id}];
}

}  // namespace

SurveyDataset make_dataset(std::vector<WomanRecord> records) {
  SurveyDataset ds;
  for (std::size_t i = 0; i < records.size(); ++i) {
    auto reason = row_violation(records[i]);
    if (!reason.empty()) {
      ds.rejections.push_back({i, std::move(reason)});
    } else {
      ds.records.push_back(std::move(records[i]));
    }
  }
  check_nesting(ds.records);
  fill_report(ds);
  return ds;
}

SurveyDataset load_microdata(const std::filesystem::path& path, const ColumnMapping& mapping) {
  const auto table = read_delimited(path, mapping.delimiter);
  const auto c_survey = table.require_column(mapping.survey_id);
  const auto c_year = table.require_column(mapping.year);
  const auto c_area = table.require_column(mapping.area_id);
  const auto c_stratum = table.require_column(mapping.stratum_id);
  const auto c_cluster = table.require_column(mapping.cluster_id);
  const auto c_weight = table.require_column(mapping.weight);
  const auto c_age = table.require_column(mapping.age);
  const auto optional_col = [&](const std::string& name) -> std::optional<std::size_t> {
    if (name.empty()) return std::nullopt;
    return table.column(name);
  };
  const auto c_family = optional_col(mapping.survey_family);
  const auto c_parity = optional_col(mapping.parity);
  const std::array<std::optional<std::size_t>, 4> c_ind = {
      optional_col(mapping.mcpr), optional_col(mapping.tcpr), optional_col(mapping.cpr),
      optional_col(mapping.unmet_need)};
  if (std::none_of(c_ind.begin(), c_ind.end(), [](const auto& c) { return c.has_value(); })) {
    throw InputError(path.string() + ": no indicator column found");
  }

  SurveyDataset ds;
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    const auto& row = table.rows[i];
    const auto line = table.line_numbers[i];
    WomanRecord r;
    std::string reason;
    try {
      r.survey_id = row[c_survey];
      r.survey_family = c_family && !row[*c_family].empty() ? row[*c_family] : r.survey_id;
      r.area_id = row[c_area];
      r.stratum_id = row[c_stratum];
      r.cluster_id = row[c_cluster];
      r.year = static_cast<int>(parse_int(row[c_year], "year"));
      r.weight = parse_double(row[c_weight], "weight");
      r.age_years = static_cast<int>(parse_int(row[c_age], "age"));
      if (c_parity && !is_missing_token(row[*c_parity])) {
        r.parity = static_cast<int>(parse_int(row[*c_parity], "parity"));
      }
      for (std::size_t k = 0; k < c_ind.size(); ++k) {
        if (!c_ind[k]) continue;
        const auto& tok = row[*c_ind[k]];
        if (is_missing_token(tok)) continue;
        if (tok == "0") {
          r.columns[k] = false;
        } else if (tok == "1") {
          r.columns[k] = true;
        } else {
          reason = "indicator value outside {0,1,missing}";
          break;
        }
      }
    } catch (const InputError& e) {
      reason = e.what();
    }
    if (reason.empty()) reason = row_violation(r);
    if (!reason.empty()) {
      ds.rejections.push_back({line, std::move(reason)});
      continue;
    }
    ds.records.push_back(std::move(r));
  }
  check_nesting(ds.records);
  fill_report(ds);
  return ds;
}

void write_microdata(const std::filesystem::path& path, const std::vector<WomanRecord>& records,
                     const ColumnMapping& mapping) {
  std::vector<std::string> header = {mapping.survey_id, mapping.survey_family, mapping.year,
                                     mapping.area_id,   mapping.stratum_id,    mapping.cluster_id,
                                     mapping.weight,    mapping.age,           mapping.parity,
                                     mapping.mcpr,      mapping.tcpr,          mapping.cpr,
                                     mapping.unmet_need};
  std::vector<std::vector<std::string>> rows;
  rows.reserve(records.size());
  const auto ind = [](std::optional<bool> v) -> std::string {
    if (!v) return "NA";
    return *v ? "1" : "0";
  };
  for (const auto& r : records) {
    rows.push_back({r.survey_id, r.survey_family, std::to_string(r.year), r.area_id,
                    r.stratum_id, r.cluster_id, format_double(r.weight),
                    std::to_string(r.age_years), r.parity ? std::to_string(*r.parity) : "NA",
                    ind(r.columns[0]), ind(r.columns[1]), ind(r.columns[2]), ind(r.columns[3])});
  }
  write_delimited(path, header, rows, mapping.delimiter);
}

GeographyGraph::GeographyGraph(std::vector<std::string> areas,
                               const std::vector<std::pair<std::string, std::string>>& edges)
    : areas_(std::move(areas)) {
  for (std::size_t i = 0; i < areas_.size(); ++i) {
    if (!index_.emplace(areas_[i], i).second) {
      throw InputError("duplicate area id '" + areas_[i] + "'");
    }
  }
  for (const auto& [a, b] : edges) {
    auto ia = index_of(a);
    auto ib = index_of(b);
    if (!ia) throw InputError("unknown area '" + a + "' in edge list");
    if (!ib) throw InputError("unknown area '" + b + "' in edge list");
    if (*ia == *ib) throw InputError("self-edge on area '" + a + "'");
    edges_.emplace_back(std::min(*ia, *ib), std::max(*ia, *ib));
  }
  std::sort(edges_.begin(), edges_.end());
  edges_.erase(std::unique(edges_.begin(), edges_.end()), edges_.end());

  neighbours_.assign(areas_.size(), {});
  for (const auto& [a, b] : edges_) {
    neighbours_[a].push_back(b);
    neighbours_[b].push_back(a);
  }
  for (auto& n : neighbours_) std::sort(n.begin(), n.end());

  // Connected components by iterative DFS, labelled in roster order.
  constexpr auto kUnset = static_cast<std::size_t>(-1);
  component_.assign(areas_.size(), kUnset);
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < areas_.size(); ++start) {
    if (component_[start] != kUnset) continue;
    stack.push_back(start);
    component_[start] = n_components_;
    while (!stack.empty()) {
      const auto v = stack.back();
      stack.pop_back();
      for (auto w : neighbours_[v]) {
        if (component_[w] == kUnset) {
          component_[w] = n_components_;
          stack.push_back(w);
        }
      }
    }
    ++n_components_;
  }
}

std::optional<std::size_t> GeographyGraph::index_of(const std::string& area) const {
  auto it = index_.find(area);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::size_t GeographyGraph::require_index(const std::string& area) const {
  auto i = index_of(area);
  if (!i) throw InputError("area '" + area + "' is not in the geography roster");
  return *i;
}

std::optional<double> GeographyGraph::population(const std::string& area, int year) const {
  auto it = population_.find({area, year});
  if (it == population_.end()) return std::nullopt;
  return it->second;
}

GeographyGraph load_geography(const std::filesystem::path& roster,
                              const std::filesystem::path& edges) {
  const auto rt = read_delimited(roster);
  const auto c_area = rt.require_column("area_id");
  std::vector<std::string> areas;
  for (const auto& row : rt.rows) areas.push_back(row[c_area]);

  std::vector<std::pair<std::string, std::string>> edge_list;
  if (!edges.empty()) {
    const auto et = read_delimited(edges);
    const auto c_from = et.require_column("from");
    const auto c_to = et.require_column("to");
    for (const auto& row : et.rows) edge_list.emplace_back(row[c_from], row[c_to]);
  }
  return GeographyGraph(std::move(areas), edge_list);
}

std::map<std::pair<std::string, int>, double> load_population(const std::filesystem::path& path) {
  const auto t = read_delimited(path);
  const auto c_area = t.require_column("area_id");
  const auto c_year = t.require_column("year");
  const auto c_count = t.require_column("count");
  std::map<std::pair<std::string, int>, double> out;
  for (const auto& row : t.rows) {
    const double count = parse_double(row[c_count], "population count");
    if (!(count >= 0.0)) throw InputError("negative population for area " + row[c_area]);
    out[{row[c_area], static_cast<int>(parse_int(row[c_year], "year"))}] = count;
  }
  return out;
}

void write_population(const std::filesystem::path& path,
                      const std::map<std::pair<std::string, int>, double>& population) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& [key, count] : population) rows.push_back({key.first, std::to_string(key.second), format_double(count)});
  write_delimited(path, {"area_id", "year", "count"}, rows);
}

void write_geography(const std::filesystem::path& roster, const std::filesystem::path& edges,
                     const GeographyGraph& graph) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& a : graph.areas()) rows.push_back({a});
  write_delimited(roster, {"area_id"}, rows);
  rows.clear();
  for (const auto& [a, b] : graph.edges()) rows.push_back({graph.areas()[a], graph.areas()[b]});
  write_delimited(edges, {"from", "to"}, rows);
}

}  // namespace sae
