#pragma once
// Normalized survey microdata and geography: schemas, validation and loading.

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_map>
#include <utility>
#include <vector>

namespace sae {

enum class Indicator { mcpr, tcpr, cpr, unmet_need, demand_satisfied };
enum class Subgroup { all_women, young_nulliparous, young_parous, older_nulliparous, older_parous };

inline constexpr std::array<Indicator, 5> kAllIndicators = {
    Indicator::mcpr, Indicator::tcpr, Indicator::cpr, Indicator::unmet_need,
    Indicator::demand_satisfied};
inline constexpr std::array<Subgroup, 5> kAllSubgroups = {
    Subgroup::all_women, Subgroup::young_nulliparous, Subgroup::young_parous,
    Subgroup::older_nulliparous, Subgroup::older_parous};

std::string_view to_string(Indicator indicator);
std::string_view to_string(Subgroup subgroup);
Indicator parse_indicator(std::string_view name);
Subgroup parse_subgroup(std::string_view name);

/// Age band and parity rule of a subgroup. Young = 15-24, older = 25-49.
struct SubgroupRule {
  int age_lo;
  int age_hi;
  enum class Parity { any, nulliparous, parous } parity;
};
SubgroupRule subgroup_rule(Subgroup subgroup);

/// Binary indicator columns that arrive precomputed in the microdata.
/// cpr and demand_satisfied are derived when not supplied.
enum class SourceColumn { mcpr = 0, tcpr = 1, cpr = 2, unmet_need = 3 };

struct WomanRecord {
  std::string survey_id;
  /// Survey instrument family (DHS, MICS, ...); equals survey_id when not mapped.
  std::string survey_family;
  int year = 0;
  std::string area_id;
  std::string stratum_id;
  std::string cluster_id;
  double weight = 0.0;
  int age_years = 0;
  std::optional<int> parity;
  std::array<std::optional<bool>, 4> columns{};

  std::optional<bool> column(SourceColumn c) const {
    return columns[static_cast<std::size_t>(c)];
  }

  /// Indicator value for this woman; nullopt when missing or when she is outside the
  /// indicator's denominator (demand satisfied: neither using nor with unmet need).
  std::optional<bool> indicator(Indicator which) const;
};

/// The age-parity subgroup a record falls in; nullopt when age is outside [15,49] or
/// parity is missing.
std::optional<Subgroup> classify_subgroup(const WomanRecord& record);

bool in_subgroup(const WomanRecord& record, Subgroup subgroup);

/// Maps schema fields to header names in the microdata file. Optional indicator
/// columns that are empty strings are treated as absent from the file.
struct ColumnMapping {
  std::string survey_id = "survey_id";
  std::string survey_family = "survey_family";
  std::string year = "year";
  std::string area_id = "area_id";
  std::string stratum_id = "stratum_id";
  std::string cluster_id = "cluster_id";
  std::string weight = "weight";
  std::string age = "age";
  std::string parity = "parity";
  std::string mcpr = "mcpr";
  std::string tcpr = "tcpr";
  std::string cpr = "cpr";
  std::string unmet_need = "unmet_need";
  char delimiter = ',';
};

struct RowRejection {
  std::size_t line = 0;
  std::string reason;
};

using CellKey = std::tuple<std::string, int, std::string>;  // (survey, year, area)

struct SurveyDataset {
  std::vector<WomanRecord> records;
  std::vector<RowRejection> rejections;
  /// Accepted records per (survey, year, area).
  std::map<CellKey, std::size_t> load_report;
};

/// Loads and validates delimited microdata. Row-level violations are rejected with
/// line-numbered reasons; a missing column or a cluster nested in two strata of the
/// same survey throws InputError.
SurveyDataset load_microdata(const std::filesystem::path& path, const ColumnMapping& mapping);

/// Validates records built in memory (same checks as load_microdata). Throws on
/// cluster/stratum nesting violations; returns rejected indices otherwise.
SurveyDataset make_dataset(std::vector<WomanRecord> records);

/// Writes records in the default column layout understood by load_microdata.
void write_microdata(const std::filesystem::path& path, const std::vector<WomanRecord>& records,
                     const ColumnMapping& mapping = {});

class GeographyGraph {
 public:
  GeographyGraph() = default;
  /// Throws InputError on duplicate ids, unknown endpoints or self-edges.
  GeographyGraph(std::vector<std::string> areas,
                 const std::vector<std::pair<std::string, std::string>>& edges);

  std::size_t size() const { return areas_.size(); }
  const std::vector<std::string>& areas() const { return areas_; }
  std::optional<std::size_t> index_of(const std::string& area) const;
  std::size_t require_index(const std::string& area) const;

  /// Undirected edges with first < second, sorted.
  const std::vector<std::pair<std::size_t, std::size_t>>& edges() const { return edges_; }
  const std::vector<std::vector<std::size_t>>& neighbours() const { return neighbours_; }

  std::size_t component_count() const { return n_components_; }
  const std::vector<std::size_t>& component_of() const { return component_; }
  bool connected() const { return n_components_ <= 1; }

  void set_population(std::map<std::pair<std::string, int>, double> population) {
    population_ = std::move(population);
  }
  bool has_population() const { return !population_.empty(); }
  std::optional<double> population(const std::string& area, int year) const;

 private:
  std::vector<std::string> areas_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<std::pair<std::size_t, std::size_t>> edges_;
  std::vector<std::vector<std::size_t>> neighbours_;
  std::vector<std::size_t> component_;
  std::size_t n_components_ = 0;
  std::map<std::pair<std::string, int>, double> population_;
};

/// Roster: one area id per line under header `area_id`. Edges: `from,to` per line.
GeographyGraph load_geography(const std::filesystem::path& roster,
                              const std::filesystem::path& edges);

/// Population table with columns area_id, year, count.
std::map<std::pair<std::string, int>, double> load_population(const std::filesystem::path& path);

void write_population(const std::filesystem::path& path,
                      const std::map<std::pair<std::string, int>, double>& population);

void write_geography(const std::filesystem::path& roster, const std::filesystem::path& edges,
                     const GeographyGraph& graph);

}  // namespace sae
