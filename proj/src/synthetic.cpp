#include "sae/synthetic.hpp"

#include <algorithm>
#include <cmath>

#include "sae/common.hpp"
#include "sae/sparse_cholesky.hpp"

namespace sae {

Eigen::MatrixXd TruthSurface::reconstruct() const {
  const auto n = static_cast<Eigen::Index>(areas.size());
  const auto T = years.size();
  Eigen::MatrixXd out(n, T);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index t = 0; t < T; ++t) {
      out(i, t) = intercept + trend[t] + iid_time[t] + rw2_time[t] + space[i] + interaction(i, t);
    }
  }
  return out;
}

Eigen::Index TruthSurface::family_index(const std::string& family) const {
  const auto it = std::find(families.begin(), families.end(), family);
  if (it == families.end()) throw InputError("survey family '" + family + "' has no truth draw");
  return it - families.begin();
}

double TruthSurface::observed_eta(Eigen::Index area, Eigen::Index time, const std::string& family) const {
  if (std::find(families.begin(), families.end(), family) == families.end()) return eta(area, time);
  const auto s = family_index(family);
  return eta(area, time) + survey[s] + survey_space(s, area) + survey_time(s, time);
}

Eigen::VectorXd draw_constrained(const SparseMatrix& precision, const Eigen::MatrixXd& constraints,
                                 std::mt19937_64& rng) {
  const auto n = precision.rows();
  SparseMatrix q = precision;
  if (constraints.rows()) q += SparseMatrix((constraints.transpose() * constraints).sparseView(0.0, 0.0));
  SparseCholesky chol;
  if (!chol.compute(q)) throw NumericalError("truth precision is not positive definite");
  std::normal_distribution<double> normal;
  Eigen::VectorXd z(n);
  for (Eigen::Index i = 0; i < n; ++i) z[i] = normal(rng);
  Eigen::VectorXd x = chol.sample_zero_mean(z);
  if (constraints.rows()) {
    const Eigen::MatrixXd w = chol.solve(Eigen::MatrixXd(constraints.transpose()));
    const Eigen::MatrixXd cw = constraints * w;
    x -= w * cw.llt().solve(constraints * x);
  }
  return x;
}

namespace {

Eigen::VectorXd iid_draw(Eigen::Index n, double tau, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(tau));
  Eigen::VectorXd x(n);
  for (Eigen::Index i = 0; i < n; ++i) x[i] = normal(rng);
  return x;
}

}  // namespace

TruthSurface draw_truth(const GeographyGraph& geography, const TimeGrid& years, const TruthConfig& config,
                        std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto n = static_cast<Eigen::Index>(geography.size());
  const auto T = years.size();
  TruthSurface s;
  s.areas = geography.areas();
  s.years = years;
  s.families = config.families;
  s.intercept = config.intercept;

  s.trend.resize(T);
  const double mid = 0.5 * static_cast<double>(T - 1);
  for (Eigen::Index t = 0; t < T; ++t) s.trend[t] = config.trend_per_year * (static_cast<double>(t) - mid);
  s.iid_time = iid_draw(T, config.tau_iid_time, rng);
  const auto rw2 = rw2_structure(T);
  s.rw2_time = draw_constrained(config.tau_rw2_time * rw2.structure, rw2.constraints, rng);

  if (config.variant == SpatialVariant::bym) {
    const auto icar = icar_structure(geography);
    s.space = draw_constrained(config.tau_space_structured * icar.structure, icar.constraints, rng) +
              iid_draw(n, config.tau_space_unstructured, rng);
  } else {
    const auto scaled = scaled_icar_structure(geography);
    const Eigen::VectorXd u = draw_constrained(scaled.structure, scaled.constraints, rng);
    const Eigen::VectorXd v = iid_draw(n, 1.0, rng);
    s.space = (std::sqrt(1.0 - config.phi_space) * v + std::sqrt(config.phi_space) * u) /
              std::sqrt(config.tau_space);
  }

  s.interaction = Eigen::MatrixXd::Zero(n, T);
  if (config.tau_interaction) {
    for (Eigen::Index i = 0; i < n; ++i) {
      s.interaction.row(i) = draw_constrained(*config.tau_interaction * rw2.structure, rw2.constraints, rng).transpose();
    }
  }

  const auto S = static_cast<Eigen::Index>(s.families.size());
  s.survey = Eigen::VectorXd::Zero(S);
  for (Eigen::Index f = 0; f < S && f < static_cast<Eigen::Index>(config.survey_bias.size()); ++f) {
    s.survey[f] = config.survey_bias[static_cast<std::size_t>(f)];
  }
  s.survey_space = Eigen::MatrixXd::Zero(S, n);
  s.survey_time = Eigen::MatrixXd::Zero(S, T);
  if (config.tau_survey_space) {
    for (Eigen::Index f = 0; f < S; ++f) s.survey_space.row(f) = iid_draw(n, *config.tau_survey_space, rng).transpose();
  }
  if (config.tau_survey_time) {
    for (Eigen::Index f = 0; f < S; ++f) s.survey_time.row(f) = iid_draw(T, *config.tau_survey_time, rng).transpose();
  }
  s.eta = s.reconstruct();
  return s;
}

namespace {

std::vector<std::size_t> survey_areas(const TruthSurface& truth, const SurveyDesign& d) {
  std::vector<std::size_t> out;
  if (d.areas.empty()) {
    for (std::size_t i = 0; i < truth.areas.size(); ++i) out.push_back(i);
    return out;
  }
  for (const auto& a : d.areas) {
    const auto it = std::find(truth.areas.begin(), truth.areas.end(), a);
    if (it == truth.areas.end()) throw InputError("survey " + d.survey_id + " samples unknown area '" + a + "'");
    out.push_back(static_cast<std::size_t>(it - truth.areas.begin()));
  }
  return out;
}

Eigen::Index time_index(const TruthSurface& truth, const SurveyDesign& d) {
  if (d.year < truth.years.first || d.year > truth.years.last) {
    throw InputError("survey " + d.survey_id + " year lies outside the truth grid");
  }
  return d.year - truth.years.first;
}

}  // namespace

SurveyDataset simulate_survey(const TruthSurface& truth, const SurveyPlan& plan, std::uint64_t seed) {
  std::vector<WomanRecord> records;
  std::uint64_t stream = 0;
  for (const auto& d : plan.surveys) {
    if (d.strata_per_area < 1 || d.clusters_per_stratum < 1 || d.women_per_cluster < 1) {
      throw InputError("survey " + d.survey_id + " has a non-positive sample count");
    }
    std::mt19937_64 rng(derive_seed(seed, stream++));
    std::normal_distribution<double> cluster_effect(0.0, plan.cluster_sd);
    std::uniform_int_distribution<int> age(15, 49);
    std::uniform_real_distribution<double> unit;
    std::uniform_real_distribution<double> frame(50.0, 500.0);
    const auto t = time_index(truth, d);
    for (auto i : survey_areas(truth, d)) {
      const auto& area = truth.areas[i];
      const double eta = truth.observed_eta(static_cast<Eigen::Index>(i), t, d.family);
      for (int h = 0; h < d.strata_per_area; ++h) {
        const std::string stratum = area + "-" + std::to_string(h);
        // Women in the stratum frame per sampled woman.
        const double weight = d.variable_weights ? std::round(frame(rng)) : 100.0;
        for (int c = 0; c < d.clusters_per_stratum; ++c) {
          const std::string cluster = stratum + "-" + std::to_string(c);
          const double p = inv_logit(eta + cluster_effect(rng));
          for (int w = 0; w < d.women_per_cluster; ++w) {
            WomanRecord r;
            r.survey_id = d.survey_id;
            r.survey_family = d.family;
            r.year = d.year;
            r.area_id = area;
            r.stratum_id = stratum;
            r.cluster_id = cluster;
            r.weight = weight;
            r.age_years = age(rng);
            const double pn = std::clamp((26.0 - r.age_years) / 12.0, 0.05, 0.9);
            r.parity = unit(rng) < pn ? 0 : 1 + static_cast<int>(unit(rng) * (r.age_years - 14) / 4.0);
            const bool modern = unit(rng) < p;
            const bool traditional = !modern && unit(rng) < plan.traditional_rate;
            const bool unmet = !modern && !traditional && unit(rng) < plan.unmet_rate;
            r.columns[static_cast<std::size_t>(SourceColumn::mcpr)] = modern;
            r.columns[static_cast<std::size_t>(SourceColumn::tcpr)] = traditional;
            r.columns[static_cast<std::size_t>(SourceColumn::cpr)] = modern || traditional;
            if (d.asks_unmet_need) r.columns[static_cast<std::size_t>(SourceColumn::unmet_need)] = unmet;
            records.push_back(std::move(r));
          }
        }
      }
    }
  }
  return make_dataset(std::move(records));
}

std::vector<DirectEstimate> simulate_cells(const TruthSurface& truth, const std::vector<SurveyDesign>& surveys,
                                           double var_lo, double var_hi, std::uint64_t seed) {
  if (!(var_lo > 0.0) || var_hi < var_lo) throw InputError("invalid cell variance range");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> var(var_lo, var_hi);
  std::normal_distribution<double> normal;
  std::vector<DirectEstimate> cells;
  for (const auto& d : surveys) {
    const auto t = time_index(truth, d);
    for (auto i : survey_areas(truth, d)) {
      DirectEstimate c;
      c.indicator = Indicator::mcpr;
      c.subgroup = Subgroup::all_women;
      c.area_id = truth.areas[i];
      c.year = d.year;
      c.survey_id = d.survey_id;
      c.survey_family = d.family;
      c.var_y = var(rng);
      c.y = truth.observed_eta(static_cast<Eigen::Index>(i), t, d.family) + std::sqrt(c.var_y) * normal(rng);
      c.p_hat = inv_logit(c.y);
      c.var_p = c.var_y * std::pow(c.p_hat * (1.0 - c.p_hat), 2);
      c.n_records = static_cast<std::size_t>(d.strata_per_area * d.clusters_per_stratum * d.women_per_cluster);
      c.n_clusters = static_cast<std::size_t>(d.strata_per_area * d.clusters_per_stratum);
      c.status = CellStatus::ok;
      cells.push_back(std::move(c));
    }
  }
  return cells;
}

std::map<std::pair<std::string, int>, double> synthetic_population(const GeographyGraph& geography,
                                                                  const TimeGrid& years, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::lognormal_distribution<double> base(std::log(8e5), 0.5);
  std::uniform_real_distribution<double> growth(0.01, 0.04);
  std::map<std::pair<std::string, int>, double> out;
  for (const auto& a : geography.areas()) {
    const double b = base(rng), g = growth(rng);
    for (int y = years.first; y <= years.last; ++y) out[{a, y}] = std::round(b * std::pow(1.0 + g, y - years.first));
  }
  return out;
}

ScenarioFiles write_scenario(const std::filesystem::path& dir, const GeographyGraph& geography,
                             const SurveyDataset& data,
                             const std::map<std::pair<std::string, int>, double>* population) {
  std::filesystem::create_directories(dir);
  ScenarioFiles f{dir / "microdata.csv", dir / "roster.csv", dir / "edges.csv", std::nullopt};
  write_microdata(f.microdata, data.records);
  write_geography(f.roster, f.edges, geography);
  if (population) {
    f.population = dir / "population.csv";
    write_population(*f.population, *population);
  }
  return f;
}

GeographyGraph default_geography() {
  const std::vector<std::string> areas = {
      "Abia",  "Adamawa", "Akwa Ibom", "Anambra", "Bauchi",   "Bayelsa", "Benue",  "Borno",
      "Cross River", "Delta", "Ebonyi", "Edo",   "Ekiti",    "Enugu",   "FCT",    "Gombe",
      "Imo",   "Jigawa",  "Kaduna",    "Kano",    "Katsina",  "Kebbi",   "Kogi",   "Kwara",
      "Lagos", "Nasarawa", "Niger",    "Ogun",    "Ondo",     "Osun",    "Oyo",    "Plateau",
      "Rivers", "Sokoto", "Taraba",    "Yobe",    "Zamfara"};
  // Six-column grid with rook neighbours and alternating diagonals.
  constexpr int kCols = 6;
  const auto n = static_cast<int>(areas.size());
  std::vector<std::pair<std::string, std::string>> edges;
  for (int i = 0; i < n; ++i) {
    const int r = i / kCols, c = i % kCols;
    if (c + 1 < kCols && i + 1 < n) edges.emplace_back(areas[i], areas[i + 1]);
    if (i + kCols < n) edges.emplace_back(areas[i], areas[i + kCols]);
    if ((r + c) % 2 == 0 && c + 1 < kCols && i + kCols + 1 < n) edges.emplace_back(areas[i], areas[i + kCols + 1]);
  }
  return GeographyGraph(areas, edges);
}

std::vector<SurveyDesign> default_survey_program() {
  std::vector<SurveyDesign> out;
  const auto add = [&](std::string family, int year, std::vector<std::string> areas = {}) {
    SurveyDesign d;
    d.survey_id = family + std::to_string(year);
    d.family = std::move(family);
    d.year = year;
    d.areas = std::move(areas);
    if (!d.areas.empty()) {
      d.strata_per_area = 4;
      d.clusters_per_stratum = 6;
    }
    out.push_back(std::move(d));
  };
  for (int y : {1990, 2003, 2008, 2013}) add("DHS", y);
  for (int y : {2007, 2011, 2016}) add("MICS", y);
  for (int y : {2014, 2015}) add("NNHS", y);
  for (int y : {2014, 2015, 2016, 2017}) add("PMA2020", y, {"Kaduna", "Lagos"});
  return out;
}

CalibrationReport calibration_run(int n_replicates, const CalibrationConfig& config, std::uint64_t seed) {
  if (n_replicates < 1) throw InputError("calibration needs at least one replicate");
  CalibrationReport report;
  report.replicates = n_replicates;
  double bias_sum = 0.0, width_sum = 0.0;
  const auto spec = model_spec(config.model_id);
  for (int rep = 0; rep < n_replicates; ++rep) {
    const auto base = static_cast<std::uint64_t>(rep) * 3;
    const auto truth = draw_truth(config.geography, config.years, config.truth, derive_seed(seed, base));
    std::vector<DirectEstimate> cells;
    if (config.from_microdata) {
      SurveyPlan plan = config.plan;
      plan.surveys = config.surveys;
      const auto ds = simulate_survey(truth, plan, derive_seed(seed, base + 1));
      cells = build_cells(ds, config.geography, std::vector<Subgroup>{Subgroup::all_women},
                          std::vector<Indicator>{Indicator::mcpr})
                  .cells;
    } else {
      cells = simulate_cells(truth, config.surveys, config.var_lo, config.var_hi, derive_seed(seed, base + 1));
    }
    const auto system = assemble_system(cells, spec, config.geography, config.years);
    FitSettings fs = config.fit;
    fs.seed = derive_seed(seed, base + 2);
    const auto fit = fit_model(system, fs);

    std::size_t covered = 0, total = 0;
    for (Eigen::Index i = 0; i < system.grid.n_areas; ++i) {
      for (Eigen::Index t = 0; t < system.grid.n_times; ++t) {
        const Eigen::VectorXd col = fit.eta_samples.col(system.eta_index(i, t));
        std::vector<double> v(col.data(), col.data() + col.size());
        const auto q = summarize_values(v);
        const double truth_eta = truth.eta(i, t);
        covered += q.lo95 <= truth_eta && truth_eta <= q.hi95;
        ++total;
        bias_sum += q.median - truth_eta;
        width_sum += q.hi95 - q.lo95;
      }
    }
    report.cells += total;
    report.covered += covered;
    report.replicate_coverage.push_back(static_cast<double>(covered) / static_cast<double>(total));
  }
  report.coverage = static_cast<double>(report.covered) / static_cast<double>(report.cells);
  report.mean_bias = bias_sum / static_cast<double>(report.cells);
  report.mean_width = width_sum / static_cast<double>(report.cells);
  return report;
}

}  // namespace sae
