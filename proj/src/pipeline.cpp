#include "sae/pipeline.hpp"

#include <gsl/gsl_errno.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "sae/common.hpp"
#include "sae/table.hpp"

namespace sae {

namespace fs = std::filesystem;
using nlohmann::json;

#ifndef SAE_VERSION
#define SAE_VERSION "0.0.0"
#endif

std::string_view version_string() { return SAE_VERSION; }

// ---------------------------------------------------------------------------
// Configuration

void RunConfig::validate() const {
  if (indicators.empty()) throw InputError("config lists no indicators");
  if (subgroups.empty()) throw InputError("config lists no subgroups");
  if (models.empty()) throw InputError("config lists no models");
  std::set<std::string> seen;
  for (const auto& m : models) {
    model_spec(m);
    if (!seen.insert(m).second) throw InputError("model '" + m + "' listed twice");
  }
  if (first_year > last_year) throw InputError("years.first is after years.last");
  if (projection_horizon && *projection_horizon < first_year) {
    throw InputError("projection horizon precedes the first year");
  }
  if (mode == FitMode::full && !seed) throw InputError("full mode requires a seed");
  if (mcmc.samples < 2) throw InputError("mcmc.samples must be at least 2");
  if (mcmc.thin < 1 || mcmc.burn_in < 0 || mcmc.adapt < 0) throw InputError("invalid mcmc settings");
  if (change_window && change_window->first >= change_window->second) {
    throw InputError("change window must satisfy y0 < y1");
  }
}

namespace {

template <class T>
T get_or(const json& j, const char* key, T fallback) {
  return j.contains(key) ? j.at(key).get<T>() : fallback;
}

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path out(p);
  return out.is_relative() && !base.empty() ? base / out : out;
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text, const fs::path& base_dir) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw InputError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig c;
  try {
    const auto& p = j.at("paths");
    c.paths.microdata = resolve(base_dir, get_or<std::string>(p, "microdata", ""));
    c.paths.roster = resolve(base_dir, p.at("roster").get<std::string>());
    c.paths.edges = resolve(base_dir, p.at("edges").get<std::string>());
    if (p.contains("population") && !p.at("population").is_null()) {
      c.paths.population = resolve(base_dir, p.at("population").get<std::string>());
    }
    c.paths.output = resolve(base_dir, get_or<std::string>(p, "output", "output"));

    const auto& y = j.at("years");
    c.first_year = y.at("first").get<int>();
    c.last_year = y.at("last").get<int>();
    if (y.contains("projection_horizon") && !y.at("projection_horizon").is_null()) {
      c.projection_horizon = y.at("projection_horizon").get<int>();
    }

    for (const auto& s : get_or<std::vector<std::string>>(j, "indicators", {"mcpr"})) c.indicators.push_back(parse_indicator(s));
    for (const auto& s : get_or<std::vector<std::string>>(j, "subgroups", {"all_women"})) c.subgroups.push_back(parse_subgroup(s));
    if (j.contains("models")) {
      c.models = j.at("models").get<std::vector<std::string>>();
    } else {
      for (const auto& m : model_catalog()) c.models.push_back(m.id);
    }
    c.mode = parse_fit_mode(get_or<std::string>(j, "mode", "full"));
    if (j.contains("seed") && !j.at("seed").is_null()) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("mcmc")) {
      const auto& m = j.at("mcmc");
      c.mcmc.samples = get_or(m, "samples", c.mcmc.samples);
      c.mcmc.burn_in = get_or(m, "burn_in", c.mcmc.burn_in);
      c.mcmc.adapt = get_or(m, "adapt", c.mcmc.adapt);
      c.mcmc.thin = get_or(m, "thin", c.mcmc.thin);
    }
    const auto lonely = get_or<std::string>(j, "lonely_psu", "skip");
    if (lonely == "skip") {
      c.cell_options.variance.lonely_psu = LonelyPsu::skip;
    } else if (lonely == "adjust") {
      c.cell_options.variance.lonely_psu = LonelyPsu::adjust;
    } else {
      throw InputError("lonely_psu must be 'skip' or 'adjust'");
    }
    c.cell_options.continuity_correction = get_or(j, "continuity_correction", false);
    if (j.contains("annual_change")) {
      const auto w = j.at("annual_change").get<std::vector<int>>();
      if (w.size() != 2) throw InputError("annual_change must be [y0, y1]");
      c.change_window = std::make_pair(w[0], w[1]);
    }
    c.sparsity_threshold = get_or(j, "sparsity_threshold", c.sparsity_threshold);
    c.threads = get_or(j, "threads", c.threads);
  } catch (const json::exception& e) {
    throw InputError(std::string("invalid config: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path.parent_path());
}

// The output directory and thread count are left out: neither changes the results.
std::string canonical_config(const RunConfig& c) {
  json j;
  j["paths"] = {{"microdata", c.paths.microdata.string()},
                {"roster", c.paths.roster.string()},
                {"edges", c.paths.edges.string()},
                {"population", c.paths.population ? json(c.paths.population->string()) : json(nullptr)}};
  j["years"] = {{"first", c.first_year},
                {"last", c.last_year},
                {"projection_horizon", c.projection_horizon ? json(*c.projection_horizon) : json(nullptr)}};
  for (auto i : c.indicators) j["indicators"].push_back(std::string(to_string(i)));
  for (auto s : c.subgroups) j["subgroups"].push_back(std::string(to_string(s)));
  j["models"] = c.models;
  j["mode"] = std::string(to_string(c.mode));
  j["seed"] = c.seed ? json(*c.seed) : json(nullptr);
  j["mcmc"] = {{"samples", c.mcmc.samples}, {"burn_in", c.mcmc.burn_in}, {"adapt", c.mcmc.adapt}, {"thin", c.mcmc.thin}};
  j["lonely_psu"] = c.cell_options.variance.lonely_psu == LonelyPsu::adjust ? "adjust" : "skip";
  j["continuity_correction"] = c.cell_options.continuity_correction;
  j["annual_change"] = c.change_window ? json({c.change_window->first, c.change_window->second}) : json(nullptr);
  j["sparsity_threshold"] = c.sparsity_threshold;
  return j.dump();
}

std::string config_hash(const RunConfig& config) { return to_hex(fnv1a64(canonical_config(config))); }

// ---------------------------------------------------------------------------
// Posterior draws on the grid

Eigen::Index EtaSamples::area_index(const std::string& area) const {
  const auto it = std::find(areas.begin(), areas.end(), area);
  if (it == areas.end()) throw InputError("area '" + area + "' not in posterior draws");
  return it - areas.begin();
}

EtaSamples eta_samples_from_fit(const PosteriorFit& fit, const LatentSystem& system) {
  return {system.areas, system.years, fit.eta_samples};
}

void write_eta_samples(const fs::path& path, const EtaSamples& eta) {
  std::vector<std::string> header;
  for (const auto& a : eta.areas) {
    for (int y = eta.years.first; y <= eta.years.last; ++y) header.push_back(a + "@" + std::to_string(y));
  }
  std::vector<std::vector<std::string>> rows(static_cast<std::size_t>(eta.samples.rows()));
  for (Eigen::Index k = 0; k < eta.samples.rows(); ++k) {
    auto& row = rows[static_cast<std::size_t>(k)];
    row.reserve(static_cast<std::size_t>(eta.samples.cols()));
    for (Eigen::Index c = 0; c < eta.samples.cols(); ++c) row.push_back(format_double(eta.samples(k, c)));
  }
  write_delimited(path, header, rows);
}

EtaSamples read_eta_samples(const fs::path& path) {
  const auto t = read_delimited(path);
  EtaSamples out;
  std::vector<int> years;
  for (const auto& h : t.header) {
    const auto at = h.rfind('@');
    if (at == std::string::npos) throw InputError("malformed draw column '" + h + "' in " + path.string());
    const auto area = h.substr(0, at);
    if (out.areas.empty() || out.areas.back() != area) out.areas.push_back(area);
    years.push_back(static_cast<int>(parse_int(h.substr(at + 1), "year")));
  }
  if (out.areas.empty()) throw InputError("no draws in " + path.string());
  out.years = {*std::min_element(years.begin(), years.end()), *std::max_element(years.begin(), years.end())};
  if (static_cast<Eigen::Index>(t.header.size()) != static_cast<Eigen::Index>(out.areas.size()) * out.years.size()) {
    throw InputError("draw columns do not form a full grid in " + path.string());
  }
  out.samples.resize(static_cast<Eigen::Index>(t.rows.size()), static_cast<Eigen::Index>(t.header.size()));
  for (std::size_t k = 0; k < t.rows.size(); ++k) {
    for (std::size_t c = 0; c < t.header.size(); ++c) {
      out.samples(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(c)) = parse_double(t.rows[k][c], "draw");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Derived quantities

ChangeSummary annual_change(const EtaSamples& eta, Eigen::Index area, int y0, int y1) {
  if (y0 >= y1) throw InputError("annual change needs y0 < y1");
  if (y0 < eta.years.first || y1 > eta.years.last) throw InputError("annual change window outside the grid");
  const auto c0 = eta.column(area, y0), c1 = eta.column(area, y1);
  std::vector<double> d(static_cast<std::size_t>(eta.samples.rows()));
  for (Eigen::Index k = 0; k < eta.samples.rows(); ++k) {
    d[static_cast<std::size_t>(k)] =
        100.0 * (inv_logit(eta.samples(k, c1)) - inv_logit(eta.samples(k, c0))) / (y1 - y0);
  }
  const auto s = summarize_values(std::move(d));
  return {s.median, s.lo95, s.hi95, s.lo95 > 0.0 || s.hi95 < 0.0};
}

std::optional<double> demand_satisfied_composed(double mcpr, double cpr, double unmet) {
  const double denom = cpr + unmet;
  if (!(denom > 0.0)) return std::nullopt;
  return mcpr / denom;
}

std::vector<AggregateRow> aggregate(const EtaSamples& eta, const GeographyGraph& geography) {
  const auto K = eta.samples.rows();
  std::vector<AggregateRow> out;
  for (int y = eta.years.first; y <= eta.years.last; ++y) {
    std::vector<double> pop(eta.areas.size());
    double total = 0.0;
    for (std::size_t i = 0; i < eta.areas.size(); ++i) {
      const auto p = geography.population(eta.areas[i], y);
      if (!p) throw InputError("population missing for " + eta.areas[i] + " in " + std::to_string(y));
      pop[i] = *p;
      total += *p;
    }
    if (!(total > 0.0)) throw InputError("zero total population in " + std::to_string(y));
    std::vector<double> users(static_cast<std::size_t>(K)), rate(static_cast<std::size_t>(K));
    for (Eigen::Index k = 0; k < K; ++k) {
      double u = 0.0;
      for (std::size_t i = 0; i < eta.areas.size(); ++i) {
        u += inv_logit(eta.samples(k, eta.column(static_cast<Eigen::Index>(i), y))) * pop[i];
      }
      users[static_cast<std::size_t>(k)] = u;
      rate[static_cast<std::size_t>(k)] = u / total;
    }
    out.push_back({y, summarize_values(std::move(rate)), summarize_values(std::move(users)), total});
  }
  return out;
}

std::vector<EstimateRow> estimate_table(const EtaSamples& eta, const std::vector<DirectEstimate>& cells) {
  std::map<std::pair<std::string, int>, std::set<std::string>> informing;
  for (const auto& c : cells) {
    if (c.usable()) informing[{c.area_id, c.year}].insert(c.survey_id);
  }
  std::vector<EstimateRow> out;
  std::vector<double> col(static_cast<std::size_t>(eta.samples.rows()));
  for (std::size_t i = 0; i < eta.areas.size(); ++i) {
    for (int y = eta.years.first; y <= eta.years.last; ++y) {
      const auto c = eta.column(static_cast<Eigen::Index>(i), y);
      for (Eigen::Index k = 0; k < eta.samples.rows(); ++k) col[static_cast<std::size_t>(k)] = eta.samples(k, c);
      const auto it = informing.find({eta.areas[i], y});
      out.push_back({eta.areas[i], y, summarize(col), it == informing.end() ? 0 : static_cast<int>(it->second.size())});
    }
  }
  return out;
}

double median_cells_per_area(const std::vector<DirectEstimate>& cells, const GeographyGraph& geography) {
  std::vector<double> counts(geography.size(), 0.0);
  for (const auto& c : cells) {
    if (!c.usable()) continue;
    if (const auto i = geography.index_of(c.area_id)) counts[*i] += 1.0;
  }
  if (counts.empty()) return 0.0;
  return quantile(counts, 0.5);
}

fs::path outcome_dir(const fs::path& output, Indicator indicator, Subgroup subgroup) {
  return output / std::string(to_string(indicator)) / std::string(to_string(subgroup));
}

// ---------------------------------------------------------------------------
// Stages

namespace {

void say(std::ostream* log, const std::string& line) {
  if (log) *log << line << '\n';
}

GeographyGraph load_geo(const RunConfig& config) {
  auto g = load_geography(config.paths.roster, config.paths.edges);
  if (config.paths.population) g.set_population(load_population(*config.paths.population));
  return g;
}

template <class F>
auto staged(const std::string& stage, F&& f) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

std::string outcome_label(Indicator i, Subgroup s) {
  return std::string(to_string(i)) + "/" + std::string(to_string(s));
}

int last_survey_year(const std::vector<DirectEstimate>& cells) {
  int last = std::numeric_limits<int>::min();
  for (const auto& c : cells) {
    if (c.usable()) last = std::max(last, c.year);
  }
  return last;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  out << text;
}

std::vector<DirectEstimate> select_cells(const std::vector<DirectEstimate>& cells, Indicator i, Subgroup s) {
  std::vector<DirectEstimate> out;
  for (const auto& c : cells) {
    if (c.indicator == i && c.subgroup == s) out.push_back(c);
  }
  return out;
}

void write_fit_files(const fs::path& dir, const PosteriorFit& fit, const LatentSystem& system,
                     const ModelReport& report) {
  fs::create_directories(dir);
  {
    std::vector<std::vector<std::string>> rows;
    for (Eigen::Index k = 0; k < fit.hyper_samples.rows(); ++k) {
      std::vector<std::string> row;
      for (Eigen::Index j = 0; j < fit.hyper_samples.cols(); ++j) row.push_back(format_double(fit.hyper_samples(k, j)));
      rows.push_back(std::move(row));
    }
    write_delimited(dir / "hyper_samples.csv", fit.hyper_names, rows);
  }
  {
    const auto names = system.coordinate_names();
    std::vector<std::vector<std::string>> rows;
    std::vector<double> col(static_cast<std::size_t>(fit.n_samples()));
    for (Eigen::Index j = 0; j < system.dim; ++j) {
      for (Eigen::Index k = 0; k < fit.n_samples(); ++k) col[static_cast<std::size_t>(k)] = fit.latent_samples(k, j);
      const double mean = fit.latent_samples.col(j).mean();
      const double sd = std::sqrt((fit.latent_samples.col(j).array() - mean).square().sum() /
                                  std::max<double>(1.0, static_cast<double>(fit.n_samples() - 1)));
      const auto s = summarize_values(col);
      rows.push_back({names[static_cast<std::size_t>(j)], format_double(mean), format_double(sd), format_double(s.lo95),
                      format_double(s.median), format_double(s.hi95)});
    }
    write_delimited(dir / "latent_summary.csv", {"coordinate", "mean", "sd", "lo95", "median", "hi95"}, rows);
  }
  {
    std::vector<std::vector<std::string>> rows;
    for (Eigen::Index j = 0; j < system.n_data(); ++j) {
      const auto& c = system.cells[static_cast<std::size_t>(j)];
      rows.push_back({c.area_id, std::to_string(c.year), c.survey_id, c.survey_family, format_double(fit.y[j]),
                      format_double(fit.var_y[j]), format_double(fit.cell_eta.col(j).mean()),
                      format_double(log_mean_exp(fit.cell_loglik.col(j))), format_double(report.lcpo.log_cpo[j])});
    }
    write_delimited(dir / "pointwise.csv",
                    {"area_id", "year", "survey_id", "survey_family", "y", "var_y", "eta_mean", "lppd", "log_cpo"}, rows);
  }
  json d;
  d["model"] = fit.model_id;
  d["mode"] = std::string(to_string(fit.diagnostics.mode));
  d["latent_dim"] = system.dim;
  d["n_data"] = system.n_data();
  d["samples"] = fit.n_samples();
  d["acceptance_rate"] = fit.diagnostics.acceptance_rate;
  d["effective_sample_size"] = fit.diagnostics.effective_sample_size;
  d["optimizer_iterations"] = fit.diagnostics.optimizer_iterations;
  d["optimizer_converged"] = fit.diagnostics.optimizer_converged;
  d["jittered_factorizations"] = fit.diagnostics.jittered_factorizations;
  d["warnings"] = fit.diagnostics.warnings;
  d["dic"] = report.dic.dic;
  d["p_d"] = report.dic.p_d;
  d["waic"] = report.waic.waic;
  d["p_waic"] = report.waic.p_waic;
  d["lcpo"] = report.lcpo.lcpo;
  d["lcpo_excluded"] = report.lcpo.excluded;
  write_text(dir / "diagnostics.json", d.dump(2) + "\n");
}

struct ModelJob {
  std::string model;
  ModelReport report;
  EtaSamples eta;
  std::vector<std::string> warnings;
  std::exception_ptr error;
};

void run_jobs(std::vector<ModelJob>& jobs, unsigned threads, const std::function<void(ModelJob&)>& work) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min<unsigned>(threads, static_cast<unsigned>(jobs.size()));
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      try {
        work(jobs[i]);
      } catch (...) {
        jobs[i].error = std::current_exception();
      }
    }
  };
  if (threads <= 1) {
    worker();
    return;
  }
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
}

TimeGrid grid_for(const RunConfig& config, const std::vector<DirectEstimate>& cells, int& horizon) {
  const int last_survey = last_survey_year(cells);
  horizon = config.projection_horizon.value_or(last_survey + 1);
  if (horizon < last_survey) {
    throw InputError("projection horizon " + std::to_string(horizon) + " precedes the last survey year " +
                     std::to_string(last_survey));
  }
  return {config.first_year, std::max(config.last_year, horizon)};
}

std::optional<std::string> read_winner(const fs::path& selection) {
  const auto t = read_delimited(selection);
  const auto m = t.require_column("model"), s = t.require_column("selected");
  for (const auto& row : t.rows) {
    if (row[s] == "1") return row[m];
  }
  return std::nullopt;
}

}  // namespace

std::vector<DirectEstimate> run_direct(const RunConfig& config, RunSummary& summary) {
  return staged("direct", [&] {
    const auto geo = load_geo(config);
    const auto data = load_microdata(config.paths.microdata, {});
    if (!data.rejections.empty()) {
      summary.warnings.push_back(std::to_string(data.rejections.size()) + " microdata rows rejected; first: line " +
                                 std::to_string(data.rejections.front().line) + ": " + data.rejections.front().reason);
    }
    auto report = build_cells(data, geo, config.subgroups, config.indicators, config.cell_options);
    if (report.records_without_subgroup) {
      summary.warnings.push_back(std::to_string(report.records_without_subgroup) +
                                 " records fall in no subgroup (missing parity)");
    }
    fs::create_directories(config.paths.output);
    write_cells(config.paths.output / "direct_estimates.csv", report.cells);
    for (auto i : config.indicators) {
      for (auto s : config.subgroups) {
        const auto dir = outcome_dir(config.paths.output, i, s);
        fs::create_directories(dir);
        write_cells(dir / "direct_estimates.csv", select_cells(report.cells, i, s));
      }
    }
    say(summary.log, "direct: " + std::to_string(report.cells.size()) + " cells");
    return report.cells;
  });
}

void run_fit(const RunConfig& config, const std::vector<DirectEstimate>& all_cells, RunSummary& summary) {
  const auto geo = staged("fit", [&] { return load_geo(config); });
  std::vector<DirectEstimate> in_window;
  std::size_t outside = 0;
  for (const auto& c : all_cells) {
    if (c.year < config.first_year || c.year > config.last_year) {
      ++outside;
    } else {
      in_window.push_back(c);
    }
  }
  if (outside) summary.warnings.push_back(std::to_string(outside) + " cells outside the year window ignored");
  const auto years = staged("fit", [&] { return grid_for(config, in_window, summary.projection_horizon); });
  gsl_set_error_handler_off();

  for (auto indicator : config.indicators) {
    for (auto subgroup : config.subgroups) {
      const auto label = outcome_label(indicator, subgroup);
      const auto stage = "fit " + label;
      const auto dir = outcome_dir(config.paths.output, indicator, subgroup);
      OutcomeSummary out;
      out.indicator = indicator;
      out.subgroup = subgroup;
      std::vector<DirectEstimate> usable;
      for (auto& c : select_cells(in_window, indicator, subgroup)) {
        if (c.usable()) usable.push_back(std::move(c));
      }
      out.usable_cells = usable.size();
      staged(stage, [&] {
        if (usable.empty()) throw InputError("no usable cells");
        return 0;
      });
      const double dens = median_cells_per_area(usable, geo);
      if (dens < config.sparsity_threshold) {
        out.warnings.push_back("sparse data: median " + format_double(dens) + " cells per area (threshold " +
                               format_double(config.sparsity_threshold) + ")");
        if (summary.log) *summary.log << "warning: " << label << ": " << out.warnings.back() << '\n';
      }

      std::vector<ModelJob> jobs;
      for (const auto& m : config.models) jobs.push_back({m, {}, {}, {}, nullptr});
      std::mutex log_mutex;
      run_jobs(jobs, config.threads, [&](ModelJob& job) {
        const auto system = assemble_system(usable, model_spec(job.model), geo, years);
        FitSettings settings;
        settings.mode = config.mode;
        settings.mcmc = config.mcmc;
        settings.seed = derive_seed(config.effective_seed(), fnv1a64(label + "/" + job.model));
        const auto fit = fit_model(system, settings);
        job.report = evaluate_model(fit);
        job.eta = eta_samples_from_fit(fit, system);
        for (const auto& w : fit.diagnostics.warnings) job.warnings.push_back(job.model + ": " + w);
        write_fit_files(dir / "fits" / job.model, fit, system, job.report);
        std::lock_guard<std::mutex> lock(log_mutex);
        say(summary.log,
            "fit " + label + " " + job.model + ": waic " + format_double(job.report.waic.waic) + ", dic " +
                format_double(job.report.dic.dic));
      });
      for (auto& job : jobs) {
        if (job.error) {
          try {
            std::rethrow_exception(job.error);
          } catch (const std::exception& e) {
            throw StageError(stage + " model " + job.model, e.what());
          }
        }
        for (auto& w : job.warnings) out.warnings.push_back(std::move(w));
      }

      staged(stage, [&] {
        std::vector<ModelReport> reports;
        for (const auto& job : jobs) reports.push_back(job.report);
        out.selection = select_model(reports);
        out.winner = out.selection.winner;
        write_selection_table(dir / "selection.csv", reports, out.winner);
        write_variance_shares(dir / "variance_shares.csv", reports);
        for (const auto& job : jobs) {
          if (job.model == out.winner) write_eta_samples(dir / "eta_samples.csv", job.eta);
        }
        return 0;
      });
      say(summary.log, "selected " + label + ": " + out.winner);
      summary.outcomes.push_back(std::move(out));
    }
  }
}

void run_report(const RunConfig& config, RunSummary& summary) {
  const auto geo = staged("report", [&] { return load_geo(config); });
  // (subgroup, indicator) -> winning draws, for the demand-satisfied cross-check.
  std::map<std::pair<Subgroup, Indicator>, EtaSamples> winners;

  for (auto indicator : config.indicators) {
    for (auto subgroup : config.subgroups) {
      const auto label = outcome_label(indicator, subgroup);
      const auto dir = outcome_dir(config.paths.output, indicator, subgroup);
      staged("report " + label, [&] {
        const auto winner = read_winner(dir / "selection.csv");
        if (!winner) throw InputError("selection table has no selected model");
        auto eta = read_eta_samples(dir / "eta_samples.csv");
        const auto cells = read_cells(dir / "direct_estimates.csv");

        std::vector<std::vector<std::string>> rows;
        for (const auto& r : estimate_table(eta, cells)) {
          rows.push_back({std::string(to_string(indicator)), std::string(to_string(subgroup)), r.area,
                          std::to_string(r.year), format_double(r.summary.median), format_double(r.summary.lo95),
                          format_double(r.summary.hi95), std::to_string(r.n_surveys_informing)});
        }
        write_delimited(dir / "estimates.csv",
                        {"indicator", "subgroup", "area_id", "year", "median", "lo95", "hi95", "n_surveys_informing"},
                        rows);

        const int last = last_survey_year(cells);
        int y1 = config.change_window ? config.change_window->second : last;
        int y0 = config.change_window ? config.change_window->first : last - 5;
        y0 = std::max(y0, eta.years.first);
        y1 = std::min(y1, eta.years.last);
        rows.clear();
        if (y0 < y1) {
          for (std::size_t i = 0; i < eta.areas.size(); ++i) {
            const auto c = annual_change(eta, static_cast<Eigen::Index>(i), y0, y1);
            rows.push_back({eta.areas[i], std::to_string(y0), std::to_string(y1), format_double(c.median),
                            format_double(c.lo95), format_double(c.hi95), c.significant ? "1" : "0"});
          }
        }
        write_delimited(dir / "annual_change.csv",
                        {"area_id", "year_from", "year_to", "median_pp_per_year", "lo95", "hi95", "significant"}, rows);

        if (geo.has_population()) {
          rows.clear();
          for (const auto& a : aggregate(eta, geo)) {
            rows.push_back({std::to_string(a.year), format_double(a.population), format_double(a.rate.median),
                            format_double(a.rate.lo95), format_double(a.rate.hi95), format_double(a.users.median),
                            format_double(a.users.lo95), format_double(a.users.hi95)});
          }
          write_delimited(dir / "aggregate.csv",
                          {"year", "population", "rate_median", "rate_lo95", "rate_hi95", "users_median",
                           "users_lo95", "users_hi95"},
                          rows);
          fs::remove(dir / "aggregate_skipped.txt");
        } else {
          write_text(dir / "aggregate_skipped.txt", "no population file configured; aggregation skipped\n");
        }

        auto it = std::find_if(summary.outcomes.begin(), summary.outcomes.end(), [&](const OutcomeSummary& o) {
          return o.indicator == indicator && o.subgroup == subgroup;
        });
        if (it == summary.outcomes.end()) {
          OutcomeSummary o;
          o.indicator = indicator;
          o.subgroup = subgroup;
          for (const auto& c : cells) o.usable_cells += c.usable();
          o.winner = *winner;
          summary.outcomes.push_back(std::move(o));
        }
        winners.emplace(std::make_pair(subgroup, indicator), std::move(eta));
        return 0;
      });
      say(summary.log, "report " + label);
    }
  }
  if (!geo.has_population()) summary.warnings.push_back("no population file; aggregation outputs skipped");

  // Composed demand satisfied against the directly modeled indicator.
  for (auto subgroup : config.subgroups) {
    auto find = [&](Indicator i) -> const EtaSamples* {
      const auto it = winners.find({subgroup, i});
      return it == winners.end() ? nullptr : &it->second;
    };
    const auto* m = find(Indicator::mcpr);
    const auto* u = find(Indicator::unmet_need);
    const auto* ds = find(Indicator::demand_satisfied);
    const auto* cpr = find(Indicator::cpr);
    const auto* t = find(Indicator::tcpr);
    if (!m || !u || !ds || (!cpr && !t)) continue;
    staged("report demand_satisfied check", [&] {
      const auto K = std::min({m->samples.rows(), u->samples.rows(), ds->samples.rows(),
                               (cpr ? cpr : t)->samples.rows()});
      std::vector<std::vector<std::string>> rows;
      std::size_t agree = 0, total = 0;
      std::vector<double> composed(static_cast<std::size_t>(K)), modeled(static_cast<std::size_t>(K));
      for (std::size_t i = 0; i < m->areas.size(); ++i) {
        for (int y = m->years.first; y <= m->years.last; ++y) {
          const auto col = m->column(static_cast<Eigen::Index>(i), y);
          for (Eigen::Index k = 0; k < K; ++k) {
            const double pm = inv_logit(m->samples(k, col));
            const double pc = cpr ? inv_logit(cpr->samples(k, col)) : pm + inv_logit(t->samples(k, col));
            composed[static_cast<std::size_t>(k)] =
                demand_satisfied_composed(pm, pc, inv_logit(u->samples(k, col))).value_or(std::nan(""));
            modeled[static_cast<std::size_t>(k)] = inv_logit(ds->samples(k, col));
          }
          const auto a = summarize_values(composed), b = summarize_values(modeled);
          const bool ok = (a.median >= b.lo95 && a.median <= b.hi95) || (b.median >= a.lo95 && b.median <= a.hi95);
          agree += ok;
          ++total;
          rows.push_back({m->areas[i], std::to_string(y), format_double(a.median), format_double(a.lo95),
                          format_double(a.hi95), format_double(b.median), format_double(b.lo95),
                          format_double(b.hi95), ok ? "1" : "0"});
        }
      }
      const auto dir = config.paths.output / "demand_satisfied_check";
      fs::create_directories(dir);
      write_delimited(dir / (std::string(to_string(subgroup)) + ".csv"),
                      {"area_id", "year", "composed_median", "composed_lo95", "composed_hi95", "modeled_median",
                       "modeled_lo95", "modeled_hi95", "agree"},
                      rows);
      say(summary.log,
          "demand satisfied check " + std::string(to_string(subgroup)) + ": " + std::to_string(agree) + "/" +
              std::to_string(total) + " cells agree");
      return 0;
    });
  }
}

namespace {

void write_manifest(const RunConfig& config, const RunSummary& summary, Stages stages) {
  json j;
  j["version"] = std::string(version_string());
  j["seed"] = config.effective_seed();
  j["config_hash"] = summary.config_hash;
  j["mode"] = std::string(to_string(config.mode));
  j["stages"] = stages == Stages::direct ? "direct" : stages == Stages::fit ? "fit" : stages == Stages::report ? "report" : "run";
  j["years"] = {config.first_year, config.last_year};
  if (summary.projection_horizon) j["projection_horizon"] = summary.projection_horizon;
  j["models"] = config.models;
  j["outcomes"] = json::array();
  for (const auto& o : summary.outcomes) {
    json e;
    e["indicator"] = std::string(to_string(o.indicator));
    e["subgroup"] = std::string(to_string(o.subgroup));
    e["usable_cells"] = o.usable_cells;
    e["winner"] = o.winner;
    if (!o.selection.winner.empty()) {
      e["by_dic"] = o.selection.by_dic;
      e["by_waic"] = o.selection.by_waic;
      e["by_lcpo"] = o.selection.by_lcpo;
      e["unanimous"] = o.selection.unanimous;
    }
    e["warnings"] = o.warnings;
    j["outcomes"].push_back(std::move(e));
  }
  j["warnings"] = summary.warnings;
  write_text(config.paths.output / "manifest.json", j.dump(2) + "\n");
}

}  // namespace

RunSummary run_pipeline(const RunConfig& config, Stages stages, std::ostream* log) {
  RunSummary summary;
  summary.log = log;
  summary.config_hash = config_hash(config);
  fs::create_directories(config.paths.output);
  const auto marker = config.paths.output / "FAILED";
  fs::remove(marker);
  try {
    std::vector<DirectEstimate> cells;
    if (stages == Stages::direct || stages == Stages::all) cells = run_direct(config, summary);
    if (stages == Stages::fit || stages == Stages::all) {
      if (stages == Stages::fit) {
        cells = staged("fit", [&] { return read_cells(config.paths.output / "direct_estimates.csv"); });
      }
      run_fit(config, cells, summary);
    }
    if (stages == Stages::report || stages == Stages::all) run_report(config, summary);
    write_manifest(config, summary, stages);
  } catch (const StageError& e) {
    write_text(marker, std::string(e.what()) + "\n");
    throw;
  } catch (const std::exception& e) {
    write_text(marker, std::string(e.what()) + "\n");
    throw StageError("manifest", e.what());
  }
  return summary;
}

}  // namespace sae
