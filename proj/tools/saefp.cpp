// saefp: survey direct estimates, spatio-temporal smoothing and reporting.

#include <Eigen/Core>
#include <gsl/gsl_version.h>

#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "sae/common.hpp"
#include "sae/pipeline.hpp"
#include "sae/synthetic.hpp"
#include "sae/table.hpp"

using namespace sae;
namespace fs = std::filesystem;

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string mode;
  std::vector<std::string> models;
  std::string output;
  std::optional<unsigned> threads;
  bool quiet = false;
};

void add_run_options(CLI::App* cmd, Overrides& o) {
  cmd->add_option("-c,--config", o.config, "JSON run configuration")->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "master seed");
  cmd->add_option("--mode", o.mode, "full or empirical_bayes");
  cmd->add_option("--models", o.models, "model subset, e.g. 1a,2b")->delimiter(',');
  cmd->add_option("-o,--output", o.output, "output directory");
  cmd->add_option("--threads", o.threads, "worker threads (0: all cores)");
  cmd->add_flag("-q,--quiet", o.quiet, "no progress lines");
}

RunConfig resolve_config(const Overrides& o) {
  auto c = load_run_config(o.config);
  if (o.seed) c.seed = o.seed;
  if (!o.mode.empty()) c.mode = parse_fit_mode(o.mode);
  if (!o.models.empty()) c.models = o.models;
  if (!o.output.empty()) c.paths.output = o.output;
  if (o.threads) c.threads = *o.threads;
  c.validate();
  return c;
}

int run_stages(const Overrides& o, Stages stages) {
  const auto config = resolve_config(o);
  const auto summary = run_pipeline(config, stages, o.quiet ? nullptr : &std::cerr);
  for (const auto& w : summary.warnings) std::cerr << "warning: " << w << '\n';
  for (const auto& out : summary.outcomes) {
    if (!out.winner.empty()) {
      std::cout << to_string(out.indicator) << '/' << to_string(out.subgroup) << ": " << out.winner << '\n';
    }
  }
  std::cout << "output: " << config.paths.output.string() << '\n';
  return 0;
}

struct SimulateOptions {
  std::string output;
  std::string scale = "nigeria";
  std::uint64_t seed = 1;
};

int simulate(const SimulateOptions& o) {
  const bool nigeria = o.scale == "nigeria";
  GeographyGraph geo;
  TimeGrid years;
  TruthConfig truth_config;
  SurveyPlan plan;
  if (nigeria) {
    geo = default_geography();
    years = {1990, 2018};
    truth_config.families = {"DHS", "MICS", "NNHS", "PMA2020"};
    plan.surveys = default_survey_program();
  } else if (o.scale == "small") {
    geo = GeographyGraph({"A", "B", "C", "D", "E", "F"},
                         {{"A", "B"}, {"B", "C"}, {"C", "D"}, {"D", "E"}, {"E", "F"}, {"A", "D"}});
    years = {2000, 2010};
    truth_config.families = {"DHS", "MICS"};
    for (auto [id, fam, yr] : {std::tuple{"DHS2002", "DHS", 2002}, {"MICS2006", "MICS", 2006}, {"DHS2009", "DHS", 2009}}) {
      SurveyDesign d;
      d.survey_id = id;
      d.family = fam;
      d.year = yr;
      d.women_per_cluster = 30;
      plan.surveys.push_back(d);
    }
  } else {
    throw InputError("unknown scale '" + o.scale + "' (nigeria, small)");
  }
  const auto truth = draw_truth(geo, years, truth_config, derive_seed(o.seed, 0));
  const auto data = simulate_survey(truth, plan, derive_seed(o.seed, 1));
  const auto population = synthetic_population(geo, years, derive_seed(o.seed, 2));
  const fs::path dir(o.output);
  write_scenario(dir, geo, data, &population);

  std::vector<std::vector<std::string>> rows;
  for (std::size_t i = 0; i < geo.size(); ++i) {
    for (int y = years.first; y <= years.last; ++y) {
      rows.push_back({geo.areas()[i], std::to_string(y), format_double(truth.eta(static_cast<Eigen::Index>(i), y - years.first))});
    }
  }
  write_delimited(dir / "truth.csv", {"area_id", "year", "eta"}, rows);

  nlohmann::json cfg;
  cfg["paths"] = {{"microdata", "microdata.csv"}, {"roster", "roster.csv"}, {"edges", "edges.csv"},
                  {"population", "population.csv"}, {"output", "output"}};
  cfg["years"] = {{"first", years.first}, {"last", years.last}};
  cfg["indicators"] = {"mcpr"};
  cfg["subgroups"] = {"all_women"};
  cfg["mode"] = "empirical_bayes";
  cfg["seed"] = o.seed;
  std::ofstream(dir / "config.json") << cfg.dump(2) << '\n';
  std::cout << data.records.size() << " records from " << plan.surveys.size() << " surveys over " << geo.size()
            << " areas written to " << dir.string() << '\n';
  return 0;
}

struct CalibrateOptions {
  int replicates = 50;
  std::string model = "2b";
  std::uint64_t seed = 1;
  bool microdata = false;
  std::string mode = "empirical_bayes";
  int samples = 400;
};

int calibrate(const CalibrateOptions& o) {
  CalibrationConfig cc;
  cc.geography = default_geography();
  cc.years = {2000, 2012};
  for (int y : {2001, 2004, 2007, 2010}) {
    SurveyDesign d;
    d.survey_id = "DHS" + std::to_string(y);
    d.family = "DHS";
    d.year = y;
    cc.surveys.push_back(d);
  }
  cc.model_id = o.model;
  const auto spec = model_spec(o.model);
  cc.truth.variant = spec.variant;
  if (spec.has(Effect::interaction)) cc.truth.tau_interaction = 200.0;
  cc.fit.mode = parse_fit_mode(o.mode);
  cc.fit.mcmc.samples = o.samples;
  cc.from_microdata = o.microdata;
  const auto r = calibration_run(o.replicates, cc, o.seed);
  std::cout << "replicates " << r.replicates << "\ncells " << r.cells << "\ncoverage " << format_double(r.coverage)
            << "\nmean_bias " << format_double(r.mean_bias) << "\nmean_width " << format_double(r.mean_width) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Small-area estimation of family planning indicators"};
  app.require_subcommand(0, 1);
  app.set_version_flag("--version", [] {
    return "saefp " + std::string(version_string()) + " (Eigen " + std::to_string(EIGEN_WORLD_VERSION) + "." +
           std::to_string(EIGEN_MAJOR_VERSION) + "." + std::to_string(EIGEN_MINOR_VERSION) + ", GSL " +
           GSL_VERSION + ", " + __VERSION__ + ")";
  });

  Overrides o;
  auto* direct = app.add_subcommand("direct", "microdata to the direct-estimate cell table");
  auto* fit = app.add_subcommand("fit", "cell table to model fits and selection");
  auto* report = app.add_subcommand("report", "winning fits to estimate, change and aggregate tables");
  auto* run = app.add_subcommand("run", "direct, fit and report");
  for (auto* cmd : {direct, fit, report, run}) add_run_options(cmd, o);

  SimulateOptions so;
  auto* sim = app.add_subcommand("simulate", "write a synthetic scenario (inputs, truth and config)");
  sim->add_option("-o,--output", so.output, "scenario directory")->required();
  sim->add_option("--scale", so.scale, "nigeria or small")->check(CLI::IsMember({"nigeria", "small"}));
  sim->add_option("--seed", so.seed, "master seed");

  CalibrateOptions co;
  auto* cal = app.add_subcommand("calibrate", "interval coverage on replicates drawn from a catalog model");
  cal->add_option("-n,--replicates", co.replicates, "replicates")->check(CLI::PositiveNumber);
  cal->add_option("--model", co.model, "generating and fitted model");
  cal->add_option("--seed", co.seed, "master seed");
  cal->add_option("--mode", co.mode, "full or empirical_bayes");
  cal->add_option("--samples", co.samples, "posterior draws per fit")->check(CLI::PositiveNumber);
  cal->add_flag("--microdata", co.microdata, "simulate microdata instead of cells");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*direct) return run_stages(o, Stages::direct);
    if (*fit) return run_stages(o, Stages::fit);
    if (*report) return run_stages(o, Stages::report);
    if (*run) return run_stages(o, Stages::all);
    if (*sim) return simulate(so);
    if (*cal) return calibrate(co);
    std::cout << app.help();
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
