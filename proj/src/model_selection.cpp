#include "sae/model_selection.hpp"

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <limits>

#include "sae/common.hpp"
#include "sae/table.hpp"

namespace sae {

double gaussian_log_density(double y, double eta, double var) {
  const double r = y - eta;
  return -0.5 * (kLog2Pi + std::log(var) + r * r / var);
}

Eigen::VectorXd pointwise_loglik(const PosteriorFit& fit, Eigen::Index cell) {
  Eigen::VectorXd out(fit.cell_eta.rows());
  for (Eigen::Index k = 0; k < out.size(); ++k) {
    out[k] = gaussian_log_density(fit.y[cell], fit.cell_eta(k, cell), fit.var_y[cell]);
  }
  return out;
}

double log_mean_exp(const Eigen::Ref<const Eigen::VectorXd>& l) {
  const double m = l.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((l.array() - m).exp().sum() / static_cast<double>(l.size()));
}

WaicResult compute_waic(const Eigen::MatrixXd& loglik) {
  const auto K = loglik.rows();
  if (K < 2) throw InputError("WAIC needs at least 2 posterior samples");
  WaicResult r;
  for (Eigen::Index j = 0; j < loglik.cols(); ++j) {
    const auto col = loglik.col(j);
    r.lppd += log_mean_exp(col);
    const double mean = col.mean();
    r.p_waic += (col.array() - mean).square().sum() / static_cast<double>(K - 1);
  }
  r.waic = -2.0 * (r.lppd - r.p_waic);
  return r;
}

WaicResult compute_waic(const PosteriorFit& fit) { return compute_waic(fit.cell_loglik); }

DicResult compute_dic(const Eigen::MatrixXd& cell_eta, const Eigen::VectorXd& y,
                      const Eigen::VectorXd& var_y) {
  const auto K = cell_eta.rows();
  if (K < 2) throw InputError("DIC needs at least 2 posterior samples");
  DicResult r;
  for (Eigen::Index j = 0; j < cell_eta.cols(); ++j) {
    double dev = 0.0;
    for (Eigen::Index k = 0; k < K; ++k) dev += -2.0 * gaussian_log_density(y[j], cell_eta(k, j), var_y[j]);
    r.mean_deviance += dev / static_cast<double>(K);
    r.deviance_at_mean += -2.0 * gaussian_log_density(y[j], cell_eta.col(j).mean(), var_y[j]);
  }
  r.p_d = r.mean_deviance - r.deviance_at_mean;
  r.dic = r.deviance_at_mean + 2.0 * r.p_d;
  return r;
}

DicResult compute_dic(const PosteriorFit& fit) { return compute_dic(fit.cell_eta, fit.y, fit.var_y); }

LcpoResult compute_lcpo(const Eigen::MatrixXd& loglik) {
  const auto K = loglik.rows();
  if (K < 2) throw InputError("LCPO needs at least 2 posterior samples");
  const double floor = std::log(DBL_MIN);
  LcpoResult r;
  r.log_cpo.resize(loglik.cols());
  for (Eigen::Index j = 0; j < loglik.cols(); ++j) {
    const auto col = loglik.col(j);
    const bool underflow = !col.allFinite() || col.minCoeff() < floor;
    if (underflow) {
      r.log_cpo[j] = std::numeric_limits<double>::quiet_NaN();
      ++r.excluded;
      continue;
    }
    // CPO = 1 / mean_k exp(-l_k)
    const Eigen::VectorXd neg = -col;
    r.log_cpo[j] = -log_mean_exp(neg);
    r.lcpo += r.log_cpo[j];
  }
  return r;
}

LcpoResult compute_lcpo(const PosteriorFit& fit) { return compute_lcpo(fit.cell_loglik); }

namespace {

// Effect label of a precision hyperparameter; empty for mixing parameters.
std::string effect_of(const std::string& hyper_name) {
  if (hyper_name.rfind("tau_space", 0) == 0) return "space";
  if (hyper_name.rfind("tau_", 0) == 0) return hyper_name.substr(4);
  return {};
}

}  // namespace

std::vector<VarianceShare> variance_decomposition(const PosteriorFit& fit) {
  std::vector<VarianceShare> out;
  std::vector<std::vector<Eigen::Index>> columns;
  for (std::size_t h = 0; h < fit.hyper_names.size(); ++h) {
    const auto effect = effect_of(fit.hyper_names[h]);
    if (effect.empty()) continue;
    auto it = std::find_if(out.begin(), out.end(), [&](const VarianceShare& v) { return v.effect == effect; });
    if (it == out.end()) {
      out.push_back({effect, 0.0, 0.0});
      columns.emplace_back();
      it = out.end() - 1;
    }
    columns[static_cast<std::size_t>(it - out.begin())].push_back(static_cast<Eigen::Index>(h));
  }
  double total = 0.0;
  for (std::size_t e = 0; e < out.size(); ++e) {
    std::vector<double> v(static_cast<std::size_t>(fit.hyper_samples.rows()), 0.0);
    for (Eigen::Index k = 0; k < fit.hyper_samples.rows(); ++k) {
      for (auto c : columns[e]) v[static_cast<std::size_t>(k)] += 1.0 / fit.hyper_samples(k, c);
    }
    out[e].median_variance = quantile(std::move(v), 0.5);
    total += out[e].median_variance;
  }
  for (auto& s : out) s.share = total > 0.0 ? 100.0 * s.median_variance / total : 0.0;
  return out;
}

ModelReport evaluate_model(const PosteriorFit& fit) {
  ModelReport r;
  r.model_id = fit.model_id;
  r.dic = compute_dic(fit);
  r.waic = compute_waic(fit);
  r.lcpo = compute_lcpo(fit);
  r.shares = variance_decomposition(fit);
  return r;
}

Selection select_model(const std::vector<ModelReport>& reports) {
  if (reports.empty()) throw InputError("model selection needs at least one model");
  const auto best = [&](auto score) {
    const ModelReport* b = &reports.front();
    for (const auto& r : reports) {
      const double s = score(r), sb = score(*b);
      if (s < sb || (s == sb && model_id_less(r.model_id, b->model_id))) b = &r;
    }
    return b->model_id;
  };
  Selection s;
  s.by_waic = best([](const ModelReport& r) { return r.waic.waic; });
  s.by_dic = best([](const ModelReport& r) { return r.dic.dic; });
  s.by_lcpo = best([](const ModelReport& r) { return -r.lcpo.lcpo; });
  s.unanimous = s.by_dic == s.by_waic && s.by_lcpo == s.by_waic;
  // Unanimous or not, WAIC decides.
  s.winner = s.by_waic;
  return s;
}

void write_selection_table(const std::filesystem::path& path, const std::vector<ModelReport>& reports,
                           const std::string& winner) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& r : reports) {
    rows.push_back({r.model_id, format_double(r.dic.dic), format_double(r.dic.p_d),
                    format_double(r.lcpo.lcpo), std::to_string(r.lcpo.excluded),
                    format_double(r.waic.waic), format_double(r.waic.p_waic),
                    r.model_id == winner ? "1" : "0"});
  }
  write_delimited(path, {"model", "dic", "p_d", "lcpo", "lcpo_excluded", "waic", "p_waic", "selected"}, rows);
}

void write_variance_shares(const std::filesystem::path& path, const std::vector<ModelReport>& reports) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& r : reports) {
    for (const auto& s : r.shares) {
      rows.push_back({r.model_id, s.effect, format_double(s.median_variance), format_double(s.share)});
    }
  }
  write_delimited(path, {"model", "effect", "median_variance", "share"}, rows);
}

}  // namespace sae
