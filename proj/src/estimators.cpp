#include "mnar/estimators.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <random>

#include "mnar/logistic.hpp"
#include "mnar/parallel.hpp"
#include "mnar/rng.hpp"

namespace mnar {

nlohmann::json to_json(const EstimateResult& r) {
  nlohmann::json j;
  j["method"] = r.method;
  j["estimate"] = r.estimate;
  j["se"] = r.se ? nlohmann::json(*r.se) : nlohmann::json(nullptr);
  j["ci"] = r.ci ? nlohmann::json::array({r.ci->first, r.ci->second}) : nlohmann::json(nullptr);
  j["diagnostics"] = r.diagnostics;
  return j;
}

EstimateResult unadjusted(const Dataset& d) {
  double s[2] = {0.0, 0.0};
  std::size_t c[2] = {0, 0};
  for (std::size_t i = 0; i < d.n(); ++i) {
    const int a = d.a()(static_cast<Eigen::Index>(i));
    s[a] += d.y()(static_cast<Eigen::Index>(i));
    ++c[a];
  }
  if (c[0] == 0 || c[1] == 0) throw EstimationError("unadjusted: one treatment arm is empty");
  EstimateResult r;
  r.method = "unadj";
  r.estimate = s[1] / static_cast<double>(c[1]) - s[0] / static_cast<double>(c[0]);
  r.diagnostics["n_treated"] = c[1];
  r.diagnostics["n_control"] = c[0];
  return r;
}

namespace {

std::vector<std::size_t> complete_in_arm(const Dataset& d, int a) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < d.n(); ++i)
    if (d.a()(static_cast<Eigen::Index>(i)) == a && d.complete_case(i)) out.push_back(i);
  return out;
}

Eigen::MatrixXd rows_of(const Eigen::MatrixXd& x, const std::vector<std::size_t>& rows) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = x.row(static_cast<Eigen::Index>(rows[k]));
  return out;
}

}  // namespace

CateModel cate_complete_case(const Dataset& d, const smooth::RegressionSpec& spec,
                             const std::array<std::optional<double>, 2>& frozen) {
  std::array<std::shared_ptr<const smooth::Regressor>, 2> m;
  for (int a = 0; a < 2; ++a) {
    const auto rows = complete_in_arm(d, a);
    if (rows.empty()) throw EstimationError("no complete cases in arm " + std::to_string(a));
    Eigen::VectorXd y(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t k = 0; k < rows.size(); ++k) y(static_cast<Eigen::Index>(k)) = d.y()(static_cast<Eigen::Index>(rows[k]));
    smooth::RegressionSpec s = spec;
    if (frozen[static_cast<std::size_t>(a)]) s.frozen = frozen[static_cast<std::size_t>(a)];
    m[static_cast<std::size_t>(a)] = smooth::fit_regressor(rows_of(d.x_values(), rows), y, s);
  }
  return CateModel(m[0], m[1]);
}

EstimateResult gpsw(const Dataset& d, const GpswOptions& opts) {
  const PatternIndex idx = index_patterns(d);
  double num[2] = {0.0, 0.0}, den[2] = {0.0, 0.0};
  std::size_t kept = 0, clipped = 0;
  nlohmann::json dropped = nlohmann::json::array();
  for (const auto& [pat, units] : idx.groups) {
    std::size_t treated = 0;
    for (auto i : units) treated += static_cast<std::size_t>(d.a()(static_cast<Eigen::Index>(i)));
    if (treated == 0 || treated == units.size()) {
      dropped.push_back({{"pattern", pat.to_string()}, {"reason", "single treatment arm"}});
      continue;
    }
    const auto m = static_cast<Eigen::Index>(units.size());
    Eigen::MatrixXd X(m, static_cast<Eigen::Index>(pat.obs_idx.size()) + 1);
    Eigen::VectorXd a(m);
    for (Eigen::Index k = 0; k < m; ++k) {
      const auto i = static_cast<Eigen::Index>(units[static_cast<std::size_t>(k)]);
      X(k, 0) = 1.0;
      for (std::size_t c = 0; c < pat.obs_idx.size(); ++c)
        X(k, static_cast<Eigen::Index>(c) + 1) = d.x_values()(i, static_cast<Eigen::Index>(pat.obs_idx[c]));
      a(k) = d.a()(i);
    }
    const auto fit = glm::logistic_fit(X, a, Eigen::VectorXd::Ones(m));
    if (!fit.converged || !fit.coef.allFinite()) {
      dropped.push_back({{"pattern", pat.to_string()}, {"reason", "logistic fit did not converge"}});
      continue;
    }
    const Eigen::VectorXd eta = X * fit.coef;
    for (Eigen::Index k = 0; k < m; ++k) {
      double e = glm::expit(eta(k));
      if (e < opts.clip_lo || e > opts.clip_hi) {
        ++clipped;
        e = std::clamp(e, opts.clip_lo, opts.clip_hi);
      }
      const double y = d.y()(static_cast<Eigen::Index>(units[static_cast<std::size_t>(k)]));
      if (a(k) == 1.0) {
        num[1] += y / e;
        den[1] += 1.0 / e;
      } else {
        num[0] += y / (1.0 - e);
        den[0] += 1.0 / (1.0 - e);
      }
    }
    kept += units.size();
  }
  if (kept == 0) throw EstimationError("gpsw: no pattern group contains both treatment arms");
  EstimateResult r;
  r.method = "gpsw";
  if (opts.form == WeightingForm::Hajek)
    r.estimate = num[1] / den[1] - num[0] / den[0];
  else
    r.estimate = (num[1] - num[0]) / static_cast<double>(kept);
  r.diagnostics["units_used"] = kept;
  r.diagnostics["propensity_clipped"] = clipped;
  r.diagnostics["dropped_groups"] = dropped;
  r.diagnostics["form"] = opts.form == WeightingForm::Hajek ? "hajek" : "horvitz_thompson";
  return r;
}

double plugin_standardization(const Dataset& d, const CateModel& cate) {
  const Eigen::VectorXd t = cate.many(d.x_values());
  double total = 0.0;
  for (int a = 0; a < 2; ++a) {
    double s = 0.0;
    for (std::size_t i = 0; i < d.n(); ++i)
      if (d.a()(static_cast<Eigen::Index>(i)) == a) s += t(static_cast<Eigen::Index>(i));
    total += s / static_cast<double>(d.n());
  }
  return total;
}

NonparaStage1 nonpara_stage1(const Dataset& d, const NonparaOptions& opts, const NonparaTuning* frozen) {
  if (d.p() > opts.max_p)
    throw EstimationError("the nonparametric estimator supports at most " + std::to_string(opts.max_p) +
                          " covariates; use the parametric estimator instead");
  NonparaStage1 s;
  s.cate = cate_complete_case(d, opts.outcome, frozen ? frozen->outcome : std::array<std::optional<double>, 2>{});
  for (int a = 0; a < 2; ++a) s.tuning.outcome[static_cast<std::size_t>(a)] = s.cate.arm(a).tuning();
  series::XiFitOptions xo;
  xo.J = opts.J;
  xo.B = opts.B;
  xo.cv = opts.cv;
  xo.clip_floor = opts.clip_floor;
  s.moments = series::xi_moments(d, xo, frozen ? &frozen->xi : nullptr);
  for (const auto& sm : s.moments.slots) s.tuning.xi[{sm.pattern, sm.arm}] = sm.tuning;
  return s;
}

NonparaFit nonpara_stage2(const Dataset& d, const NonparaStage1& s1, const NonparaOptions& opts) {
  series::XiFitOptions xo;
  xo.J = opts.J;
  xo.B = opts.B;
  xo.cv = opts.cv;
  xo.clip_floor = opts.clip_floor;
  NonparaFit fit;
  fit.xi = series::solve_xi_model(s1.moments, xo);
  fit.cate = s1.cate;
  fit.tuning = s1.tuning;

  series::ClipCounter clips;
  const Eigen::VectorXd t = s1.cate.many(d.x_values());
  const double n = static_cast<double>(d.n());
  double total = 0.0;
  for (int a = 0; a < 2; ++a) {
    double s = 0.0, inv = 0.0;
    std::size_t n_arm = 0, n_cc = 0;
    for (std::size_t i = 0; i < d.n(); ++i) {
      if (d.a()(static_cast<Eigen::Index>(i)) != a) continue;
      ++n_arm;
      if (!d.complete_case(i)) continue;
      ++n_cc;
      const double pr = series::response_prob(fit.xi, d.x_values().row(static_cast<Eigen::Index>(i)).transpose(), a, &clips);
      s += t(static_cast<Eigen::Index>(i)) / pr;
      inv += 1.0 / pr;
    }
    if (n_cc == 0) throw EstimationError("no complete cases in arm " + std::to_string(a));
    if (opts.self_normalized)
      total += static_cast<double>(n_arm) / n * (s / inv);
    else
      total += s / n;
  }

  EstimateResult& r = fit.result;
  r.method = "nonpara";
  r.estimate = total;
  r.diagnostics["J"] = opts.J;
  r.diagnostics["B"] = opts.B;
  r.diagnostics["self_normalized"] = opts.self_normalized;
  r.diagnostics["prob_evaluations"] = clips.evaluations;
  r.diagnostics["xi_clipped"] = clips.xi_clipped;
  r.diagnostics["prob_clipped"] = clips.prob_clipped;
  r.diagnostics["outcome_tuning"] = {*s1.tuning.outcome[0], *s1.tuning.outcome[1]};
  r.diagnostics["xi"] = series::to_json(fit.xi);
  return fit;
}

NonparaFit nonpara_fit(const Dataset& d, const NonparaOptions& opts, const NonparaTuning* frozen) {
  return nonpara_stage2(d, nonpara_stage1(d, opts, frozen), opts);
}

EstimateResult nonpara_tau(const Dataset& d, const NonparaOptions& opts, const NonparaTuning* frozen) {
  return nonpara_fit(d, opts, frozen).result;
}

double quantile_sorted(const std::vector<double>& v, double prob) {
  if (v.empty()) throw EstimationError("quantile of an empty sample");
  const double pos = std::clamp(prob, 0.0, 1.0) * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

BootstrapResult bootstrap_ci(const RowEstimator& est, std::size_t n, std::size_t n_boot, double level,
                             std::uint64_t seed, std::size_t jobs) {
  if (n == 0) throw EstimationError("bootstrap of an empty sample");
  if (n_boot < 2) throw EstimationError("bootstrap needs at least two replicates");
  if (!(level > 0.0 && level < 1.0)) throw EstimationError("confidence level must lie in (0, 1)");
  std::vector<double> reps(n_boot, 0.0);
  std::vector<char> ok(n_boot, 0);
  parallel_for(n_boot, jobs, [&](std::size_t b) {
    Rng rng = stream_rng(seed, b);
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    std::vector<std::size_t> rows(n);
    for (auto& r : rows) r = pick(rng);
    try {
      const double v = est(rows, b);
      if (std::isfinite(v)) {
        reps[b] = v;
        ok[b] = 1;
      }
    } catch (const std::exception&) {
    }
  });
  BootstrapResult out;
  for (std::size_t b = 0; b < n_boot; ++b) {
    if (ok[b])
      out.replicates.push_back(reps[b]);
    else
      ++out.failures;
  }
  if (static_cast<double>(out.failures) > 0.05 * static_cast<double>(n_boot))
    throw EstimationError("bootstrap: " + std::to_string(out.failures) + " of " + std::to_string(n_boot) +
                          " replicates failed");
  const auto m = out.replicates.size();
  double mean = 0.0;
  for (double v : out.replicates) mean += v;
  mean /= static_cast<double>(m);
  double ss = 0.0;
  for (double v : out.replicates) ss += (v - mean) * (v - mean);
  out.se = m > 1 ? std::sqrt(ss / static_cast<double>(m - 1)) : 0.0;
  std::vector<double> sorted = out.replicates;
  std::sort(sorted.begin(), sorted.end());
  out.lo = quantile_sorted(sorted, (1.0 - level) / 2.0);
  out.hi = quantile_sorted(sorted, 1.0 - (1.0 - level) / 2.0);
  return out;
}

BootstrapResult bootstrap_ci(const std::function<double(const Dataset&)>& est, const Dataset& d, std::size_t n_boot,
                             double level, std::uint64_t seed, std::size_t jobs) {
  return bootstrap_ci([&](const std::vector<std::size_t>& rows, std::size_t) { return est(d.subset(rows)); }, d.n(),
                      n_boot, level, seed, jobs);
}

}  // namespace mnar
