#include "mnar/sim_harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>

#include "mnar/logistic.hpp"
#include "mnar/parallel.hpp"

namespace mnar::sim {

namespace {

Eigen::Index idx(std::size_t v) { return static_cast<Eigen::Index>(v); }

bool bernoulli(Rng& rng, double prob) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < prob; }

}  // namespace

Simulated generate_scenario_a(std::size_t n, Rng& rng, const ScenarioAOptions& opts) {
  std::normal_distribution<double> z(0.0, 1.0);
  Eigen::VectorXi a(idx(n));
  Eigen::VectorXd y(idx(n));
  Eigen::MatrixXd x(idx(n), 2);
  MaskMatrix r = MaskMatrix::Ones(idx(n), 2);
  for (std::size_t k = 0; k < n; ++k) {
    const auto i = idx(k);
    const double x1 = 1.0 + z(rng);
    const double x2 = bernoulli(rng, 0.5) ? 1.0 : 0.0;
    const double pi = opts.randomized ? 0.5 : glm::expit(1.25 - 0.5 * x1 - 0.5 * x2);
    const int ai = bernoulli(rng, pi) ? 1 : 0;
    const double y0 = 0.5 + 2.0 * x1 + x2 + z(rng);
    const double e1 = z(rng);
    const double y1 = opts.null_effect ? y0 : 3.0 * x1 + 2.0 * x2 + e1;
    // Response of x1 depends on (A, X) only, never on Y.
    const bool observed = bernoulli(rng, glm::expit(-2.0 + 2.0 * x1 + ai * (1.5 + x2)));
    x(i, 0) = x1;
    x(i, 1) = x2;
    a(i) = ai;
    y(i) = ai ? y1 : y0;
    r(i, 0) = observed ? 1 : 0;
  }
  Simulated s;
  s.full_x = x;
  s.data = Dataset(std::move(a), std::move(y), std::move(x), std::move(r));
  s.tau = opts.null_effect ? 0.0 : 1.0;
  return s;
}

Simulated generate_scenario_b(std::size_t n, Rng& rng) {
  static const double beta_treated[7] = {-1.5, 1, -1, 1, -1, 1, 1};
  static const double beta_control[7] = {0, -1, 1, -1, 1, -1, -1};
  static const double alpha[7] = {1.0, 0.5, 0.5, 0.5, 0.5, -1.0, -1.0};
  static const double eta[8] = {-1.0, 0.25, 0.25, 0.25, 0.25, 0.25, -0.25, -0.25};
  std::normal_distribution<double> z(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Eigen::VectorXi a(idx(n));
  Eigen::VectorXd y(idx(n));
  Eigen::MatrixXd x(idx(n), 6);
  MaskMatrix r = MaskMatrix::Ones(idx(n), 6);
  double v[7];
  for (std::size_t k = 0; k < n; ++k) {
    const auto i = idx(k);
    v[0] = 1.0;
    v[1] = z(rng);
    v[2] = z(rng);
    v[3] = bernoulli(rng, 0.5) ? 1.0 : -1.0;
    v[4] = bernoulli(rng, 0.5) ? 1.0 : -1.0;
    v[5] = v[1] + v[2] + v[3] + v[4] + z(rng);
    v[6] = bernoulli(rng, glm::expit(-v[5])) ? 1.0 : 0.0;
    double lin_a = 0.0, m1 = 0.0, m0 = 0.0;
    for (int j = 0; j < 7; ++j) {
      lin_a += v[j] * alpha[j];
      m1 += v[j] * beta_treated[j];
      m0 += v[j] * beta_control[j];
    }
    const int ai = bernoulli(rng, glm::expit(-lin_a)) ? 1 : 0;
    const double e0 = z(rng), e1 = z(rng);
    y(i) = ai ? m1 + e1 : m0 + e0;
    double lin_r = eta[0] + eta[1] * ai;
    for (int j = 1; j < 7; ++j) lin_r += eta[j + 1] * v[j];
    // P(11) = 1 / (1 + 3 e^z); each other pattern has e^z / (1 + 3 e^z).
    const double p11 = 1.0 / (1.0 + 3.0 * std::exp(lin_r));
    const double pk = (1.0 - p11) / 3.0;
    const double u = unif(rng);
    int pattern = 0;
    if (u >= p11) pattern = u < p11 + pk ? 1 : (u < p11 + 2.0 * pk ? 2 : 3);
    for (int j = 0; j < 6; ++j) x(i, j) = v[j + 1];
    r(i, 4) = (pattern == 0 || pattern == 1) ? 1 : 0;
    r(i, 5) = (pattern == 0 || pattern == 2) ? 1 : 0;
    a(i) = ai;
  }
  Simulated s;
  s.full_x = x;
  s.data = Dataset(std::move(a), std::move(y), std::move(x), std::move(r));
  s.tau = -0.5;
  return s;
}

Scenario parse_scenario(const std::string& s) {
  if (s == "A" || s == "a") return Scenario::A;
  if (s == "B" || s == "b") return Scenario::B;
  throw std::invalid_argument("unknown scenario '" + s + "' (expected A or B)");
}

std::string scenario_name(Scenario s) { return s == Scenario::A ? "A" : "B"; }

void ScenarioConfig::validate() const {
  if (n < 50) throw std::invalid_argument("sample size must be at least 50");
  if (n_reps < 1) throw std::invalid_argument("at least one replicate is required");
  if (methods.empty()) throw std::invalid_argument("no methods requested");
  if (!(level > 0.0 && level < 1.0)) throw std::invalid_argument("confidence level must lie in (0, 1)");
  for (const auto& m : methods) {
    if (m != "unadj" && m != "gpsw" && m != "nonpara" && m != "para")
      throw std::invalid_argument("unknown method '" + m + "' (expected unadj, gpsw, nonpara or para)");
    if (m == "nonpara" && scenario == Scenario::B)
      throw std::invalid_argument("method nonpara supports at most " + std::to_string(nonpara.max_p) +
                                  " covariates; scenario B has 6 (use para)");
  }
}

namespace {

Simulated generate(const ScenarioConfig& cfg, std::size_t n, Rng& rng) {
  return cfg.scenario == Scenario::A ? generate_scenario_a(n, rng, cfg.scenario_a) : generate_scenario_b(n, rng);
}

void attach_bootstrap(EstimateResult& r, const BootstrapResult& b) {
  r.se = b.se;
  r.ci = std::make_pair(b.lo, b.hi);
  r.diagnostics["boot_failures"] = b.failures;
  r.diagnostics["boot_replicates"] = b.replicates.size();
}

}  // namespace

EstimateResult run_method(const std::string& method, const Dataset& d, const ScenarioConfig& cfg,
                          std::uint64_t boot_seed) {
  const std::size_t B = cfg.n_boot;
  if (method == "unadj" || method == "gpsw") {
    auto est = [&](const Dataset& s) {
      return method == "unadj" ? unadjusted(s).estimate : gpsw(s, cfg.gpsw).estimate;
    };
    EstimateResult r = method == "unadj" ? unadjusted(d) : gpsw(d, cfg.gpsw);
    if (B > 0) attach_bootstrap(r, bootstrap_ci(est, d, B, cfg.level, boot_seed));
    return r;
  }
  if (method == "nonpara") {
    const NonparaFit fit = nonpara_fit(d, cfg.nonpara);
    EstimateResult r = fit.result;
    if (B > 0) {
      const NonparaTuning tuning = fit.tuning;
      auto est = [&](const Dataset& s) { return nonpara_tau(s, cfg.nonpara, &tuning).estimate; };
      attach_bootstrap(r, bootstrap_ci(est, d, B, cfg.level, boot_seed));
    }
    return r;
  }
  if (method == "para") {
    const fi::ParamModelSpec spec = fi::ParamModelSpec::infer(d);
    fi::FiOptions fo = cfg.fi;
    fo.seed = derive_seed(boot_seed, 0xF1);
    const fi::FiResult fit = fi::fit_mle_fractional(d, spec, fo);
    EstimateResult r = fi::param_tau(fit.theta, d, fit.state);
    if (B > 0) {
      auto est = [&](const std::vector<std::size_t>& rows, std::size_t b) {
        Eigen::VectorXd u = Eigen::VectorXd::Zero(idx(d.n()));
        for (auto i : rows) u(idx(i)) += 1.0;
        fi::FiOptions bo = fo;
        bo.seed = derive_seed(fo.seed, b + 1);
        const fi::FiResult rf = fi::refit_weighted(d, spec, fit.state, u, bo);
        return fi::param_tau(rf.theta, d, rf.state, &u).estimate;
      };
      attach_bootstrap(r, bootstrap_ci(est, d.n(), B, cfg.level, boot_seed));
    }
    return r;
  }
  throw std::invalid_argument("unknown method '" + method + "'");
}

MethodSummary summarize(const std::string& method, const std::vector<EstimateResult>& results, std::size_t failures,
                        double tau) {
  MethodSummary s;
  s.method = method;
  s.failures = failures;
  s.reps = results.size();
  if (results.empty()) return s;
  double mean = 0.0, ve = 0.0;
  std::size_t with_ci = 0, covered = 0;
  for (const auto& r : results) {
    s.estimates.push_back(r.estimate);
    mean += r.estimate;
    if (r.se) {
      s.boot_variances.push_back(*r.se * *r.se);
      ve += *r.se * *r.se;
    }
    if (r.ci) {
      ++with_ci;
      const bool in = r.ci->first <= tau && tau <= r.ci->second;
      s.covered.push_back(in ? 1 : 0);
      covered += in ? 1 : 0;
    }
  }
  mean /= static_cast<double>(results.size());
  double ss = 0.0;
  for (const auto& r : results) ss += (r.estimate - mean) * (r.estimate - mean);
  s.bias = mean - tau;
  s.variance = results.size() > 1 ? ss / static_cast<double>(results.size() - 1) : 0.0;
  s.ve = s.boot_variances.empty() ? 0.0 : ve / static_cast<double>(s.boot_variances.size());
  s.coverage = with_ci ? static_cast<double>(covered) / static_cast<double>(with_ci) : 0.0;
  s.mse = s.bias * s.bias + s.variance;
  return s;
}

MonteCarloReport run_monte_carlo(const ScenarioConfig& cfg) {
  cfg.validate();
  const std::size_t R = cfg.n_reps, K = cfg.methods.size();
  std::vector<std::vector<std::optional<EstimateResult>>> res(R, std::vector<std::optional<EstimateResult>>(K));
  double tau = 0.0;
  std::mutex tau_mutex;
  parallel_for(R, cfg.jobs, [&](std::size_t rep) {
    Rng rng = stream_rng(cfg.seed, rep);
    const Simulated sim = generate(cfg, cfg.n, rng);
    if (rep == 0) {
      std::lock_guard<std::mutex> lock(tau_mutex);
      tau = sim.tau;
    }
    for (std::size_t k = 0; k < K; ++k) {
      try {
        res[rep][k] = run_method(cfg.methods[k], sim.data, cfg, derive_seed(derive_seed(cfg.seed, rep), k + 1));
      } catch (const std::exception&) {
        res[rep][k].reset();
      }
    }
  });
  MonteCarloReport rep;
  rep.config = cfg;
  rep.tau = tau;
  for (std::size_t k = 0; k < K; ++k) {
    std::vector<EstimateResult> ok;
    std::size_t failures = 0;
    for (std::size_t r = 0; r < R; ++r) {
      if (res[r][k])
        ok.push_back(*res[r][k]);
      else
        ++failures;
    }
    rep.methods.push_back(summarize(cfg.methods[k], ok, failures, tau));
  }
  return rep;
}

std::vector<SensitivityCell> sensitivity_grid(const ScenarioConfig& cfg,
                                              const std::vector<std::pair<std::size_t, double>>& grid,
                                              const std::vector<std::size_t>& sizes) {
  if (cfg.scenario != Scenario::A) throw std::invalid_argument("the sensitivity grid runs on scenario A");
  if (grid.empty() || sizes.empty()) throw std::invalid_argument("empty sensitivity grid");
  std::size_t jmax = 0;
  for (const auto& [J, B] : grid) jmax = std::max(jmax, J);
  std::vector<SensitivityCell> cells;
  for (std::size_t n : sizes) {
    std::vector<std::vector<std::optional<double>>> est(cfg.n_reps, std::vector<std::optional<double>>(grid.size()));
    double tau = 0.0;
    std::mutex tau_mutex;
    parallel_for(cfg.n_reps, cfg.jobs, [&](std::size_t rep) {
      Rng rng = stream_rng(cfg.seed, rep);
      const Simulated sim = generate(cfg, n, rng);
      if (rep == 0) {
        std::lock_guard<std::mutex> lock(tau_mutex);
        tau = sim.tau;
      }
      NonparaOptions o = cfg.nonpara;
      o.J = jmax;
      std::optional<NonparaStage1> s1;
      try {
        s1 = nonpara_stage1(sim.data, o);
      } catch (const std::exception&) {
        return;
      }
      for (std::size_t c = 0; c < grid.size(); ++c) {
        o.J = grid[c].first;
        o.B = grid[c].second;
        try {
          est[rep][c] = nonpara_stage2(sim.data, *s1, o).result.estimate;
        } catch (const std::exception&) {
        }
      }
    });
    for (std::size_t c = 0; c < grid.size(); ++c) {
      std::vector<EstimateResult> ok;
      std::size_t failures = 0;
      for (std::size_t r = 0; r < cfg.n_reps; ++r) {
        if (est[r][c]) {
          EstimateResult e;
          e.estimate = *est[r][c];
          ok.push_back(e);
        } else {
          ++failures;
        }
      }
      const MethodSummary s = summarize("nonpara", ok, failures, tau);
      cells.push_back({grid[c].first, grid[c].second, n, s.bias, s.variance, s.mse, s.reps, s.failures});
    }
  }
  return cells;
}

nlohmann::json config_json(const ScenarioConfig& c) {
  nlohmann::json j;
  j["scenario"] = scenario_name(c.scenario);
  j["n"] = c.n;
  j["seed"] = c.seed;
  j["methods"] = c.methods;
  j["reps"] = c.n_reps;
  j["boot"] = c.n_boot;
  j["jobs"] = c.jobs;
  j["level"] = c.level;
  j["J"] = c.nonpara.J;
  j["B"] = c.nonpara.B;
  j["nonpara.self_normalized"] = c.nonpara.self_normalized;
  j["nonpara.clip_floor"] = c.nonpara.clip_floor;
  j["nonpara.outcome_backend"] = c.nonpara.outcome.backend == smooth::RegressionBackend::Spline ? "spline" : "nw";
  j["gpsw.form"] = c.gpsw.form == WeightingForm::Hajek ? "hajek" : "horvitz_thompson";
  j["gpsw.clip"] = {c.gpsw.clip_lo, c.gpsw.clip_hi};
  j["fi.M"] = c.fi.M;
  j["fi.tol"] = c.fi.tol;
  j["fi.max_iter"] = c.fi.max_iter;
  j["null_effect"] = c.scenario_a.null_effect;
  j["randomized"] = c.scenario_a.randomized;
  return j;
}

nlohmann::json to_json(const MonteCarloReport& r) {
  nlohmann::json j;
  j["config"] = config_json(r.config);
  j["tau"] = r.tau;
  j["methods"] = nlohmann::json::array();
  for (const auto& m : r.methods) {
    j["methods"].push_back({{"method", m.method},
                            {"bias", m.bias},
                            {"variance", m.variance},
                            {"ve", m.ve},
                            {"coverage", m.coverage},
                            {"mse", m.mse},
                            {"reps", m.reps},
                            {"failures", m.failures}});
  }
  return j;
}

std::string to_table(const MonteCarloReport& r) {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "scenario %s  n=%zu  reps=%zu  boot=%zu  tau=%g\n",
                scenario_name(r.config.scenario).c_str(), r.config.n, r.config.n_reps, r.config.n_boot, r.tau);
  os << line;
  std::snprintf(line, sizeof line, "%-10s %10s %10s %10s %8s %6s\n", "Method", "Bias e-2", "Var e-3", "VE e-3",
                "Cvg %", "Fail");
  os << line;
  for (const auto& m : r.methods) {
    std::snprintf(line, sizeof line, "%-10s %10.1f %10.1f %10.1f %8.1f %6zu\n", m.method.c_str(), m.bias * 100.0,
                  m.variance * 1000.0, m.ve * 1000.0, m.coverage * 100.0, m.failures);
    os << line;
  }
  return os.str();
}

std::string to_csv(const MonteCarloReport& r) {
  std::ostringstream os;
  os.precision(17);
  os << "scenario,n,method,reps,failures,bias,variance,ve,coverage,mse\n";
  for (const auto& m : r.methods)
    os << scenario_name(r.config.scenario) << ',' << r.config.n << ',' << m.method << ',' << m.reps << ','
       << m.failures << ',' << m.bias << ',' << m.variance << ',' << m.ve << ',' << m.coverage << ',' << m.mse
       << '\n';
  return os.str();
}

nlohmann::json to_json(const std::vector<SensitivityCell>& cells) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& c : cells)
    j.push_back({{"J", c.J},
                 {"B", c.B},
                 {"n", c.n},
                 {"bias", c.bias},
                 {"variance", c.variance},
                 {"mse", c.mse},
                 {"reps", c.reps},
                 {"failures", c.failures}});
  return j;
}

namespace {

discrete::Support random_support(Rng& rng) {
  // (p, levels): one binary, one ternary, or two binary covariates.
  const int shape = std::uniform_int_distribution<int>(0, 2)(rng);
  discrete::Support s;
  if (shape == 0) s.x_levels = {{0.0, 1.0}};
  if (shape == 1) s.x_levels = {{0.0, 1.0, 2.0}};
  if (shape == 2) s.x_levels = {{0.0, 1.0}, {0.0, 1.0}};
  const int kmin = std::max<int>(3, static_cast<int>(s.q()));
  const int K = std::uniform_int_distribution<int>(kmin, 5)(rng);
  std::normal_distribution<double> z(0.0, 1.0);
  for (int k = 0; k < K; ++k) s.y_levels.push_back(static_cast<double>(k) + 0.25 * z(rng));
  std::sort(s.y_levels.begin(), s.y_levels.end());
  return s;
}

discrete::Mechanism random_mechanism(const discrete::Support& s, Rng& rng) {
  discrete::Mechanism m;
  const std::size_t p = s.p();
  m.patterns.push_back(Pattern::full(p));
  if (p == 1) {
    m.patterns.push_back(Pattern::empty(p));
  } else {
    m.patterns.push_back(Pattern(std::vector<std::uint8_t>{1, 0}));
    m.patterns.push_back(Pattern(std::vector<std::uint8_t>{0, 1}));
    m.patterns.push_back(Pattern::empty(p));
  }
  std::normal_distribution<double> z(0.0, 1.0);
  const std::size_t T = m.patterns.size();
  std::vector<std::vector<double>> coef(T, std::vector<double>(p + 2, 0.0));
  for (std::size_t t = 1; t < T; ++t) {
    coef[t][0] = -0.5 + 0.5 * z(rng);
    for (std::size_t c = 1; c < p + 2; ++c) coef[t][c] = 0.8 * z(rng);
  }
  m.prob.assign(T, {Eigen::VectorXd::Zero(idx(s.q())), Eigen::VectorXd::Zero(idx(s.q()))});
  for (int a = 0; a < 2; ++a) {
    for (std::size_t cell = 0; cell < s.q(); ++cell) {
      const auto digits = s.cell_digits(cell);
      std::vector<double> e(T, 1.0);
      double total = 1.0;
      for (std::size_t t = 1; t < T; ++t) {
        double lin = coef[t][0] + coef[t][1] * a;
        for (std::size_t j = 0; j < p; ++j) lin += coef[t][j + 2] * s.x_levels[j][digits[j]];
        e[t] = std::exp(lin);
        total += e[t];
      }
      for (std::size_t t = 0; t < T; ++t) m.prob[t][static_cast<std::size_t>(a)](idx(cell)) = e[t] / total;
    }
  }
  return m;
}

}  // namespace

DiscreteGenerator random_identifiable_joint(Rng& rng) {
  std::gamma_distribution<double> g(1.0, 1.0);
  for (;;) {
    DiscreteGenerator gen;
    gen.full.support = random_support(rng);
    const auto& s = gen.full.support;
    double total = 0.0;
    for (int a = 0; a < 2; ++a) {
      auto& f = gen.full.fxy[static_cast<std::size_t>(a)];
      f.resize(idx(s.q()), idx(s.K()));
      for (Eigen::Index c = 0; c < f.rows(); ++c)
        for (Eigen::Index k = 0; k < f.cols(); ++k) f(c, k) = 0.05 + g(rng);
      total += f.sum();
    }
    gen.full.fxy[0] /= total;
    gen.full.fxy[1] /= total;
    gen.mechanism = random_mechanism(s, rng);
    const auto rep = discrete::check_identifiability(discrete::observe(gen.full, gen.mechanism));
    if (rep.identifiable && rep.arms[0].condition_number < 1e4 && rep.arms[1].condition_number < 1e4) return gen;
  }
}

DiscreteGenerator random_independent_joint(Rng& rng) {
  std::gamma_distribution<double> g(1.0, 1.0);
  DiscreteGenerator gen;
  gen.full.support = random_support(rng);
  const auto& s = gen.full.support;
  const double pa1 = std::uniform_real_distribution<double>(0.2, 0.8)(rng);
  for (int a = 0; a < 2; ++a) {
    Eigen::VectorXd gx(idx(s.q())), hy(idx(s.K()));
    for (Eigen::Index c = 0; c < gx.size(); ++c) gx(c) = 0.05 + g(rng);
    for (Eigen::Index k = 0; k < hy.size(); ++k) hy(k) = 0.05 + g(rng);
    gx /= gx.sum();
    hy /= hy.sum();
    gen.full.fxy[static_cast<std::size_t>(a)] = (a == 1 ? pa1 : 1.0 - pa1) * gx * hy.transpose();
  }
  gen.mechanism = random_mechanism(s, rng);
  return gen;
}

}  // namespace mnar::sim
