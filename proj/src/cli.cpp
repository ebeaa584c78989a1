#include "mnar/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>

#include "mnar/data_model.hpp"
#include "mnar/discrete_ident.hpp"
#include "mnar/estimators.hpp"
#include "mnar/parallel.hpp"
#include "mnar/rng.hpp"
#include "mnar/sim_harness.hpp"

namespace mnar::cli {

namespace {

using nlohmann::json;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <typename T>
T get(const Resolved& c, const std::string& key) {
  try {
    return c.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  }
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::vector<std::string> get_list(const Resolved& c, const std::string& key) {
  const auto& v = c.at(key);
  if (v.is_string()) return split_list(v.get<std::string>());
  return get<std::vector<std::string>>(c, key);
}

void merge_file(Resolved& c, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  json file;
  try {
    file = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path + ": " + e.what());
  }
  if (!file.is_object()) throw ConfigError("config file " + path + " must hold a JSON object");
  for (auto it = file.begin(); it != file.end(); ++it) {
    if (!c.contains(it.key())) throw ConfigError("config file " + path + ": unknown key '" + it.key() + "'");
    c[it.key()] = it.value();
  }
}

sim::ScenarioConfig scenario_config(const Resolved& c) {
  sim::ScenarioConfig s;
  if (c["scenario"].is_string()) s.scenario = sim::parse_scenario(get<std::string>(c, "scenario"));
  s.n = get<std::size_t>(c, "n");
  s.seed = c["seed"].is_null() ? 1 : get<std::uint64_t>(c, "seed");
  s.methods = get_list(c, "methods");
  s.n_reps = get<std::size_t>(c, "reps");
  s.n_boot = get<std::size_t>(c, "boot");
  s.jobs = get<std::size_t>(c, "jobs");
  s.level = get<double>(c, "level");
  s.nonpara.J = get<std::size_t>(c, "J");
  s.nonpara.B = get<double>(c, "B");
  s.nonpara.self_normalized = get<bool>(c, "nonpara.self_normalized");
  s.nonpara.clip_floor = get<double>(c, "nonpara.clip_floor");
  const auto backend = get<std::string>(c, "nonpara.outcome_backend");
  if (backend == "spline")
    s.nonpara.outcome.backend = smooth::RegressionBackend::Spline;
  else if (backend == "nw")
    s.nonpara.outcome.backend = smooth::RegressionBackend::NadarayaWatson;
  else
    throw ConfigError("nonpara.outcome_backend must be spline or nw");
  const auto form = get<std::string>(c, "gpsw.form");
  if (form == "hajek")
    s.gpsw.form = WeightingForm::Hajek;
  else if (form == "horvitz_thompson")
    s.gpsw.form = WeightingForm::HorvitzThompson;
  else
    throw ConfigError("gpsw.form must be hajek or horvitz_thompson");
  s.gpsw.clip_lo = get<double>(c, "gpsw.clip_lo");
  s.gpsw.clip_hi = get<double>(c, "gpsw.clip_hi");
  s.fi.M = get<std::size_t>(c, "fi.M");
  s.fi.tol = get<double>(c, "fi.tol");
  s.fi.max_iter = get<int>(c, "fi.max_iter");
  s.scenario_a.null_effect = get<bool>(c, "scenario.null_effect");
  s.scenario_a.randomized = get<bool>(c, "scenario.randomized");
  if (s.nonpara.J < 1) throw ConfigError("J must be positive");
  if (!(s.nonpara.B > 0.0)) throw ConfigError("B must be positive");
  if (s.fi.M < 1) throw ConfigError("fi.M must be positive");
  if (s.jobs < 1) throw ConfigError("jobs must be positive");
  return s;
}

CsvSchema csv_schema(const Resolved& c) {
  CsvSchema s;
  s.a = get<std::string>(c, "csv.a");
  s.y = get<std::string>(c, "csv.y");
  s.x = get_list(c, "csv.x");
  s.weight = get<std::string>(c, "csv.weight");
  return s;
}

void emit(const Resolved& c, const std::string& body, std::ostream& out) {
  const auto path = get<std::string>(c, "out");
  if (path.empty()) {
    out << body;
    return;
  }
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << body;
  if (!f) throw std::runtime_error("write to " + path + " failed");
}

std::string format_of(const Resolved& c) {
  const auto f = get<std::string>(c, "format");
  if (f != "json" && f != "table" && f != "csv") throw ConfigError("format must be json, table or csv");
  return f;
}

int cmd_simulate(const Resolved& c, std::ostream& out) {
  if (c["seed"].is_null()) throw ConfigError("simulate needs a seed (--seed, config key seed, or MNAR_SEED)");
  if (!c["data"].is_null() && !get<std::string>(c, "data").empty())
    throw ConfigError("simulate takes a scenario, not a dataset");
  const auto fmt = format_of(c);
  const sim::ScenarioConfig cfg = scenario_config(c);
  cfg.validate();
  const auto report = sim::run_monte_carlo(cfg);
  json j = sim::to_json(report);
  j["config"] = c;
  const std::string table = sim::to_table(report);
  if (fmt == "json")
    emit(c, j.dump(2) + "\n", out);
  else if (fmt == "table")
    emit(c, table, out);
  else
    emit(c, sim::to_csv(report), out);
  if (!get<std::string>(c, "out").empty()) out << table;
  return Ok;
}

int cmd_estimate(const Resolved& c, std::ostream& out) {
  const auto path = get<std::string>(c, "data");
  if (path.empty()) throw ConfigError("estimate needs --data");
  const auto fmt = format_of(c);
  CsvSchema schema = csv_schema(c);
  schema.weight.clear();
  const Dataset d = load_csv(path, schema);
  sim::ScenarioConfig cfg = scenario_config(c);
  for (const auto& m : cfg.methods) {
    if (m != "unadj" && m != "gpsw" && m != "nonpara" && m != "para")
      throw ConfigError("unknown method '" + m + "' (expected unadj, gpsw, nonpara or para)");
    if (m == "nonpara" && d.p() > cfg.nonpara.max_p)
      throw ConfigError("method nonpara supports at most " + std::to_string(cfg.nonpara.max_p) + " covariates; " +
                        path + " has " + std::to_string(d.p()) + " (use para)");
  }
  if (cfg.methods.empty()) throw ConfigError("no methods requested");
  std::vector<EstimateResult> results;
  for (std::size_t k = 0; k < cfg.methods.size(); ++k)
    results.push_back(sim::run_method(cfg.methods[k], d, cfg, derive_seed(cfg.seed, k + 1)));

  json j;
  j["config"] = c;
  j["n"] = d.n();
  j["p"] = d.p();
  std::size_t cc = 0;
  for (std::size_t i = 0; i < d.n(); ++i) cc += d.complete_case(i) ? 1 : 0;
  j["complete_cases"] = cc;
  j["results"] = json::array();
  for (const auto& r : results) j["results"].push_back(to_json(r));
  if (fmt == "json") {
    emit(c, j.dump(2) + "\n", out);
    return Ok;
  }
  std::ostringstream os;
  if (fmt == "table") {
    char line[160];
    std::snprintf(line, sizeof line, "%-10s %12s %12s %12s %12s\n", "Method", "Estimate", "SE", "CI lo", "CI hi");
    os << line;
    for (const auto& r : results) {
      std::snprintf(line, sizeof line, "%-10s %12.5f %12.5f %12.5f %12.5f\n", r.method.c_str(), r.estimate,
                    r.se.value_or(std::nan("")), r.ci ? r.ci->first : std::nan(""),
                    r.ci ? r.ci->second : std::nan(""));
      os << line;
    }
  } else {
    os.precision(17);
    os << "method,estimate,se,ci_lo,ci_hi\n";
    for (const auto& r : results) {
      os << r.method << ',' << r.estimate << ',';
      if (r.se) os << *r.se;
      os << ',';
      if (r.ci) os << r.ci->first;
      os << ',';
      if (r.ci) os << r.ci->second;
      os << '\n';
    }
  }
  emit(c, os.str(), out);
  return Ok;
}

json mechanism_json(const discrete::Mechanism& m) {
  json j = json::array();
  for (std::size_t t = 0; t < m.patterns.size(); ++t) {
    json e;
    e["pattern"] = m.patterns[t].to_string();
    for (int a = 0; a < 2; ++a) {
      const auto& v = m.prob[t][static_cast<std::size_t>(a)];
      e["prob_a" + std::to_string(a)] = std::vector<double>(v.data(), v.data() + v.size());
    }
    j.push_back(e);
  }
  return j;
}

int cmd_identify(const Resolved& c, std::ostream& out) {
  const auto path = get<std::string>(c, "data");
  if (path.empty()) throw ConfigError("identify needs --data");
  const auto fmt = format_of(c);
  const CsvSchema schema = csv_schema(c);
  WeightedDataset wd = load_weighted_csv(path, schema);
  if (schema.weight.empty()) wd.weights.assign(wd.data.n(), 1.0);
  discrete::DiscreteJoint joint;
  try {
    joint = discrete::from_dataset(wd, get<std::size_t>(c, "identify.max_levels"));
  } catch (const DataError& e) {
    if (e.kind() != DataError::Kind::Validation) throw;
    throw ConfigError(std::string(e.what()) +
                      "; the data look continuous, use `mnar estimate --methods nonpara` instead");
  }
  const auto rep = discrete::check_identifiability(joint, get<double>(c, "identify.tol"));

  json j;
  j["config"] = c;
  j["support"] = {{"x_levels", joint.support.x_levels}, {"y_levels", joint.support.y_levels}};
  json patterns = json::array();
  for (const auto& p : joint.patterns) patterns.push_back(p.to_string());
  j["patterns"] = patterns;
  j["identification"] = discrete::to_json(rep);
  std::optional<discrete::TauResult> tau;
  if (rep.identifiable) {
    const auto xi = discrete::solve_xi(joint, get<double>(c, "identify.tol"));
    const auto rec = discrete::recover_joint(joint, xi);
    tau = discrete::discrete_tau(rec.full);
    j["xi"] = discrete::to_json(xi);
    j["mechanism"] = mechanism_json(rec.mechanism);
    j["recovered_total"] = rec.full.fxy[0].sum() + rec.full.fxy[1].sum();
    j["tau"] = tau->tau;
    j["tau_att"] = tau->tau_att;
  }

  if (fmt == "json") {
    emit(c, j.dump(2) + "\n", out);
    return Ok;
  }
  std::ostringstream os;
  os.precision(10);
  const std::string sep = fmt == "csv" ? "," : " ";
  if (fmt == "csv") os << "key,value\n";
  os << "identifiable" << sep << (rep.identifiable ? "true" : "false") << '\n';
  os << "q" << sep << rep.q << '\n' << "K" << sep << rep.K << '\n';
  for (int a = 0; a < 2; ++a) {
    os << "rank_a" << a << sep << rep.arms[static_cast<std::size_t>(a)].rank << '\n';
    os << "condition_a" << a << sep << rep.arms[static_cast<std::size_t>(a)].condition_number << '\n';
  }
  if (tau) os << "tau" << sep << tau->tau << '\n' << "tau_att" << sep << tau->tau_att << '\n';
  if (!rep.identifiable && !rep.reason.empty()) os << "reason" << sep << rep.reason << '\n';
  emit(c, os.str(), out);
  return Ok;
}

}  // namespace

const nlohmann::json& default_config() {
  static const json d = {
      {"scenario", "A"},
      {"data", ""},
      {"methods", {"unadj"}},
      {"n", 400},
      {"reps", 200},
      {"boot", 100},
      {"seed", nullptr},
      {"jobs", 1},
      {"J", 5},
      {"B", 50.0},
      {"level", 0.95},
      {"format", "json"},
      {"out", ""},
      {"nonpara.self_normalized", false},
      {"nonpara.clip_floor", 0.01},
      {"nonpara.outcome_backend", "spline"},
      {"gpsw.form", "hajek"},
      {"gpsw.clip_lo", 0.01},
      {"gpsw.clip_hi", 0.99},
      {"fi.M", 100},
      {"fi.tol", 1e-5},
      {"fi.max_iter", 200},
      {"scenario.null_effect", false},
      {"scenario.randomized", false},
      {"csv.a", "a"},
      {"csv.y", "y"},
      {"csv.x", json::array()},
      {"csv.weight", ""},
      {"identify.tol", 1e-10},
      {"identify.max_levels", 20},
  };
  return d;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Average causal effects with confounders missing not at random"};
  app.require_subcommand(1);

  std::string config_path, scenario, data, format, out_path;
  std::vector<std::string> methods;
  std::size_t n = 0, reps = 0, boot = 0, jobs = 0, J = 0;
  std::uint64_t seed = 0;
  double B = 0.0;

  std::vector<CLI::App*> subs;
  subs.push_back(app.add_subcommand("simulate", "Monte Carlo study on a built-in scenario"));
  subs.push_back(app.add_subcommand("estimate", "Estimate the average causal effect from a CSV file"));
  subs.push_back(app.add_subcommand("identify", "Audit identifiability of a discrete frequency table"));

  struct Flag {
    CLI::Option* opt;
    std::string key;
    std::function<json()> value;
  };
  std::vector<Flag> flags;
  for (auto* s : subs) {
    s->add_option("--config", config_path, "JSON file with flat dotted keys");
    flags.push_back({s->add_option("--scenario", scenario, "A or B"), "scenario", [&] { return json(scenario); }});
    flags.push_back({s->add_option("--data", data, "input CSV"), "data", [&] { return json(data); }});
    flags.push_back({s->add_option("--methods", methods, "comma list of unadj, gpsw, nonpara, para")->delimiter(','),
                     "methods", [&] { return json(methods); }});
    flags.push_back({s->add_option("--n", n, "sample size"), "n", [&] { return json(n); }});
    flags.push_back({s->add_option("--reps", reps, "Monte Carlo replicates"), "reps", [&] { return json(reps); }});
    flags.push_back({s->add_option("--boot", boot, "bootstrap resamples"), "boot", [&] { return json(boot); }});
    flags.push_back({s->add_option("--seed", seed, "master seed"), "seed", [&] { return json(seed); }});
    flags.push_back({s->add_option("--jobs", jobs, "worker threads"), "jobs", [&] { return json(jobs); }});
    flags.push_back({s->add_option("--J", J, "basis size"), "J", [&] { return json(J); }});
    flags.push_back({s->add_option("--B", B, "smoothness bound"), "B", [&] { return json(B); }});
    flags.push_back({s->add_option("--out", out_path, "output file"), "out", [&] { return json(out_path); }});
    flags.push_back({s->add_option("--format", format, "json, table or csv")->check(CLI::IsMember({"json", "table", "csv"})),
                     "format", [&] { return json(format); }});
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? Ok : UsageError;
  }

  CLI::App* cmd = nullptr;
  for (auto* s : subs)
    if (s->parsed()) cmd = s;

  try {
    Resolved c = default_config();
    c["jobs"] = default_jobs();
    if (const char* env = std::getenv("MNAR_SEED"); env && *env) {
      try {
        std::size_t used = 0;
        c["seed"] = std::stoull(env, &used);
        if (env[used] != '\0') throw std::invalid_argument("trailing characters");
      } catch (const std::exception&) {
        throw ConfigError(std::string("MNAR_SEED is not an unsigned integer: ") + env);
      }
    }
    if (!config_path.empty()) merge_file(c, config_path);
    for (const auto& f : flags)
      if (f.opt->count() > 0) c[f.key] = f.value();
    c["command"] = cmd->get_name();

    if (cmd->get_name() == "simulate") return cmd_simulate(c, out);
    if (cmd->get_name() == "estimate") return cmd_estimate(c, out);
    return cmd_identify(c, out);
  } catch (const DataError& e) {
    err << "error: " << e.what() << '\n';
    return UsageError;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return UsageError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return RuntimeFailure;
  }
}

}  // namespace mnar::cli
