#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "mnar/data_model.hpp"
#include "mnar/discrete_ident.hpp"
#include "mnar/estimators.hpp"
#include "mnar/fractional_imputation.hpp"
#include "mnar/rng.hpp"

namespace mnar::sim {

struct Simulated {
  Dataset data;
  double tau = 0.0;       // population average causal effect of the generator
  Eigen::MatrixXd full_x; // covariates before masking
};

struct ScenarioAOptions {
  bool null_effect = false;  // Y(1) = Y(0)
  bool randomized = false;   // A ~ Bernoulli(1/2) independent of X
};

/// One confounder (x1) subject to missingness depending on (A, X).
Simulated generate_scenario_a(std::size_t n, Rng& rng, const ScenarioAOptions& opts = {});

/// Six confounders, x5 and x6 jointly subject to missingness.
Simulated generate_scenario_b(std::size_t n, Rng& rng);

enum class Scenario { A, B };

Scenario parse_scenario(const std::string& s);
std::string scenario_name(Scenario s);

struct ScenarioConfig {
  Scenario scenario = Scenario::A;
  std::size_t n = 400;
  std::uint64_t seed = 1;
  std::vector<std::string> methods{"unadj"};
  std::size_t n_reps = 200;
  std::size_t n_boot = 100;
  std::size_t jobs = 1;
  double level = 0.95;
  NonparaOptions nonpara{};
  GpswOptions gpsw{};
  fi::FiOptions fi{};
  ScenarioAOptions scenario_a{};

  /// Throws std::invalid_argument for unknown methods, n < 50, or a method
  /// that cannot run on the scenario.
  void validate() const;
};

struct MethodSummary {
  std::string method;
  double bias = 0.0;
  double variance = 0.0;
  double ve = 0.0;        // mean bootstrap variance
  double coverage = 0.0;  // share of intervals containing tau
  double mse = 0.0;
  std::size_t reps = 0;
  std::size_t failures = 0;
  std::vector<double> estimates;
  std::vector<double> boot_variances;
  std::vector<char> covered;
};

struct MonteCarloReport {
  ScenarioConfig config;
  double tau = 0.0;
  std::vector<MethodSummary> methods;
};

/// Point estimate and bootstrap interval of one method on one dataset.
EstimateResult run_method(const std::string& method, const Dataset& d, const ScenarioConfig& cfg,
                          std::uint64_t boot_seed);

/// bias = mean - tau, variance with n - 1, MSE = bias^2 + variance.
MethodSummary summarize(const std::string& method, const std::vector<EstimateResult>& results, std::size_t failures,
                        double tau);

MonteCarloReport run_monte_carlo(const ScenarioConfig& cfg);

struct SensitivityCell {
  std::size_t J = 0;
  double B = 0.0;
  std::size_t n = 0;
  double bias = 0.0, variance = 0.0, mse = 0.0;
  std::size_t reps = 0, failures = 0;
};

/// MSE of the nonparametric estimator per (J, B, n). Stage-one smoothing is
/// shared by all (J, B) cells of a replicate.
std::vector<SensitivityCell> sensitivity_grid(const ScenarioConfig& cfg,
                                              const std::vector<std::pair<std::size_t, double>>& grid,
                                              const std::vector<std::size_t>& sizes);

nlohmann::json config_json(const ScenarioConfig& cfg);
nlohmann::json to_json(const MonteCarloReport& r);
std::string to_table(const MonteCarloReport& r);
std::string to_csv(const MonteCarloReport& r);
nlohmann::json to_json(const std::vector<SensitivityCell>& cells);

/// A discrete law together with an outcome-independent mechanism.
struct DiscreteGenerator {
  discrete::FullJoint full;
  discrete::Mechanism mechanism;
};

/// Random finite-support generator with binary or ternary covariates, K in
/// {3, 4, 5} outcome levels, K >= q, multinomial-logistic missingness in
/// (A, X), and full-rank Theta in both arms.
DiscreteGenerator random_identifiable_joint(Rng& rng);

/// Random generator with X independent of Y given A (hence given A and R = 1_p).
DiscreteGenerator random_independent_joint(Rng& rng);

}  // namespace mnar::sim
