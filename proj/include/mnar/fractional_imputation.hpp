#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "mnar/data_model.hpp"
#include "mnar/estimators.hpp"

namespace mnar::fi {

enum class CovFamily { Gaussian, Bernoulli };

/// Per-column covariate families. Column j is modelled given columns 0..j-1.
struct ParamModelSpec {
  std::vector<CovFamily> families;

  /// Bernoulli for columns whose observed values are all 0 or 1, Gaussian otherwise.
  static ParamModelSpec infer(const Dataset& d);
};

struct CovParams {
  Eigen::VectorXd coef;  // over (1, x_0, ..., x_{j-1})
  double sigma2 = 1.0;   // Gaussian columns only
};

struct ParamTheta {
  Eigen::VectorXd alpha;                // treatment logit over (1, X)
  std::array<Eigen::VectorXd, 2> beta;  // outcome mean over (1, X), per arm
  std::array<double, 2> sigma2{1.0, 1.0};
  Eigen::MatrixXd eta;                  // one row per non-reference pattern, over (1, A, X)
  std::vector<CovParams> lambda;

  Eigen::VectorXd flatten() const;
};

/// Fractionally imputed data. Every unit owns a block of rows; complete units
/// own a single row. Identical draws of one unit are merged into one row with
/// a multiplicity.
struct FiState {
  std::size_t M = 0;
  std::vector<Pattern> categories;  // missingness model categories; entry 0 is the complete pattern
  Eigen::VectorXi unit_category;
  std::vector<std::size_t> begin;   // rows of unit i: [begin[i], begin[i+1])
  Eigen::MatrixXd x;                // imputed covariate rows
  Eigen::VectorXd mult;             // number of draws each row stands for
  Eigen::VectorXd log_h;            // proposal log density of the drawn values
  Eigen::VectorXd omega;            // fractional weights, summing to one per unit
  ParamTheta theta;
  int iterations = 0;  // EM maps applied
  int cycles = 0;      // accelerated iterations, each made of up to three EM maps
  bool converged = false;
  /// Converged on a stalled log-likelihood rather than on the parameters,
  /// which happens when the maximizer lies on the boundary.
  bool likelihood_stop = false;
  std::vector<double> loglik_trace;  // observed-data log-likelihood at each iteration's E-step
  /// Positions in loglik_trace where regenerated draws take effect; the trace
  /// is only comparable between consecutive positions.
  std::vector<std::size_t> refresh_at;

  std::size_t rows() const { return static_cast<std::size_t>(x.rows()); }
};

struct FiOptions {
  std::size_t M = 100;
  double tol = 1e-5;
  int max_iter = 200;  // accelerated iterations
  std::uint64_t seed = 1;
  double ess_min = 2.0;
  double ess_fraction = 0.1;
  int max_refresh = 5;
};

struct FiResult {
  ParamTheta theta;
  FiState state;
};

class FiError : public EstimationError {
 public:
  using EstimationError::EstimationError;
};

/// Complete-case maximum likelihood per factor (the starting point).
ParamTheta complete_case_theta(const Dataset& d, const ParamModelSpec& spec, const std::vector<Pattern>& categories);

FiResult fit_mle_fractional(const Dataset& d, const ParamModelSpec& spec, const FiOptions& opts = {});

/// Refits with unit multiplicities (a bootstrap resample), reusing the draws
/// and proposal densities of `base` and starting from its parameters.
FiResult refit_weighted(const Dataset& d, const ParamModelSpec& spec, const FiState& base,
                        const Eigen::VectorXd& unit_weight, const FiOptions& opts = {});

/// State with a single weight-one row per unit holding the given full covariate
/// rows (for example the true values of a simulation); theta is left empty.
FiState state_from_rows(const Dataset& d, const Eigen::MatrixXd& full_x);

/// Runs the iteration from a prepared state (draws in place, theta as the start).
void run_em(const Dataset& d, const ParamModelSpec& spec, FiState& st, const Eigen::VectorXd& unit_weight,
            const FiOptions& opts);

/// n^{-1} sum_i sum_j omega_ij (1, X*_ij)'(beta1 - beta0).
EstimateResult param_tau(const ParamTheta& theta, const Dataset& d, const FiState& st,
                         const Eigen::VectorXd* unit_weight = nullptr);

/// Row log densities log f(Z; theta) of the full-data model.
Eigen::VectorXd row_loglik(const Dataset& d, const ParamModelSpec& spec, const FiState& st, const ParamTheta& theta);

/// Observed-data log-likelihood estimate sum_i u_i log(M^{-1} sum_j f(Z*_ij)/h_ij).
double observed_loglik(const Dataset& d, const ParamModelSpec& spec, const FiState& st, const ParamTheta& theta,
                       const Eigen::VectorXd& unit_weight);

/// One factor of the factorized likelihood.
struct Factor {
  enum class Kind { Covariate, Treatment, Outcome, Missingness };
  Kind kind;
  std::size_t index = 0;  // covariate column or outcome arm
};

std::vector<Factor> factors(const ParamModelSpec& spec, const FiState& st);
std::string factor_name(const Factor& f);
Eigen::VectorXd factor_params(const ParamTheta& theta, const Factor& f);
void set_factor_params(ParamTheta& theta, const Factor& f, const Eigen::VectorXd& v);
/// Weighted log-likelihood of one factor under the state's fractional weights.
double factor_loglik(const Dataset& d, const ParamModelSpec& spec, const FiState& st, const ParamTheta& theta,
                     const Factor& f, const Eigen::VectorXd& unit_weight);
Eigen::VectorXd factor_score(const Dataset& d, const ParamModelSpec& spec, const FiState& st, const ParamTheta& theta,
                             const Factor& f, const Eigen::VectorXd& unit_weight);

nlohmann::json to_json(const ParamTheta& t);

}  // namespace mnar::fi
