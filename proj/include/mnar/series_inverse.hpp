#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "mnar/data_model.hpp"
#include "mnar/smoothers.hpp"

namespace mnar::series {

class SeriesError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// x~ = Sigma^{-1/2} (x - mu) with moments taken over complete cases.
struct Standardizer {
  Eigen::VectorXd mu;
  Eigen::MatrixXd sigma_inv_sqrt;
  bool ridged = false;  // covariance was singular and a small ridge was added

  Eigen::VectorXd apply(const Eigen::Ref<const Eigen::VectorXd>& x) const;
  /// Row-wise transform of an m x p table.
  Eigen::MatrixXd apply_rows(const Eigen::MatrixXd& x) const;
  static Standardizer identity(std::size_t p);
};

Standardizer fit_standardizer(const Eigen::MatrixXd& complete_x);

/// Hermite functions exp(-x'x) x^lambda, graded by total degree; within a
/// degree, higher powers on earlier coordinates come first.
struct HermiteBasis {
  std::size_t p = 0;
  std::vector<std::vector<int>> multi_indices;

  std::size_t J() const { return multi_indices.size(); }
};

HermiteBasis build_basis(std::size_t J, std::size_t p);
Eigen::VectorXd basis_eval(const HermiteBasis& b, const Eigen::Ref<const Eigen::VectorXd>& xt);
/// Row k holds the basis at standardized row k.
Eigen::MatrixXd basis_eval_rows(const HermiteBasis& b, const Eigen::MatrixXd& xt);

struct RegularizerMatrix {
  Eigen::MatrixXd lambda;
  int order = 2;
  double delta0 = 2.0;
  bool monte_carlo = false;
  int nodes = 20;  // Gauss-Hermite nodes per dimension when not Monte Carlo
};

/// Sum over derivative multi-indices |k| <= order of the weighted Gram matrix
/// of D^k h, with weight (1 + x'x)^delta0. Tensor Gauss-Hermite for p <= 3,
/// seeded Monte Carlo otherwise. `delta0` defaults to ceil(p/2) + 1.
RegularizerMatrix compute_lambda(const HermiteBasis& b, int order = 2, std::optional<double> delta0 = std::nullopt,
                                 int nodes = 20, std::uint64_t mc_seed = 20240601);

struct LsqResult {
  Eigen::VectorXd beta;
  double multiplier = 0.0;
  double objective = 0.0;  // ||y - D beta||^2
  bool active = false;
  int iterations = 0;
};

/// min ||y - D beta||^2 subject to beta' Lambda beta <= B.
LsqResult constrained_lsq(const Eigen::MatrixXd& D, const Eigen::VectorXd& y, const Eigen::MatrixXd& Lambda, double B);

/// Frozen smoothing choices for one (pattern, arm) fit.
struct SlotTuning {
  Eigen::VectorXd target_bw;    // KDE over pattern-r units
  Eigen::VectorXd complete_bw;  // KDE over complete cases
  Eigen::VectorXd h_bw;         // regression of the basis on (X_obs, Y)
};

using SlotKey = std::pair<Pattern, int>;
using XiTuning = std::map<SlotKey, SlotTuning>;

struct XiSlot {
  Pattern pattern;
  int arm = 0;
  Eigen::VectorXd beta;
  double objective = 0.0;
  double multiplier = 0.0;
  bool active = false;
  std::size_t n_eval = 0;
  SlotTuning tuning;
};

struct XiFitOptions {
  std::size_t J = 5;
  double B = 50.0;
  int lambda_order = 2;
  std::optional<double> delta0;
  smooth::CvConfig cv{};
  double clip_floor = 0.01;
};

struct XiModel {
  HermiteBasis basis;
  Standardizer standardizer;
  RegularizerMatrix lambda;
  double B = 0.0;
  double clip_floor = 0.01;
  std::vector<XiSlot> slots;

  XiTuning tuning() const;
};

/// Smoothed conditional moments for one (pattern, arm) slot, evaluated at the
/// arm-a units that observe every covariate the pattern observes.
struct SlotMoments {
  Pattern pattern;
  int arm = 0;
  std::vector<std::size_t> units;
  Eigen::VectorXd target;  // f^(X_obs, Y, R=r | A=a)
  Eigen::VectorXd f1;      // f^(X_obs, Y, R=1_p | A=a)
  Eigen::MatrixXd H;       // E^{h(X~) | X_obs, Y, A=a, R=1_p}, units x J
  SlotTuning tuning;
};

/// Feature rows (X_obs(r), Y) for the listed units; Y alone if nothing is observed.
Eigen::MatrixXd slot_features(const Dataset& d, const Pattern& pat, const std::vector<std::size_t>& units);

SlotMoments estimate_moments(const Dataset& d, const PatternIndex& idx, const Pattern& pat, int arm,
                             const Eigen::MatrixXd& basis_cc, const std::vector<std::size_t>& cc_units,
                             const smooth::CvConfig& cv, const SlotTuning* frozen);

/// Solve for beta_ra from (possibly externally supplied) moments.
XiSlot solve_slot(const Pattern& pat, int arm, const Eigen::MatrixXd& H, const Eigen::VectorXd& f1,
                  const Eigen::VectorXd& target, const RegularizerMatrix& lambda, double B);

/// Stage-one smoothing for every (pattern, arm) slot, computed once with the
/// largest basis; smaller bases reuse the leading columns of H.
struct XiMoments {
  HermiteBasis basis;
  Standardizer standardizer;
  std::vector<SlotMoments> slots;
};

XiMoments xi_moments(const Dataset& d, const XiFitOptions& opts, const XiTuning* frozen = nullptr);
/// Stage two for basis size opts.J (at most the moments' basis size) and bound opts.B.
XiModel solve_xi_model(const XiMoments& mom, const XiFitOptions& opts);
XiModel fit_xi(const Dataset& d, const XiFitOptions& opts, const XiTuning* frozen = nullptr);

struct ClipCounter {
  std::size_t evaluations = 0;
  std::size_t xi_clipped = 0;    // negative series values raised to zero
  std::size_t prob_clipped = 0;  // probabilities raised to the floor
};

/// xi^_ra at raw covariates x (clipped below at zero).
double xi_value(const XiModel& m, const XiSlot& slot, const Eigen::Ref<const Eigen::VectorXd>& x,
                ClipCounter* clips = nullptr);

/// P^(R=1_p | A=a, X=x) = 1 / (1 + sum_r xi^_ra(x)), clipped to [floor, 1].
double response_prob(const XiModel& m, const Eigen::Ref<const Eigen::VectorXd>& x, int a,
                     ClipCounter* clips = nullptr);

nlohmann::json to_json(const XiModel& m);

}  // namespace mnar::series
