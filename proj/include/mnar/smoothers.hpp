#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

namespace mnar::smooth {

class SmootherError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Product-Gaussian kernel density estimate.
struct KdeModel {
  Eigen::MatrixXd points;  // m x d
  Eigen::VectorXd bandwidths;

  std::size_t m() const { return static_cast<std::size_t>(points.rows()); }
  std::size_t d() const { return static_cast<std::size_t>(points.cols()); }
};

KdeModel kde_fit(Eigen::MatrixXd points, Eigen::VectorXd bandwidths);
double kde_eval(const KdeModel& model, const Eigen::Ref<const Eigen::VectorXd>& q);
/// Log density, finite even where the density itself underflows.
double kde_log_eval(const KdeModel& model, const Eigen::Ref<const Eigen::VectorXd>& q);
Eigen::VectorXd kde_eval_many(const KdeModel& model, const Eigen::MatrixXd& queries);

/// Nadaraya–Watson regression with one or more target columns sharing the
/// same kernel weights.
struct NwModel {
  Eigen::MatrixXd inputs;   // m x d
  Eigen::MatrixXd targets;  // m x t
  Eigen::VectorXd bandwidths;
};

NwModel nw_fit(Eigen::MatrixXd inputs, const Eigen::VectorXd& targets, Eigen::VectorXd bandwidths);
NwModel nw_fit_multi(Eigen::MatrixXd inputs, Eigen::MatrixXd targets, Eigen::VectorXd bandwidths);
double nw_eval(const NwModel& model, const Eigen::Ref<const Eigen::VectorXd>& q);
/// Row k holds the fitted target vector at query row k.
Eigen::MatrixXd nw_eval_many(const NwModel& model, const Eigen::MatrixXd& queries);

enum class DensityCvLoss { LeastSquares, Likelihood };

struct CvConfig {
  int folds = 10;
  /// Multipliers applied to the normal-reference bandwidth.
  std::vector<double> grid{0.1, 0.2, 0.35, 0.5, 0.7, 1.0, 1.4, 2.0};
  std::uint64_t seed = 20240601;
  DensityCvLoss density_loss = DensityCvLoss::LeastSquares;
};

/// 1.06 * sd * m^(-1/(4+d)) per column; constant columns use sd = 1.
Eigen::VectorXd reference_bandwidth(const Eigen::MatrixXd& points);

/// k-fold selection over the multiplier grid. With `targets` the held-out
/// squared prediction error of Nadaraya–Watson is minimized; without, the
/// density criterion named by `cfg.density_loss`.
Eigen::VectorXd cv_bandwidth(const Eigen::MatrixXd& inputs, const Eigen::MatrixXd* targets, const CvConfig& cfg);

/// Fold label for each of m rows; a seeded permutation dealt round-robin.
std::vector<int> fold_labels(std::size_t m, int folds, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Conditional-mean regression behind a common interface.

class Regressor {
 public:
  virtual ~Regressor() = default;
  virtual double predict(const Eigen::Ref<const Eigen::VectorXd>& q) const = 0;
  virtual Eigen::VectorXd predict_many(const Eigen::MatrixXd& queries) const;
  /// The tuning value chosen at fit time (bandwidth multiplier or penalty).
  virtual double tuning() const = 0;
};

enum class RegressionBackend { Spline, NadarayaWatson };

struct RegressionSpec {
  RegressionBackend backend = RegressionBackend::Spline;
  CvConfig cv{};
  /// Spline ridge penalties searched by cross-validation.
  std::vector<double> penalty_grid{0.0, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0};
  int knots = 5;
  /// Skip cross-validation and use this tuning value (bootstrap replicates).
  std::optional<double> frozen;
};

std::unique_ptr<Regressor> fit_regressor(const Eigen::MatrixXd& inputs, const Eigen::VectorXd& targets,
                                         const RegressionSpec& spec);

/// Additive cubic regression spline: restricted (natural) cubic spline terms
/// with knots at fixed quantiles for columns with at least `knots` distinct
/// values, a linear term otherwise, and a ridge penalty on the nonlinear terms.
class SplineRegressor final : public Regressor {
 public:
  SplineRegressor(const Eigen::MatrixXd& inputs, const Eigen::VectorXd& targets, double penalty, int knots);
  double predict(const Eigen::Ref<const Eigen::VectorXd>& q) const override;
  Eigen::VectorXd predict_many(const Eigen::MatrixXd& queries) const override;
  double tuning() const override { return penalty_; }

  static double cv_penalty(const Eigen::MatrixXd& inputs, const Eigen::VectorXd& targets,
                           const std::vector<double>& grid, int knots, const CvConfig& cv);

 private:
  Eigen::RowVectorXd features(const Eigen::Ref<const Eigen::VectorXd>& q) const;

  std::vector<std::vector<double>> knots_;  // empty => linear column
  Eigen::RowVectorXd center_, scale_;
  std::vector<bool> nonlinear_;
  Eigen::VectorXd coef_;
  double penalty_;
};

class NwRegressor final : public Regressor {
 public:
  NwRegressor(NwModel model, double multiplier) : model_(std::move(model)), multiplier_(multiplier) {}
  double predict(const Eigen::Ref<const Eigen::VectorXd>& q) const override { return nw_eval(model_, q); }
  Eigen::VectorXd predict_many(const Eigen::MatrixXd& queries) const override;
  double tuning() const override { return multiplier_; }
  const NwModel& model() const { return model_; }

 private:
  NwModel model_;
  double multiplier_;
};

}  // namespace mnar::smooth
