#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "mnar/data_model.hpp"
#include "mnar/series_inverse.hpp"
#include "mnar/smoothers.hpp"

namespace mnar {

class EstimationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EstimateResult {
  std::string method;
  double estimate = 0.0;
  std::optional<double> se;
  std::optional<std::pair<double, double>> ci;
  nlohmann::json diagnostics = nlohmann::json::object();
};

nlohmann::json to_json(const EstimateResult& r);

/// Difference of outcome means between arms.
EstimateResult unadjusted(const Dataset& d);

/// tau^(x) from per-arm conditional-mean fits on complete cases.
class CateModel {
 public:
  CateModel() = default;
  CateModel(std::shared_ptr<const smooth::Regressor> m0, std::shared_ptr<const smooth::Regressor> m1)
      : m_{std::move(m0), std::move(m1)} {}
  double operator()(const Eigen::Ref<const Eigen::VectorXd>& x) const { return m_[1]->predict(x) - m_[0]->predict(x); }
  Eigen::VectorXd many(const Eigen::MatrixXd& x) const { return m_[1]->predict_many(x) - m_[0]->predict_many(x); }
  const smooth::Regressor& arm(int a) const { return *m_[static_cast<std::size_t>(a)]; }

 private:
  std::array<std::shared_ptr<const smooth::Regressor>, 2> m_;
};

/// `frozen[a]` skips tuning for arm a.
CateModel cate_complete_case(const Dataset& d, const smooth::RegressionSpec& spec,
                             const std::array<std::optional<double>, 2>& frozen = {});

enum class WeightingForm { Hajek, HorvitzThompson };

struct GpswOptions {
  WeightingForm form = WeightingForm::Hajek;
  double clip_lo = 0.01;
  double clip_hi = 0.99;
};

/// Weighting by the generalized propensity score, fitted by one logistic
/// regression of A on the observed covariates per missingness pattern.
EstimateResult gpsw(const Dataset& d, const GpswOptions& opts = {});

struct NonparaOptions {
  std::size_t J = 5;
  double B = 50.0;
  smooth::RegressionSpec outcome{};
  smooth::CvConfig cv{};
  double clip_floor = 0.01;
  bool self_normalized = false;
  std::size_t max_p = 3;
};

/// Tuning values chosen on the original sample, reused by bootstrap replicates.
struct NonparaTuning {
  series::XiTuning xi;
  std::array<std::optional<double>, 2> outcome;
};

struct NonparaFit {
  EstimateResult result;
  series::XiModel xi;
  CateModel cate;
  NonparaTuning tuning;
};

/// Stage-one pieces that do not depend on (J, B).
struct NonparaStage1 {
  series::XiMoments moments;
  CateModel cate;
  NonparaTuning tuning;
};

NonparaStage1 nonpara_stage1(const Dataset& d, const NonparaOptions& opts, const NonparaTuning* frozen = nullptr);
/// Completes the estimate for basis size J and bound B from stage one.
NonparaFit nonpara_stage2(const Dataset& d, const NonparaStage1& s1, const NonparaOptions& opts);
NonparaFit nonpara_fit(const Dataset& d, const NonparaOptions& opts, const NonparaTuning* frozen = nullptr);
EstimateResult nonpara_tau(const Dataset& d, const NonparaOptions& opts, const NonparaTuning* frozen = nullptr);

/// sum_a P^(A=a) * mean over arm-a units of tau^(X_i); complete data only.
double plugin_standardization(const Dataset& d, const CateModel& cate);

struct BootstrapResult {
  double se = 0.0;
  double lo = 0.0, hi = 0.0;
  std::size_t failures = 0;
  std::vector<double> replicates;
};

/// Replicate b resamples units with stream (seed, b) and calls est(rows, b),
/// where rows lists the drawn unit indices. Up to 5% of replicates may throw.
using RowEstimator = std::function<double(const std::vector<std::size_t>& rows, std::size_t replicate)>;
BootstrapResult bootstrap_ci(const RowEstimator& est, std::size_t n, std::size_t n_boot, double level,
                             std::uint64_t seed, std::size_t jobs = 1);
/// Convenience form that hands each replicate the resampled dataset.
BootstrapResult bootstrap_ci(const std::function<double(const Dataset&)>& est, const Dataset& d, std::size_t n_boot,
                             double level, std::uint64_t seed, std::size_t jobs = 1);

/// Linear-interpolation sample quantile of sorted data.
double quantile_sorted(const std::vector<double>& sorted, double prob);

}  // namespace mnar
