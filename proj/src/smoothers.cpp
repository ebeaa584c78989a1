#include "mnar/smoothers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "mnar/rng.hpp"

namespace mnar::smooth {

namespace {

constexpr double kLogSqrt2Pi = 0.91893853320467274178;  // log(sqrt(2*pi))
constexpr double kUnderflow = 1e-300;

void check_bandwidths(const Eigen::VectorXd& bw, Eigen::Index d) {
  if (bw.size() != d) throw SmootherError("bandwidth dimension does not match data dimension");
  for (Eigen::Index j = 0; j < d; ++j)
    if (!(bw(j) > 0.0) || !std::isfinite(bw(j))) throw SmootherError("bandwidths must be positive and finite");
}

// Squared scaled distance between query q (already divided by bandwidths)
// and scaled row k of `scaled`.
inline double sq_dist(const Eigen::MatrixXd& scaled, Eigen::Index k, const double* q, Eigen::Index d) {
  double s = 0.0;
  for (Eigen::Index j = 0; j < d; ++j) {
    const double t = q[j] - scaled(k, j);
    s += t * t;
  }
  return s;
}

// Log of sum_k exp(-0.5 * ||q - x_k||^2_h) over the given rows.
double log_kernel_sum(const Eigen::MatrixXd& scaled, const double* q, const std::vector<Eigen::Index>* rows,
                      std::vector<double>& scratch) {
  const Eigen::Index d = scaled.cols();
  const std::size_t m = rows ? rows->size() : static_cast<std::size_t>(scaled.rows());
  scratch.resize(m);
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < m; ++k) {
    const Eigen::Index r = rows ? (*rows)[k] : static_cast<Eigen::Index>(k);
    const double e = -0.5 * sq_dist(scaled, r, q, d);
    scratch[k] = e;
    best = std::max(best, e);
  }
  if (!std::isfinite(best)) return best;
  double s = 0.0;
  for (std::size_t k = 0; k < m; ++k) s += std::exp(scratch[k] - best);
  return best + std::log(s);
}

Eigen::MatrixXd scale_columns(const Eigen::MatrixXd& x, const Eigen::VectorXd& bw) {
  return x * bw.cwiseInverse().asDiagonal();
}

double log_norm_const(const Eigen::VectorXd& bw) {
  return -static_cast<double>(bw.size()) * kLogSqrt2Pi - bw.array().log().sum();
}

}  // namespace

KdeModel kde_fit(Eigen::MatrixXd points, Eigen::VectorXd bandwidths) {
  if (points.rows() < 1) throw SmootherError("kernel density needs at least one point");
  check_bandwidths(bandwidths, points.cols());
  return KdeModel{std::move(points), std::move(bandwidths)};
}

double kde_log_eval(const KdeModel& model, const Eigen::Ref<const Eigen::VectorXd>& q) {
  if (q.size() != model.points.cols()) throw SmootherError("query dimension does not match model");
  const Eigen::VectorXd qs = q.cwiseQuotient(model.bandwidths);
  const Eigen::MatrixXd scaled = scale_columns(model.points, model.bandwidths);
  std::vector<double> scratch;
  return log_kernel_sum(scaled, qs.data(), nullptr, scratch) - std::log(static_cast<double>(model.m())) +
         log_norm_const(model.bandwidths);
}

double kde_eval(const KdeModel& model, const Eigen::Ref<const Eigen::VectorXd>& q) {
  return std::exp(kde_log_eval(model, q));
}

Eigen::VectorXd kde_eval_many(const KdeModel& model, const Eigen::MatrixXd& queries) {
  if (queries.cols() != model.points.cols()) throw SmootherError("query dimension does not match model");
  const Eigen::MatrixXd scaled = scale_columns(model.points, model.bandwidths);
  const Eigen::MatrixXd qs = scale_columns(queries, model.bandwidths);
  const double offset = -std::log(static_cast<double>(model.m())) + log_norm_const(model.bandwidths);
  const Eigen::Index d = scaled.cols();
  Eigen::VectorXd out(queries.rows());
  std::vector<double> q(static_cast<std::size_t>(d));
  std::vector<double> scratch;
  for (Eigen::Index i = 0; i < queries.rows(); ++i) {
    for (Eigen::Index j = 0; j < d; ++j) q[static_cast<std::size_t>(j)] = qs(i, j);
    // Fast path: direct sum; fall back to log-sum-exp when it underflows.
    double s = 0.0;
    for (Eigen::Index k = 0; k < scaled.rows(); ++k) s += std::exp(-0.5 * sq_dist(scaled, k, q.data(), d));
    if (s > kUnderflow)
      out(i) = std::exp(std::log(s) + offset);
    else
      out(i) = std::exp(log_kernel_sum(scaled, q.data(), nullptr, scratch) + offset);
  }
  return out;
}

NwModel nw_fit(Eigen::MatrixXd inputs, const Eigen::VectorXd& targets, Eigen::VectorXd bandwidths) {
  return nw_fit_multi(std::move(inputs), Eigen::MatrixXd(targets), std::move(bandwidths));
}

NwModel nw_fit_multi(Eigen::MatrixXd inputs, Eigen::MatrixXd targets, Eigen::VectorXd bandwidths) {
  if (inputs.rows() < 1) throw SmootherError("Nadaraya-Watson needs at least one training point");
  if (targets.rows() != inputs.rows()) throw SmootherError("targets and inputs have different lengths");
  check_bandwidths(bandwidths, inputs.cols());
  return NwModel{std::move(inputs), std::move(targets), std::move(bandwidths)};
}

namespace {

// Weighted means of the target rows listed in `rows` (all rows when null).
void nw_eval_rows(const Eigen::MatrixXd& scaled, const Eigen::MatrixXd& targets, const std::vector<Eigen::Index>* rows,
                  const double* q, std::vector<double>& w, double* out) {
  const Eigen::Index d = scaled.cols();
  const std::size_t m = rows ? rows->size() : static_cast<std::size_t>(scaled.rows());
  const Eigen::Index t = targets.cols();
  w.resize(m);
  double best = -std::numeric_limits<double>::infinity();
  std::size_t nearest = 0;
  for (std::size_t k = 0; k < m; ++k) {
    const Eigen::Index r = rows ? (*rows)[k] : static_cast<Eigen::Index>(k);
    const double e = -0.5 * sq_dist(scaled, r, q, d);
    w[k] = e;
    if (e > best) {
      best = e;
      nearest = k;
    }
  }
  // Total raw weight below the underflow floor: nearest neighbour.
  double s = 0.0;
  for (std::size_t k = 0; k < m; ++k) {
    w[k] = std::exp(w[k] - best);
    s += w[k];
  }
  if (best + std::log(s) < std::log(kUnderflow)) {
    const Eigen::Index r = rows ? (*rows)[nearest] : static_cast<Eigen::Index>(nearest);
    for (Eigen::Index c = 0; c < t; ++c) out[c] = targets(r, c);
    return;
  }
  for (Eigen::Index c = 0; c < t; ++c) out[c] = 0.0;
  for (std::size_t k = 0; k < m; ++k) {
    const Eigen::Index r = rows ? (*rows)[k] : static_cast<Eigen::Index>(k);
    const double wk = w[k];
    for (Eigen::Index c = 0; c < t; ++c) out[c] += wk * targets(r, c);
  }
  for (Eigen::Index c = 0; c < t; ++c) out[c] /= s;
}

}  // namespace

double nw_eval(const NwModel& model, const Eigen::Ref<const Eigen::VectorXd>& q) {
  if (q.size() != model.inputs.cols()) throw SmootherError("query dimension does not match model");
  Eigen::MatrixXd qm = q.transpose();
  return nw_eval_many(model, qm)(0, 0);
}

Eigen::MatrixXd nw_eval_many(const NwModel& model, const Eigen::MatrixXd& queries) {
  if (queries.cols() != model.inputs.cols()) throw SmootherError("query dimension does not match model");
  const Eigen::MatrixXd scaled = scale_columns(model.inputs, model.bandwidths);
  const Eigen::MatrixXd qs = scale_columns(queries, model.bandwidths);
  // Row-major targets make the accumulation loop contiguous.
  Eigen::MatrixXd out(queries.rows(), model.targets.cols());
  std::vector<double> w, q(static_cast<std::size_t>(qs.cols())), row(static_cast<std::size_t>(model.targets.cols()));
  for (Eigen::Index i = 0; i < qs.rows(); ++i) {
    for (Eigen::Index j = 0; j < qs.cols(); ++j) q[static_cast<std::size_t>(j)] = qs(i, j);
    nw_eval_rows(scaled, model.targets, nullptr, q.data(), w, row.data());
    for (Eigen::Index c = 0; c < out.cols(); ++c) out(i, c) = row[static_cast<std::size_t>(c)];
  }
  return out;
}

Eigen::VectorXd reference_bandwidth(const Eigen::MatrixXd& points) {
  const auto m = points.rows();
  const auto d = points.cols();
  if (m < 1) throw SmootherError("reference bandwidth needs data");
  Eigen::VectorXd h(d);
  const double factor = 1.06 * std::pow(static_cast<double>(m), -1.0 / (4.0 + static_cast<double>(d)));
  for (Eigen::Index j = 0; j < d; ++j) {
    double sd = 0.0;
    if (m > 1) {
      const double mean = points.col(j).mean();
      sd = std::sqrt((points.col(j).array() - mean).square().sum() / static_cast<double>(m - 1));
    }
    if (!(sd > 0.0)) sd = 1.0;
    h(j) = factor * sd;
  }
  return h;
}

std::vector<int> fold_labels(std::size_t m, int folds, std::uint64_t seed) {
  std::vector<std::size_t> perm(m);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng = stream_rng(seed, 0xF01D);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<int> labels(m);
  for (std::size_t k = 0; k < m; ++k) labels[perm[k]] = static_cast<int>(k % static_cast<std::size_t>(folds));
  return labels;
}

namespace {

void check_cv(std::size_t m, const CvConfig& cfg) {
  if (cfg.grid.empty()) throw SmootherError("bandwidth grid is empty");
  if (cfg.folds < 2) throw SmootherError("cross-validation needs at least two folds");
  if (static_cast<std::size_t>(cfg.folds) > m) throw SmootherError("more folds than observations");
  for (double g : cfg.grid)
    if (!(g > 0.0)) throw SmootherError("bandwidth multipliers must be positive");
}

struct FoldSplit {
  std::vector<std::vector<Eigen::Index>> train, test;
};

FoldSplit make_folds(std::size_t m, const CvConfig& cfg) {
  const auto labels = fold_labels(m, cfg.folds, cfg.seed);
  FoldSplit s;
  s.train.resize(static_cast<std::size_t>(cfg.folds));
  s.test.resize(static_cast<std::size_t>(cfg.folds));
  for (std::size_t k = 0; k < m; ++k)
    for (int f = 0; f < cfg.folds; ++f)
      (labels[k] == f ? s.test : s.train)[static_cast<std::size_t>(f)].push_back(static_cast<Eigen::Index>(k));
  return s;
}

double density_cv_score(const Eigen::MatrixXd& x, const Eigen::VectorXd& h, const FoldSplit& folds,
                        DensityCvLoss loss) {
  const auto m = x.rows();
  const auto d = x.cols();
  const Eigen::MatrixXd scaled = scale_columns(x, h);
  const double lognorm = log_norm_const(h);
  std::vector<double> scratch;
  std::vector<double> q(static_cast<std::size_t>(d));

  double held = 0.0;  // sum of held-out density (LSCV) or log density (likelihood CV)
  for (std::size_t f = 0; f < folds.test.size(); ++f) {
    const auto& train = folds.train[f];
    const double logm = std::log(static_cast<double>(train.size()));
    for (auto i : folds.test[f]) {
      for (Eigen::Index j = 0; j < d; ++j) q[static_cast<std::size_t>(j)] = scaled(i, j);
      const double lf = log_kernel_sum(scaled, q.data(), &train, scratch) - logm + lognorm;
      held += loss == DensityCvLoss::LeastSquares ? std::exp(lf) : lf;
    }
  }
  if (loss == DensityCvLoss::Likelihood) return -held / static_cast<double>(m);

  // Integral of the squared estimate: pairwise convolution with bandwidth sqrt(2) h.
  const Eigen::MatrixXd s2 = scaled / std::sqrt(2.0);
  double pair = 0.0;
  for (Eigen::Index i = 0; i < m; ++i) {
    pair += 1.0;
    for (Eigen::Index k = i + 1; k < m; ++k) {
      double s = 0.0;
      for (Eigen::Index j = 0; j < d; ++j) {
        const double t = s2(i, j) - s2(k, j);
        s += t * t;
      }
      pair += 2.0 * std::exp(-0.5 * s);
    }
  }
  const double int_sq =
      pair / (static_cast<double>(m) * static_cast<double>(m)) *
      std::exp(-static_cast<double>(d) * kLogSqrt2Pi - (h.array() * std::sqrt(2.0)).log().sum());
  return int_sq - 2.0 * held / static_cast<double>(m);
}

double regression_cv_score(const Eigen::MatrixXd& x, const Eigen::MatrixXd& t, const Eigen::VectorXd& h,
                           const FoldSplit& folds, const Eigen::VectorXd& target_scale) {
  const Eigen::MatrixXd scaled = scale_columns(x, h);
  std::vector<double> w, q(static_cast<std::size_t>(x.cols())), pred(static_cast<std::size_t>(t.cols()));
  double sse = 0.0;
  for (std::size_t f = 0; f < folds.test.size(); ++f) {
    for (auto i : folds.test[f]) {
      for (Eigen::Index j = 0; j < x.cols(); ++j) q[static_cast<std::size_t>(j)] = scaled(i, j);
      nw_eval_rows(scaled, t, &folds.train[f], q.data(), w, pred.data());
      for (Eigen::Index c = 0; c < t.cols(); ++c) {
        const double e = pred[static_cast<std::size_t>(c)] - t(i, c);
        sse += e * e / target_scale(c);
      }
    }
  }
  return sse;
}

}  // namespace

Eigen::VectorXd cv_bandwidth(const Eigen::MatrixXd& inputs, const Eigen::MatrixXd* targets, const CvConfig& cfg) {
  const auto m = static_cast<std::size_t>(inputs.rows());
  check_cv(m, cfg);
  if (targets && targets->rows() != inputs.rows()) throw SmootherError("targets and inputs have different lengths");
  const Eigen::VectorXd ref = reference_bandwidth(inputs);
  if (cfg.grid.size() == 1) return ref * cfg.grid.front();

  const FoldSplit folds = make_folds(m, cfg);
  Eigen::VectorXd scale;
  if (targets) {
    scale.resize(targets->cols());
    for (Eigen::Index c = 0; c < targets->cols(); ++c) {
      const double mean = targets->col(c).mean();
      const double v = (targets->col(c).array() - mean).square().mean();
      scale(c) = v > 0.0 ? v : 1.0;
    }
  }
  double best_score = std::numeric_limits<double>::infinity();
  double best = cfg.grid.front();
  for (double g : cfg.grid) {
    const Eigen::VectorXd h = ref * g;
    const double s = targets ? regression_cv_score(inputs, *targets, h, folds, scale)
                             : density_cv_score(inputs, h, folds, cfg.density_loss);
    if (s < best_score) {
      best_score = s;
      best = g;
    }
  }
  return ref * best;
}

// ---------------------------------------------------------------------------
// Regressors

Eigen::VectorXd Regressor::predict_many(const Eigen::MatrixXd& queries) const {
  Eigen::VectorXd out(queries.rows());
  for (Eigen::Index i = 0; i < queries.rows(); ++i) out(i) = predict(queries.row(i).transpose());
  return out;
}

Eigen::VectorXd NwRegressor::predict_many(const Eigen::MatrixXd& queries) const {
  return nw_eval_many(model_, queries).col(0);
}

namespace {

std::vector<double> quantile_knots(Eigen::VectorXd col, int count) {
  std::vector<double> v(col.data(), col.data() + col.size());
  std::sort(v.begin(), v.end());
  const std::size_t distinct = static_cast<std::size_t>(std::unique(v.begin(), v.end()) - v.begin());
  if (static_cast<int>(distinct) < count || count < 3) return {};
  std::vector<double> sorted(col.data(), col.data() + col.size());
  std::sort(sorted.begin(), sorted.end());
  // Harrell's default placement: 0.05, 0.275, 0.5, 0.725, 0.95 for five knots.
  std::vector<double> knots;
  for (int k = 0; k < count; ++k) {
    const double prob = 0.05 + 0.9 * static_cast<double>(k) / static_cast<double>(count - 1);
    const double pos = prob * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    knots.push_back(sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]));
  }
  knots.erase(std::unique(knots.begin(), knots.end()), knots.end());
  if (knots.size() < 3) return {};
  return knots;
}

inline double cube_pos(double v) { return v > 0.0 ? v * v * v : 0.0; }

// Raw (unscaled) feature vector: per column the value, then the restricted
// cubic spline terms when knots exist.
void raw_features(const std::vector<std::vector<double>>& knots, const Eigen::Ref<const Eigen::VectorXd>& q,
                  std::vector<double>& out) {
  out.clear();
  for (std::size_t c = 0; c < knots.size(); ++c) {
    const double x = q(static_cast<Eigen::Index>(c));
    out.push_back(x);
    const auto& t = knots[c];
    if (t.empty()) continue;
    const std::size_t K = t.size();
    const double span2 = (t[K - 1] - t[0]) * (t[K - 1] - t[0]);
    const double denom = t[K - 1] - t[K - 2];
    for (std::size_t j = 0; j + 2 < K; ++j) {
      const double s = cube_pos(x - t[j]) - cube_pos(x - t[K - 2]) * (t[K - 1] - t[j]) / denom +
                       cube_pos(x - t[K - 1]) * (t[K - 2] - t[j]) / denom;
      out.push_back(s / span2);
    }
  }
}

struct SplineDesign {
  std::vector<std::vector<double>> knots;
  std::vector<bool> nonlinear;
  Eigen::RowVectorXd center, scale;
  Eigen::MatrixXd design;  // with intercept column first, standardized features
};

SplineDesign build_design(const Eigen::MatrixXd& x, int knot_count) {
  SplineDesign s;
  for (Eigen::Index c = 0; c < x.cols(); ++c) s.knots.push_back(quantile_knots(x.col(c), knot_count));
  std::vector<double> f;
  raw_features(s.knots, x.row(0).transpose(), f);
  const auto k = static_cast<Eigen::Index>(f.size());
  Eigen::MatrixXd raw(x.rows(), k);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    raw_features(s.knots, x.row(i).transpose(), f);
    for (Eigen::Index j = 0; j < k; ++j) raw(i, j) = f[static_cast<std::size_t>(j)];
  }
  for (const auto& t : s.knots) {
    s.nonlinear.push_back(false);
    for (std::size_t j = 0; j + 2 < t.size(); ++j) s.nonlinear.push_back(true);
  }
  s.center = raw.colwise().mean();
  s.scale.resize(k);
  for (Eigen::Index j = 0; j < k; ++j) {
    const double sd = std::sqrt((raw.col(j).array() - s.center(j)).square().mean());
    s.scale(j) = sd > 1e-12 ? sd : 1.0;
  }
  s.design.resize(x.rows(), k + 1);
  s.design.col(0).setOnes();
  for (Eigen::Index j = 0; j < k; ++j)
    s.design.col(j + 1) = (raw.col(j).array() - s.center(j)) / s.scale(j);
  return s;
}

Eigen::VectorXd ridge_solve(const Eigen::MatrixXd& design, const Eigen::VectorXd& y, const std::vector<bool>& nonlinear,
                            double penalty) {
  const auto k = design.cols();
  Eigen::MatrixXd g = design.transpose() * design;
  const double rows = static_cast<double>(design.rows());
  for (Eigen::Index j = 1; j < k; ++j)
    if (nonlinear[static_cast<std::size_t>(j - 1)]) g(j, j) += penalty * rows;
  g.diagonal().array() += 1e-10 * (g.trace() / static_cast<double>(k) + 1.0);
  return g.ldlt().solve(design.transpose() * y);
}

}  // namespace

SplineRegressor::SplineRegressor(const Eigen::MatrixXd& inputs, const Eigen::VectorXd& targets, double penalty,
                                 int knots)
    : penalty_(penalty) {
  if (inputs.rows() < 1) throw SmootherError("spline regression needs data");
  if (targets.size() != inputs.rows()) throw SmootherError("targets and inputs have different lengths");
  if (penalty < 0.0) throw SmootherError("spline penalty must be nonnegative");
  SplineDesign s = build_design(inputs, knots);
  knots_ = std::move(s.knots);
  nonlinear_ = std::move(s.nonlinear);
  center_ = std::move(s.center);
  scale_ = std::move(s.scale);
  coef_ = ridge_solve(s.design, targets, nonlinear_, penalty);
}

Eigen::RowVectorXd SplineRegressor::features(const Eigen::Ref<const Eigen::VectorXd>& q) const {
  std::vector<double> f;
  raw_features(knots_, q, f);
  Eigen::RowVectorXd row(static_cast<Eigen::Index>(f.size()) + 1);
  row(0) = 1.0;
  for (std::size_t j = 0; j < f.size(); ++j) {
    const auto jj = static_cast<Eigen::Index>(j);
    row(jj + 1) = (f[j] - center_(jj)) / scale_(jj);
  }
  return row;
}

double SplineRegressor::predict(const Eigen::Ref<const Eigen::VectorXd>& q) const {
  if (q.size() != static_cast<Eigen::Index>(knots_.size())) throw SmootherError("query dimension does not match model");
  return features(q).dot(coef_);
}

Eigen::VectorXd SplineRegressor::predict_many(const Eigen::MatrixXd& queries) const {
  Eigen::VectorXd out(queries.rows());
  for (Eigen::Index i = 0; i < queries.rows(); ++i) out(i) = predict(queries.row(i).transpose());
  return out;
}

double SplineRegressor::cv_penalty(const Eigen::MatrixXd& inputs, const Eigen::VectorXd& targets,
                                   const std::vector<double>& grid, int knots, const CvConfig& cv) {
  if (grid.empty()) throw SmootherError("penalty grid is empty");
  if (grid.size() == 1) return grid.front();
  check_cv(static_cast<std::size_t>(inputs.rows()), CvConfig{cv.folds, {1.0}, cv.seed, cv.density_loss});
  const auto labels = fold_labels(static_cast<std::size_t>(inputs.rows()), cv.folds, cv.seed);
  // Knots and scaling come from the full sample; only coefficients are refit per fold.
  const SplineDesign s = build_design(inputs, knots);
  std::vector<std::pair<Eigen::MatrixXd, Eigen::VectorXd>> train(static_cast<std::size_t>(cv.folds));
  std::vector<std::vector<Eigen::Index>> test(static_cast<std::size_t>(cv.folds));
  for (int f = 0; f < cv.folds; ++f) {
    std::vector<Eigen::Index> rows;
    for (Eigen::Index i = 0; i < inputs.rows(); ++i)
      (labels[static_cast<std::size_t>(i)] == f ? test[static_cast<std::size_t>(f)] : rows).push_back(i);
    Eigen::MatrixXd d(static_cast<Eigen::Index>(rows.size()), s.design.cols());
    Eigen::VectorXd y(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t k = 0; k < rows.size(); ++k) {
      d.row(static_cast<Eigen::Index>(k)) = s.design.row(rows[k]);
      y(static_cast<Eigen::Index>(k)) = targets(rows[k]);
    }
    train[static_cast<std::size_t>(f)] = {std::move(d), std::move(y)};
  }
  double best_score = std::numeric_limits<double>::infinity();
  double best = grid.front();
  for (double pen : grid) {
    double sse = 0.0;
    for (int f = 0; f < cv.folds; ++f) {
      const auto& [d, y] = train[static_cast<std::size_t>(f)];
      const Eigen::VectorXd b = ridge_solve(d, y, s.nonlinear, pen);
      for (auto i : test[static_cast<std::size_t>(f)]) {
        const double e = s.design.row(i).dot(b) - targets(i);
        sse += e * e;
      }
    }
    if (sse < best_score) {
      best_score = sse;
      best = pen;
    }
  }
  return best;
}

std::unique_ptr<Regressor> fit_regressor(const Eigen::MatrixXd& inputs, const Eigen::VectorXd& targets,
                                         const RegressionSpec& spec) {
  if (inputs.rows() < 1) throw SmootherError("regression needs at least one training point");
  if (spec.backend == RegressionBackend::Spline) {
    double pen = 0.0;
    if (spec.frozen)
      pen = *spec.frozen;
    else if (static_cast<Eigen::Index>(spec.cv.folds) <= inputs.rows())
      pen = SplineRegressor::cv_penalty(inputs, targets, spec.penalty_grid, spec.knots, spec.cv);
    else
      pen = spec.penalty_grid.back();
    return std::make_unique<SplineRegressor>(inputs, targets, pen, spec.knots);
  }
  const Eigen::VectorXd ref = reference_bandwidth(inputs);
  double mult = 1.0;
  if (spec.frozen) {
    mult = *spec.frozen;
  } else if (static_cast<Eigen::Index>(spec.cv.folds) <= inputs.rows()) {
    Eigen::MatrixXd t = targets;
    const Eigen::VectorXd h = cv_bandwidth(inputs, &t, spec.cv);
    mult = h(0) / ref(0);
  }
  return std::make_unique<NwRegressor>(nw_fit(inputs, targets, ref * mult), mult);
}

}  // namespace mnar::smooth
