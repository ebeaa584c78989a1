#include "mnar/logistic.hpp"

#include <algorithm>
#include <limits>
#include <stdexcept>

namespace mnar::glm {

double logistic_loglik(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const Eigen::VectorXd& w,
                       const Eigen::VectorXd& coef) {
  const Eigen::VectorXd eta = X * coef;
  double ll = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) ll += w(i) * (y(i) * eta(i) - log1pexp(eta(i)));
  return ll;
}

Eigen::VectorXd logistic_score(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const Eigen::VectorXd& w,
                               const Eigen::VectorXd& coef) {
  const Eigen::VectorXd eta = X * coef;
  Eigen::VectorXd r(eta.size());
  for (Eigen::Index i = 0; i < eta.size(); ++i) r(i) = w(i) * (y(i) - expit(eta(i)));
  return X.transpose() * r;
}

LogisticFit logistic_fit(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const Eigen::VectorXd& w,
                         const Eigen::VectorXd& start, const FitControl& ctl) {
  const auto k = X.cols();
  if (y.size() != X.rows() || w.size() != X.rows()) throw std::invalid_argument("logistic_fit: length mismatch");
  LogisticFit f;
  f.coef = start.size() == k ? start : Eigen::VectorXd::Zero(k);
  f.loglik = logistic_loglik(X, y, w, f.coef);
  Eigen::VectorXd eta, curv(X.rows()), resid(X.rows());
  for (f.iterations = 0; f.iterations < ctl.max_iter; ++f.iterations) {
    eta = X * f.coef;
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
      const double pr = expit(eta(i));
      curv(i) = w(i) * pr * (1.0 - pr);
      resid(i) = w(i) * (y(i) - pr);
    }
    const Eigen::VectorXd grad = X.transpose() * resid;
    const Eigen::MatrixXd wx = X.array().colwise() * curv.array();
    Eigen::MatrixXd info = wx.transpose() * X;
    info.diagonal().array() += 1e-12 * (1.0 + info.diagonal().maxCoeff());
    Eigen::VectorXd step = info.ldlt().solve(grad);
    if (!step.allFinite()) break;
    double scale = 1.0;
    double ll_new = logistic_loglik(X, y, w, f.coef + step);
    while (!(ll_new >= f.loglik - 1e-12 * std::abs(f.loglik)) && scale > 1e-8) {
      scale *= 0.5;
      ll_new = logistic_loglik(X, y, w, f.coef + scale * step);
    }
    f.coef += scale * step;
    f.loglik = ll_new;
    if ((scale * step).cwiseAbs().maxCoeff() < ctl.tol) {
      f.converged = true;
      ++f.iterations;
      break;
    }
  }
  return f;
}

Eigen::MatrixXd multinomial_log_probs(const Eigen::MatrixXd& X, const Eigen::MatrixXd& coef) {
  const auto n = X.rows();
  const auto m = coef.rows();
  Eigen::MatrixXd lp(n, m + 1);
  lp.col(0).setZero();
  if (m > 0) lp.rightCols(m).noalias() = X * coef.transpose();
  const Eigen::ArrayXd top = lp.rowwise().maxCoeff().array();
  Eigen::ArrayXd s = Eigen::ArrayXd::Zero(n);
  for (Eigen::Index c = 0; c <= m; ++c) s += (lp.col(c).array() - top).exp();
  const Eigen::ArrayXd lse = top + s.log();
  for (Eigen::Index c = 0; c <= m; ++c) lp.col(c).array() -= lse;
  return lp;
}

double multinomial_loglik(const Eigen::MatrixXd& X, const Eigen::VectorXi& cat, const Eigen::VectorXd& w,
                          const Eigen::MatrixXd& coef) {
  const Eigen::MatrixXd lp = multinomial_log_probs(X, coef);
  double ll = 0.0;
  for (Eigen::Index i = 0; i < X.rows(); ++i) ll += w(i) * lp(i, cat(i));
  return ll;
}

namespace {

Eigen::VectorXd score_from_probs(const Eigen::MatrixXd& X, const Eigen::VectorXi& cat, const Eigen::VectorXd& w,
                                 const Eigen::MatrixXd& pr) {
  const auto m = pr.cols() - 1, k = X.cols();
  Eigen::MatrixXd r(X.rows(), m);
  for (Eigen::Index c = 0; c < m; ++c)
    for (Eigen::Index i = 0; i < X.rows(); ++i) r(i, c) = w(i) * ((cat(i) == c + 1 ? 1.0 : 0.0) - pr(i, c + 1));
  const Eigen::MatrixXd g = X.transpose() * r;  // k x m
  return Eigen::Map<const Eigen::VectorXd>(g.data(), m * k);
}

}  // namespace

Eigen::VectorXd multinomial_score(const Eigen::MatrixXd& X, const Eigen::VectorXi& cat, const Eigen::VectorXd& w,
                                  const Eigen::MatrixXd& coef) {
  return score_from_probs(X, cat, w, multinomial_log_probs(X, coef).array().exp());
}

MultinomialFit multinomial_fit(const Eigen::MatrixXd& X, const Eigen::VectorXi& cat, int categories,
                               const Eigen::VectorXd& w, const Eigen::MatrixXd& start, const FitControl& ctl) {
  const auto k = X.cols();
  const Eigen::Index m = categories - 1;
  if (cat.size() != X.rows() || w.size() != X.rows()) throw std::invalid_argument("multinomial_fit: length mismatch");
  MultinomialFit f;
  f.coef = (start.rows() == m && start.cols() == k) ? start : Eigen::MatrixXd::Zero(m, k);
  f.loglik = multinomial_loglik(X, cat, w, f.coef);
  if (m == 0) {
    f.converged = true;
    return f;
  }
  Eigen::MatrixXd info(m * k, m * k), wx(X.rows(), k);
  Eigen::VectorXd v(X.rows());
  for (f.iterations = 0; f.iterations < ctl.max_iter; ++f.iterations) {
    const Eigen::MatrixXd pr = multinomial_log_probs(X, f.coef).array().exp();
    const Eigen::VectorXd grad = score_from_probs(X, cat, w, pr);
    for (Eigen::Index c = 0; c < m; ++c) {
      for (Eigen::Index d = c; d < m; ++d) {
        v = w.array() * pr.col(c + 1).array() * ((c == d ? 1.0 : 0.0) - pr.col(d + 1).array());
        wx = X.array().colwise() * v.array();
        Eigen::MatrixXd blk(k, k);
        blk.noalias() = wx.transpose() * X;
        info.block(c * k, d * k, k, k) = blk;
        if (d != c) info.block(d * k, c * k, k, k) = blk.transpose();
      }
    }
    info.diagonal().array() += 1e-12 * (1.0 + info.diagonal().maxCoeff());
    const Eigen::VectorXd stepv = info.ldlt().solve(grad);
    if (!stepv.allFinite()) break;
    Eigen::MatrixXd step(m, k);
    for (Eigen::Index c = 0; c < m; ++c) step.row(c) = stepv.segment(c * k, k).transpose();
    double scale = 1.0;
    double ll_new = multinomial_loglik(X, cat, w, f.coef + step);
    while (!(ll_new >= f.loglik - 1e-12 * std::abs(f.loglik)) && scale > 1e-8) {
      scale *= 0.5;
      ll_new = multinomial_loglik(X, cat, w, f.coef + scale * step);
    }
    f.coef += scale * step;
    f.loglik = ll_new;
    if ((scale * step).cwiseAbs().maxCoeff() < ctl.tol) {
      f.converged = true;
      ++f.iterations;
      break;
    }
  }
  return f;
}

}  // namespace mnar::glm
