#pragma once

#include <cmath>

#include <Eigen/Dense>

namespace mnar::glm {

struct FitControl {
  int max_iter = 100;
  double tol = 1e-10;  // on the max-abs Newton step
};

struct LogisticFit {
  Eigen::VectorXd coef;
  double loglik = 0.0;
  int iterations = 0;
  bool converged = false;
};

/// Weighted log-likelihood sum_i w_i [y_i eta_i - log(1 + e^eta_i)] with eta = X coef.
double logistic_loglik(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const Eigen::VectorXd& w,
                       const Eigen::VectorXd& coef);
Eigen::VectorXd logistic_score(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const Eigen::VectorXd& w,
                               const Eigen::VectorXd& coef);
/// Newton-Raphson with step halving; `start` may be empty.
LogisticFit logistic_fit(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const Eigen::VectorXd& w,
                         const Eigen::VectorXd& start = {}, const FitControl& ctl = {});

/// Multinomial logit with category 0 as reference. coef is (C-1) x k, one row
/// per non-reference category.
struct MultinomialFit {
  Eigen::MatrixXd coef;
  double loglik = 0.0;
  int iterations = 0;
  bool converged = false;
};

double multinomial_loglik(const Eigen::MatrixXd& X, const Eigen::VectorXi& cat, const Eigen::VectorXd& w,
                          const Eigen::MatrixXd& coef);
/// Score laid out row-major over coef: entry c*k + l is d/d coef(c, l).
Eigen::VectorXd multinomial_score(const Eigen::MatrixXd& X, const Eigen::VectorXi& cat, const Eigen::VectorXd& w,
                                  const Eigen::MatrixXd& coef);
MultinomialFit multinomial_fit(const Eigen::MatrixXd& X, const Eigen::VectorXi& cat, int categories,
                               const Eigen::VectorXd& w, const Eigen::MatrixXd& start = {},
                               const FitControl& ctl = {});

/// Row k: log P(category c | x_k) for c = 0..C-1.
Eigen::MatrixXd multinomial_log_probs(const Eigen::MatrixXd& X, const Eigen::MatrixXd& coef);

inline double log1pexp(double t) { return t > 35.0 ? t : (t < -35.0 ? std::exp(t) : std::log1p(std::exp(t))); }
inline double expit(double t) { return t >= 0 ? 1.0 / (1.0 + std::exp(-t)) : std::exp(t) / (1.0 + std::exp(t)); }

}  // namespace mnar::glm
