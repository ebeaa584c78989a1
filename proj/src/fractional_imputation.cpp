#include "mnar/fractional_imputation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <random>

#include "mnar/logistic.hpp"
#include "mnar/rng.hpp"

namespace mnar::fi {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

Eigen::Index idx(std::size_t v) { return static_cast<Eigen::Index>(v); }

// Row-level design shared by every factor; rows follow FiState::x.
struct Design {
  Eigen::MatrixXd x1;  // (1, X)
  Eigen::MatrixXd xr;  // (1, A, X)
  Eigen::VectorXd a, y;
  Eigen::VectorXi cat;
  std::vector<std::size_t> unit;
  std::array<std::vector<Eigen::Index>, 2> arm;  // rows of each arm
  std::array<Eigen::MatrixXd, 2> x1_arm;
  std::array<Eigen::VectorXd, 2> y_arm;
  // Products of every pair of xr columns, so that weighted Gram matrices over
  // any subset of those columns come out of one matrix product.
  Eigen::MatrixXd xx;
  Eigen::MatrixXi pair;
};

// Column of xr holding column c of x1.
Eigen::Index xr_col(Eigen::Index c) { return c == 0 ? 0 : c + 1; }

// Gram matrix over xr columns `cols` from the pair sums s = xx' v.
Eigen::MatrixXd gram(const Design& g, const Eigen::Ref<const Eigen::VectorXd>& s,
                     const std::vector<Eigen::Index>& cols) {
  const auto k = static_cast<Eigen::Index>(cols.size());
  Eigen::MatrixXd out(k, k);
  for (Eigen::Index i = 0; i < k; ++i)
    for (Eigen::Index j = 0; j < k; ++j) out(i, j) = s(g.pair(cols[static_cast<std::size_t>(i)], cols[static_cast<std::size_t>(j)]));
  return out;
}

std::vector<Eigen::Index> x1_cols(Eigen::Index k) {
  std::vector<Eigen::Index> cols;
  for (Eigen::Index c = 0; c < k; ++c) cols.push_back(xr_col(c));
  return cols;
}

Design make_design(const Dataset& d, const FiState& st) {
  const auto rows = idx(st.rows());
  const auto p = st.x.cols();
  Design g;
  g.x1.resize(rows, p + 1);
  g.x1.col(0).setOnes();
  g.x1.rightCols(p) = st.x;
  g.xr.resize(rows, p + 2);
  g.a.resize(rows);
  g.y.resize(rows);
  g.cat.resize(rows);
  g.unit.resize(st.rows());
  for (std::size_t i = 0; i < d.n(); ++i) {
    for (std::size_t r = st.begin[i]; r < st.begin[i + 1]; ++r) {
      g.unit[r] = i;
      g.a(idx(r)) = d.a()(idx(i));
      g.y(idx(r)) = d.y()(idx(i));
      g.cat(idx(r)) = st.unit_category(idx(i));
    }
  }
  g.xr.col(0).setOnes();
  g.xr.col(1) = g.a;
  g.xr.rightCols(p) = st.x;
  for (Eigen::Index r = 0; r < rows; ++r) g.arm[g.a(r) > 0.5 ? 1 : 0].push_back(r);
  const auto k = g.xr.cols();
  g.pair.resize(k, k);
  g.xx.resize(rows, k * (k + 1) / 2);
  int q = 0;
  for (Eigen::Index i = 0; i < k; ++i)
    for (Eigen::Index j = i; j < k; ++j, ++q) {
      g.pair(i, j) = g.pair(j, i) = q;
      g.xx.col(q) = g.xr.col(i).cwiseProduct(g.xr.col(j));
    }
  for (std::size_t a = 0; a < 2; ++a) {
    g.x1_arm[a] = g.x1(g.arm[a], Eigen::all);
    g.y_arm[a] = g.y(g.arm[a]);
  }
  return g;
}

std::vector<Pattern> categories_of(const Dataset& d, Eigen::VectorXi& unit_cat) {
  const PatternIndex pi = index_patterns(d);
  std::vector<Pattern> cats{pi.complete};
  for (const auto& pat : pi.incomplete_patterns()) cats.push_back(pat);
  std::map<Pattern, int> slot;
  for (std::size_t c = 0; c < cats.size(); ++c) slot[cats[c]] = static_cast<int>(c);
  unit_cat.resize(idx(d.n()));
  for (std::size_t i = 0; i < d.n(); ++i) unit_cat(idx(i)) = slot.at(pattern_of(d, i));
  return cats;
}

double gauss_logpdf(double v, double mean, double s2) {
  const double r = v - mean;
  return -0.5 * (kLog2Pi + std::log(s2)) - 0.5 * r * r / s2;
}

// Columns whose value can differ between the rows of one unit.
std::vector<bool> ever_missing(const Dataset& d) {
  std::vector<bool> m(d.p(), false);
  for (std::size_t i = 0; i < d.n(); ++i)
    for (std::size_t j = 0; j < d.p(); ++j)
      if (!d.observed(i, j)) m[j] = true;
  return m;
}

// Closed-form weighted Gaussian regression; returns coefficients and the MLE variance.
CovParams weighted_gaussian(const Eigen::MatrixXd& Z, const Eigen::VectorXd& t, const Eigen::VectorXd& w) {
  const Eigen::MatrixXd wz = Z.array().colwise() * w.array();
  Eigen::MatrixXd G = wz.transpose() * Z;
  G.diagonal().array() += 1e-12 * (1.0 + G.diagonal().maxCoeff());
  CovParams c;
  c.coef = G.ldlt().solve(wz.transpose() * t);
  const Eigen::VectorXd r = t - Z * c.coef;
  const double sw = w.sum();
  c.sigma2 = std::max(w.dot(r.cwiseAbs2()) / sw, 1e-12);
  return c;
}

void gaussian_rows(const Eigen::MatrixXd& Z, const Eigen::VectorXd& t, const CovParams& c, Eigen::VectorXd& out,
                   bool add) {
  const Eigen::VectorXd mean = Z * c.coef;
  const double lc = -0.5 * (kLog2Pi + std::log(c.sigma2));
  for (Eigen::Index r = 0; r < t.size(); ++r) {
    const double e = t(r) - mean(r);
    const double v = lc - 0.5 * e * e / c.sigma2;
    out(r) = add ? out(r) + v : v;
  }
}

void bernoulli_rows(const Eigen::MatrixXd& Z, const Eigen::VectorXd& t, const Eigen::VectorXd& coef,
                    Eigen::VectorXd& out) {
  const Eigen::VectorXd eta = Z * coef;
  for (Eigen::Index r = 0; r < t.size(); ++r) out(r) += t(r) * eta(r) - glm::log1pexp(eta(r));
}

Eigen::VectorXd row_loglik_design(const Design& g, const ParamModelSpec& spec, const ParamTheta& th) {
  const auto rows = g.x1.rows();
  const auto p = g.x1.cols() - 1;
  Eigen::VectorXd lf = Eigen::VectorXd::Zero(rows);
  for (Eigen::Index j = 0; j < p; ++j) {
    const auto Z = g.x1.leftCols(j + 1);
    const Eigen::VectorXd t = g.x1.col(j + 1);
    const CovParams& c = th.lambda[static_cast<std::size_t>(j)];
    if (spec.families[static_cast<std::size_t>(j)] == CovFamily::Gaussian)
      gaussian_rows(Z, t, c, lf, true);
    else
      bernoulli_rows(Z, t, c.coef, lf);
  }
  bernoulli_rows(g.x1, g.a, th.alpha, lf);
  for (int a = 0; a < 2; ++a) {
    const Eigen::VectorXd mean = g.x1 * th.beta[static_cast<std::size_t>(a)];
    const double s2 = th.sigma2[static_cast<std::size_t>(a)];
    for (Eigen::Index r = 0; r < rows; ++r)
      if (static_cast<int>(g.a(r)) == a) lf(r) += gauss_logpdf(g.y(r), mean(r), s2);
  }
  if (th.eta.rows() > 0) {
    const Eigen::MatrixXd lp = glm::multinomial_log_probs(g.xr, th.eta);
    for (Eigen::Index r = 0; r < rows; ++r) lf(r) += lp(r, g.cat(r));
  }
  return lf;
}

// Fractional weights and the observed-data log-likelihood from row log densities.
double e_step(const FiState& st, const Eigen::VectorXd& lf, const Eigen::VectorXd& u, Eigen::VectorXd& omega) {
  omega.resize(lf.size());
  const double logM = std::log(static_cast<double>(std::max<std::size_t>(st.M, 1)));
  double ll = 0.0;
  for (std::size_t i = 0; i + 1 < st.begin.size(); ++i) {
    const std::size_t b = st.begin[i], e = st.begin[i + 1];
    if (e - b == 1 && st.unit_category(idx(i)) == 0) {
      omega(idx(b)) = 1.0;
      ll += u(idx(i)) * lf(idx(b));
      continue;
    }
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t r = b; r < e; ++r) {
      omega(idx(r)) = std::log(st.mult(idx(r))) + lf(idx(r)) - st.log_h(idx(r));
      top = std::max(top, omega(idx(r)));
    }
    double s = 0.0;
    for (std::size_t r = b; r < e; ++r) s += std::exp(omega(idx(r)) - top);
    const double lse = top + std::log(s);
    for (std::size_t r = b; r < e; ++r) omega(idx(r)) = std::exp(omega(idx(r)) - lse);
    ll += u(idx(i)) * (lse - logM);
  }
  return ll;
}

Eigen::VectorXd row_weights(const Design& g, const Eigen::VectorXd& omega, const Eigen::VectorXd& u) {
  Eigen::VectorXd w(omega.size());
  for (Eigen::Index r = 0; r < w.size(); ++r) w(r) = omega(r) * u(idx(g.unit[static_cast<std::size_t>(r)]));
  return w;
}

// Draws the missing columns of every incomplete unit from the triangular
// covariate model, column by column, given the values available so far.
void draw_proposal(const Dataset& d, const ParamModelSpec& spec, const std::vector<CovParams>& lambda, std::size_t M,
                   Rng& rng, FiState& st) {
  const std::size_t p = d.p();
  std::vector<Eigen::RowVectorXd> rows;
  std::vector<double> mult, lh;
  std::vector<std::size_t> begin{0};
  std::normal_distribution<double> z(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Eigen::VectorXd zrow(idx(p) + 1);
  for (std::size_t i = 0; i < d.n(); ++i) {
    Eigen::RowVectorXd obs = d.x_values().row(idx(i));
    if (d.complete_case(i)) {
      rows.push_back(obs);
      mult.push_back(1.0);
      lh.push_back(0.0);
      begin.push_back(rows.size());
      continue;
    }
    std::vector<std::pair<Eigen::RowVectorXd, double>> draws;
    draws.reserve(M);
    for (std::size_t m = 0; m < M; ++m) {
      Eigen::RowVectorXd x = obs;
      double l = 0.0;
      zrow(0) = 1.0;
      for (std::size_t j = 0; j < p; ++j) {
        if (!d.observed(i, j)) {
          const CovParams& c = lambda[j];
          const double eta = zrow.head(idx(j) + 1).dot(c.coef);
          if (spec.families[j] == CovFamily::Gaussian) {
            const double v = eta + std::sqrt(c.sigma2) * z(rng);
            x(idx(j)) = v;
            l += gauss_logpdf(v, eta, c.sigma2);
          } else {
            const double pr = glm::expit(eta);
            const bool one = unif(rng) < pr;
            x(idx(j)) = one ? 1.0 : 0.0;
            l += one ? -glm::log1pexp(-eta) : -glm::log1pexp(eta);
          }
        }
        zrow(idx(j) + 1) = x(idx(j));
      }
      draws.emplace_back(std::move(x), l);
    }
    std::sort(draws.begin(), draws.end(), [](const auto& s, const auto& t) {
      return std::lexicographical_compare(s.first.data(), s.first.data() + s.first.size(), t.first.data(),
                                          t.first.data() + t.first.size());
    });
    for (std::size_t m = 0; m < draws.size(); ++m) {
      if (!rows.empty() && rows.size() > begin.back() && rows.back() == draws[m].first) {
        mult.back() += 1.0;
        continue;
      }
      rows.push_back(draws[m].first);
      mult.push_back(1.0);
      lh.push_back(draws[m].second);
    }
    begin.push_back(rows.size());
  }
  st.M = M;
  st.begin = std::move(begin);
  st.x.resize(idx(rows.size()), idx(p));
  for (std::size_t r = 0; r < rows.size(); ++r) st.x.row(idx(r)) = rows[r];
  st.mult = Eigen::Map<Eigen::VectorXd>(mult.data(), idx(mult.size()));
  st.log_h = Eigen::Map<Eigen::VectorXd>(lh.data(), idx(lh.size()));
  st.omega = Eigen::VectorXd::Ones(idx(rows.size()));
}

// Share of incomplete units whose fractional weights have effective size below ess_min.
double degenerate_share(const FiState& st, double ess_min) {
  std::size_t incomplete = 0, bad = 0;
  for (std::size_t i = 0; i + 1 < st.begin.size(); ++i) {
    if (st.unit_category(idx(i)) == 0) continue;
    ++incomplete;
    double s = 0.0;
    for (std::size_t r = st.begin[i]; r < st.begin[i + 1]; ++r) s += st.omega(idx(r)) * st.omega(idx(r)) / st.mult(idx(r));
    if (1.0 / s < ess_min) ++bad;
  }
  return incomplete ? static_cast<double>(bad) / static_cast<double>(incomplete) : 0.0;
}

// Row log densities of one logistic factor with the fitted probabilities.
struct BernRows {
  Eigen::ArrayXd logf, pr;
};

void bern_eval(const Eigen::Ref<const Eigen::MatrixXd>& Z, const Eigen::VectorXd& t, const Eigen::VectorXd& coef,
               BernRows& out) {
  const Eigen::ArrayXd eta = (Z * coef).array();
  const Eigen::ArrayXd e = (-eta.abs()).exp();
  out.logf = t.array() * eta - eta.max(0.0) - (1.0 + e).log();
  out.pr = (eta >= 0.0).select(1.0 / (1.0 + e), e / (1.0 + e));
}

// One Newton step with step halving on sum_i w_i logf_i; `cur` holds the rows at `coef`.
// `info` is the weighted information matrix at `coef`.
void bern_step(const Eigen::Ref<const Eigen::MatrixXd>& Z, const Eigen::VectorXd& t, const Eigen::VectorXd& w,
               Eigen::MatrixXd info, Eigen::VectorXd& coef, BernRows& cur) {
  const double q0 = (w.array() * cur.logf).sum();
  const Eigen::VectorXd grad = Z.transpose() * (w.array() * (t.array() - cur.pr)).matrix();
  info.diagonal().array() += 1e-12 * (1.0 + info.diagonal().maxCoeff());
  const Eigen::VectorXd step = info.ldlt().solve(grad);
  if (!step.allFinite()) return;
  BernRows next;
  for (double scale = 1.0; scale > 1e-8; scale *= 0.5) {
    const Eigen::VectorXd cand = coef + scale * step;
    bern_eval(Z, t, cand, next);
    if ((w.array() * next.logf).sum() >= q0 - 1e-12 * std::abs(q0)) {
      coef = cand;
      cur = std::move(next);
      return;
    }
  }
}

struct MultiRows {
  Eigen::ArrayXd logf;
  Eigen::MatrixXd pr;  // rows x categories
};

void multi_eval(const Eigen::MatrixXd& X, const Eigen::VectorXi& cat, const Eigen::MatrixXd& coef, MultiRows& out) {
  const auto n = X.rows();
  const auto m = coef.rows();
  Eigen::MatrixXd lin(n, m + 1);
  lin.col(0).setZero();
  lin.rightCols(m).noalias() = X * coef.transpose();
  const Eigen::ArrayXd top = lin.rowwise().maxCoeff().array();
  out.pr.resize(n, m + 1);
  Eigen::ArrayXd s = Eigen::ArrayXd::Zero(n);
  for (Eigen::Index c = 0; c <= m; ++c) {
    out.pr.col(c).array() = (lin.col(c).array() - top).exp();
    s += out.pr.col(c).array();
  }
  for (Eigen::Index c = 0; c <= m; ++c) out.pr.col(c).array() /= s;
  const Eigen::ArrayXd lse = top + s.log();
  out.logf.resize(n);
  for (Eigen::Index r = 0; r < n; ++r) out.logf(r) = lin(r, cat(r)) - lse(r);
}

// `info` is the weighted information matrix at `coef`, blocks ordered by category.
void multi_step(const Eigen::MatrixXd& X, const Eigen::VectorXi& cat, const Eigen::VectorXd& w, Eigen::MatrixXd info,
                Eigen::MatrixXd& coef, MultiRows& cur) {
  const auto m = coef.rows(), k = X.cols();
  const double q0 = (w.array() * cur.logf).sum();
  Eigen::MatrixXd resid(X.rows(), m);
  for (Eigen::Index c = 0; c < m; ++c)
    for (Eigen::Index r = 0; r < X.rows(); ++r) resid(r, c) = w(r) * ((cat(r) == c + 1 ? 1.0 : 0.0) - cur.pr(r, c + 1));
  const Eigen::MatrixXd g = X.transpose() * resid;  // k x m
  const Eigen::VectorXd grad = Eigen::Map<const Eigen::VectorXd>(g.data(), m * k);
  info.diagonal().array() += 1e-12 * (1.0 + info.diagonal().maxCoeff());
  const Eigen::VectorXd stepv = info.ldlt().solve(grad);
  if (!stepv.allFinite()) return;
  Eigen::MatrixXd step(m, k);
  for (Eigen::Index c = 0; c < m; ++c) step.row(c) = stepv.segment(c * k, k).transpose();
  MultiRows next;
  for (double scale = 1.0; scale > 1e-8; scale *= 0.5) {
    const Eigen::MatrixXd cand = coef + scale * step;
    multi_eval(X, cat, cand, next);
    if ((w.array() * next.logf).sum() >= q0 - 1e-12 * std::abs(q0)) {
      coef = cand;
      cur = std::move(next);
      return;
    }
  }
}

Eigen::ArrayXd gauss_eval(const Eigen::Ref<const Eigen::MatrixXd>& Z, const Eigen::VectorXd& t,
                          const Eigen::VectorXd& coef, double s2) {
  const Eigen::ArrayXd e = t.array() - (Z * coef).array();
  return -0.5 * (kLog2Pi + std::log(s2)) - 0.5 * e.square() / s2;
}

// Per-row log densities of every factor at the current parameter value. The
// E-step, the ascent check of the M-step and the next Newton step all reuse
// one evaluation.
class RowModel {
 public:
  RowModel(const Design& g, const ParamModelSpec& spec) : g_(&g), spec_(&spec) {}

  void set(const ParamTheta& th) {
    const Design& g = *g_;
    const auto p = g.x1.cols() - 1;
    cov_.resize(static_cast<std::size_t>(p));
    for (Eigen::Index j = 0; j < p; ++j) eval_cov(th, j);
    bern_eval(g.x1, g.a, th.alpha, treat_);
    for (std::size_t a = 0; a < 2; ++a) eval_outcome(th, a);
    if (th.eta.rows() > 0) multi_eval(g.xr, g.cat, th.eta, miss_);
  }

  // One M-step starting from th (the value the rows were last evaluated at).
  // The full version maximizes every factor; otherwise logistic factors take a
  // single Newton step, which keeps the ascent property and the fixed point.
  void m_step(const Eigen::VectorXd& w, const std::vector<bool>& varies, bool full, ParamTheta& th) {
    const Design& g = *g_;
    const auto p = g.x1.cols() - 1;
    const auto m = th.eta.rows();
    // Information weights of every Newton step, turned into Gram matrices together.
    std::vector<Eigen::Index> bern;
    if (!full)
      for (Eigen::Index j = 0; j < p; ++j)
        if (varies[static_cast<std::size_t>(j)] && spec_->families[static_cast<std::size_t>(j)] != CovFamily::Gaussian)
          bern.push_back(j);
    const auto nb = static_cast<Eigen::Index>(bern.size());
    Eigen::MatrixXd s;
    if (!full) {
      Eigen::MatrixXd v(g.xr.rows(), nb + 1 + m * (m + 1) / 2);
      for (Eigen::Index b = 0; b < nb; ++b) {
        const BernRows& c = cov_[static_cast<std::size_t>(bern[static_cast<std::size_t>(b)])];
        v.col(b) = (w.array() * c.pr * (1.0 - c.pr)).matrix();
      }
      v.col(nb) = (w.array() * treat_.pr * (1.0 - treat_.pr)).matrix();
      Eigen::Index col = nb + 1;
      for (Eigen::Index c = 0; c < m; ++c)
        for (Eigen::Index e = c; e < m; ++e, ++col)
          v.col(col) = (w.array() * miss_.pr.col(c + 1).array() *
                        ((c == e ? 1.0 : 0.0) - miss_.pr.col(e + 1).array())).matrix();
      s.noalias() = g.xx.transpose() * v;
    }
    for (Eigen::Index j = 0; j < p; ++j) {
      const auto js = static_cast<std::size_t>(j);
      if (!full && !varies[js]) continue;
      const auto Z = g.x1.leftCols(j + 1);
      CovParams& c = th.lambda[js];
      if (spec_->families[js] == CovFamily::Gaussian) {
        c = weighted_gaussian(Z, g.x1.col(j + 1), w);
        eval_cov(th, j);
      } else if (full) {
        c.coef = glm::logistic_fit(Z, g.x1.col(j + 1), w, c.coef).coef;
        eval_cov(th, j);
      } else {
        const auto b = std::find(bern.begin(), bern.end(), j) - bern.begin();
        bern_step(Z, g.x1.col(j + 1), w, gram(g, s.col(b), x1_cols(j + 1)), c.coef, cov_[js]);
      }
    }
    if (full) {
      th.alpha = glm::logistic_fit(g.x1, g.a, w, th.alpha).coef;
      bern_eval(g.x1, g.a, th.alpha, treat_);
    } else {
      bern_step(g.x1, g.a, w, gram(g, s.col(nb), x1_cols(p + 1)), th.alpha, treat_);
    }
    for (std::size_t a = 0; a < 2; ++a) {
      const CovParams c = weighted_gaussian(g.x1_arm[a], g.y_arm[a], w(g.arm[a]));
      th.beta[a] = c.coef;
      th.sigma2[a] = c.sigma2;
      eval_outcome(th, a);
    }
    if (m > 0) {
      if (full) {
        th.eta = glm::multinomial_fit(g.xr, g.cat, static_cast<int>(m) + 1, w, th.eta).coef;
        multi_eval(g.xr, g.cat, th.eta, miss_);
      } else {
        const auto k = g.xr.cols();
        std::vector<Eigen::Index> all(static_cast<std::size_t>(k));
        for (Eigen::Index c = 0; c < k; ++c) all[static_cast<std::size_t>(c)] = c;
        Eigen::MatrixXd info(m * k, m * k);
        Eigen::Index col = nb + 1;
        for (Eigen::Index c = 0; c < m; ++c)
          for (Eigen::Index e = c; e < m; ++e, ++col) {
            info.block(c * k, e * k, k, k) = gram(g, s.col(col), all);
            if (e != c) info.block(e * k, c * k, k, k) = info.block(c * k, e * k, k, k);
          }
        multi_step(g.xr, g.cat, w, std::move(info), th.eta, miss_);
      }
    }
  }

  Eigen::VectorXd total() const {
    const Design& g = *g_;
    Eigen::ArrayXd lf = treat_.logf;
    for (const auto& c : cov_) lf += c.logf;
    for (std::size_t a = 0; a < 2; ++a) lf(g.arm[a]) += out_[a];
    if (miss_.logf.size() == lf.size()) lf += miss_.logf;
    return lf.matrix();
  }

 private:
  void eval_cov(const ParamTheta& th, Eigen::Index j) {
    const Design& g = *g_;
    const auto js = static_cast<std::size_t>(j);
    const CovParams& c = th.lambda[js];
    if (spec_->families[js] == CovFamily::Gaussian)
      cov_[js].logf = gauss_eval(g.x1.leftCols(j + 1), g.x1.col(j + 1), c.coef, c.sigma2);
    else
      bern_eval(g.x1.leftCols(j + 1), g.x1.col(j + 1), c.coef, cov_[js]);
  }

  void eval_outcome(const ParamTheta& th, std::size_t a) {
    out_[a] = gauss_eval(g_->x1_arm[a], g_->y_arm[a], th.beta[a], th.sigma2[a]);
  }

  const Design* g_;
  const ParamModelSpec* spec_;
  std::vector<BernRows> cov_;
  BernRows treat_;
  std::array<Eigen::ArrayXd, 2> out_;
  MultiRows miss_;
};

// Inverse of ParamTheta::flatten for a theta of the same shape.
void unflatten(const Eigen::VectorXd& v, ParamTheta& th) {
  Eigen::Index k = 0;
  auto take_into = [&](double* dst, Eigen::Index len) {
    for (Eigen::Index i = 0; i < len; ++i) dst[i] = v(k++);
  };
  take_into(th.alpha.data(), th.alpha.size());
  for (std::size_t a = 0; a < 2; ++a) {
    take_into(th.beta[a].data(), th.beta[a].size());
    th.sigma2[a] = v(k++);
  }
  for (Eigen::Index r = 0; r < th.eta.rows(); ++r)
    for (Eigen::Index c = 0; c < th.eta.cols(); ++c) th.eta(r, c) = v(k++);
  for (auto& l : th.lambda) {
    take_into(l.coef.data(), l.coef.size());
    l.sigma2 = v(k++);
  }
}

bool admissible(const ParamTheta& th) {
  if (!th.flatten().allFinite()) return false;
  if (th.sigma2[0] <= 0.0 || th.sigma2[1] <= 0.0) return false;
  for (const auto& l : th.lambda)
    if (l.sigma2 <= 0.0) return false;
  return true;
}

}  // namespace

ParamModelSpec ParamModelSpec::infer(const Dataset& d) {
  ParamModelSpec s;
  for (std::size_t j = 0; j < d.p(); ++j) {
    bool binary = true;
    for (std::size_t i = 0; i < d.n() && binary; ++i)
      if (d.observed(i, j)) {
        const double v = d.x_values()(idx(i), idx(j));
        binary = v == 0.0 || v == 1.0;
      }
    s.families.push_back(binary ? CovFamily::Bernoulli : CovFamily::Gaussian);
  }
  return s;
}

Eigen::VectorXd ParamTheta::flatten() const {
  std::vector<double> v(alpha.data(), alpha.data() + alpha.size());
  for (int a = 0; a < 2; ++a) {
    const auto& b = beta[static_cast<std::size_t>(a)];
    v.insert(v.end(), b.data(), b.data() + b.size());
    v.push_back(sigma2[static_cast<std::size_t>(a)]);
  }
  for (Eigen::Index r = 0; r < eta.rows(); ++r)
    for (Eigen::Index c = 0; c < eta.cols(); ++c) v.push_back(eta(r, c));
  for (const auto& l : lambda) {
    v.insert(v.end(), l.coef.data(), l.coef.data() + l.coef.size());
    v.push_back(l.sigma2);
  }
  return Eigen::Map<Eigen::VectorXd>(v.data(), idx(v.size()));
}

ParamTheta complete_case_theta(const Dataset& d, const ParamModelSpec& spec, const std::vector<Pattern>& categories) {
  std::vector<Eigen::Index> cc;
  for (std::size_t i = 0; i < d.n(); ++i)
    if (d.complete_case(i)) cc.push_back(idx(i));
  const auto p = idx(d.p());
  if (cc.size() < static_cast<std::size_t>(p) + 2) throw FiError("too few complete cases to initialize the model");
  Eigen::MatrixXd x1(idx(cc.size()), p + 1);
  Eigen::VectorXd a(idx(cc.size())), y(idx(cc.size()));
  for (std::size_t k = 0; k < cc.size(); ++k) {
    x1(idx(k), 0) = 1.0;
    x1.row(idx(k)).tail(p) = d.x_values().row(cc[k]);
    a(idx(k)) = d.a()(cc[k]);
    y(idx(k)) = d.y()(cc[k]);
  }
  const Eigen::VectorXd ones = Eigen::VectorXd::Ones(x1.rows());
  ParamTheta th;
  th.lambda.resize(d.p());
  for (Eigen::Index j = 0; j < p; ++j) {
    const Eigen::MatrixXd Z = x1.leftCols(j + 1);
    const Eigen::VectorXd t = x1.col(j + 1);
    if (spec.families[static_cast<std::size_t>(j)] == CovFamily::Gaussian)
      th.lambda[static_cast<std::size_t>(j)] = weighted_gaussian(Z, t, ones);
    else
      th.lambda[static_cast<std::size_t>(j)].coef = glm::logistic_fit(Z, t, ones).coef;
  }
  th.alpha = glm::logistic_fit(x1, a, ones).coef;
  for (int arm = 0; arm < 2; ++arm) {
    std::vector<Eigen::Index> rows;
    for (Eigen::Index k = 0; k < a.size(); ++k)
      if (static_cast<int>(a(k)) == arm) rows.push_back(k);
    if (rows.size() < static_cast<std::size_t>(p) + 2)
      throw FiError("too few complete cases in arm " + std::to_string(arm) + " to initialize the outcome model");
    const CovParams c = weighted_gaussian(x1(rows, Eigen::all), y(rows), Eigen::VectorXd::Ones(idx(rows.size())));
    th.beta[static_cast<std::size_t>(arm)] = c.coef;
    th.sigma2[static_cast<std::size_t>(arm)] = c.sigma2;
  }
  // Missingness: intercept and treatment effect fitted on all units, covariate slopes start at zero.
  const auto C = static_cast<int>(categories.size());
  th.eta = Eigen::MatrixXd::Zero(C - 1, p + 2);
  if (C > 1) {
    Eigen::VectorXi cat;
    categories_of(d, cat);
    Eigen::MatrixXd xa(idx(d.n()), 2);
    xa.col(0).setOnes();
    for (std::size_t i = 0; i < d.n(); ++i) xa(idx(i), 1) = d.a()(idx(i));
    const auto f = glm::multinomial_fit(xa, cat, C, Eigen::VectorXd::Ones(idx(d.n())));
    th.eta.leftCols(2) = f.coef;
  }
  return th;
}

FiState state_from_rows(const Dataset& d, const Eigen::MatrixXd& full_x) {
  if (static_cast<std::size_t>(full_x.rows()) != d.n() || static_cast<std::size_t>(full_x.cols()) != d.p())
    throw FiError("full covariate table has the wrong shape");
  FiState st;
  st.M = 1;
  st.categories = categories_of(d, st.unit_category);
  st.begin.resize(d.n() + 1);
  std::iota(st.begin.begin(), st.begin.end(), std::size_t{0});
  st.x = full_x;
  st.mult = Eigen::VectorXd::Ones(idx(d.n()));
  st.log_h = Eigen::VectorXd::Zero(idx(d.n()));
  st.omega = Eigen::VectorXd::Ones(idx(d.n()));
  return st;
}

void run_em(const Dataset& d, const ParamModelSpec& spec, FiState& st, const Eigen::VectorXd& u,
            const FiOptions& opts) {
  if (spec.families.size() != d.p()) throw FiError("model specification does not match the covariates");
  const std::vector<bool> missing = ever_missing(d);
  std::vector<bool> varies(d.p(), false);
  for (std::size_t j = 0; j < d.p(); ++j) varies[j] = (j > 0 && varies[j - 1]) || missing[j];
  const bool any_missing = std::any_of(missing.begin(), missing.end(), [](bool b) { return b; });

  Design g = make_design(d, st);
  RowModel model(g, spec);
  auto change = [](const ParamTheta& x, const ParamTheta& y) {
    return (x.flatten() - y.flatten()).cwiseAbs().maxCoeff();
  };
  // EM map from t, whose rows are in `model` and fractional weights in `omega`;
  // returns the max-abs parameter change and leaves t, model, omega and ll at the image.
  double ll = 0.0;
  auto em_step = [&](ParamTheta& t, Eigen::VectorXd& omega) {
    ParamTheta next = t;
    model.m_step(row_weights(g, omega, u), varies, st.iterations == 0, next);
    ++st.iterations;
    if (!next.flatten().allFinite()) throw FiError("fractional imputation produced non-finite parameters");
    const double ch = change(next, t);
    t = std::move(next);
    ll = e_step(st, model.total(), u, omega);
    return ch;
  };

  ParamTheta th = st.theta;
  st.iterations = 0;
  st.converged = false;
  st.likelihood_stop = false;
  model.set(th);
  ll = e_step(st, model.total(), u, st.omega);
  st.loglik_trace.assign(1, ll);
  int refreshes = 0;
  // Squared extrapolation over pairs of EM maps with an adaptive step bound.
  // The trace holds the log-likelihood after each cycle; an extrapolated point
  // is kept only when it is at least as good as the start of its cycle.
  double step_max = 1.0;
  constexpr double kStepFactor = 4.0;
  // A parameter can run off to infinity along a direction the likelihood no
  // longer sees; stop once the log-likelihood has stalled for a few cycles.
  constexpr double kFlatGain = 1e-10;
  constexpr int kFlatCycles = 3;
  int flat = 0;
  auto stalled = [&](double before, double after) {
    flat = (after - before <= kFlatGain * std::max(1.0, std::abs(after))) ? flat + 1 : 0;
    return flat >= kFlatCycles;
  };
  st.cycles = 0;
  while (st.cycles < opts.max_iter) {
    ++st.cycles;
    const double ll0 = st.loglik_trace.back();
    const Eigen::VectorXd v0 = th.flatten();
    if (em_step(th, st.omega) < opts.tol || !any_missing) {
      st.loglik_trace.push_back(ll);
      st.converged = true;
      break;
    }
    // A single draw per unit always has effective size one, so there is nothing to regenerate.
    if (st.M > 1 && refreshes < opts.max_refresh && degenerate_share(st, opts.ess_min) > opts.ess_fraction) {
      st.loglik_trace.push_back(ll);
      Rng rng = stream_rng(opts.seed, 0xD4A5ULL + static_cast<std::uint64_t>(refreshes));
      draw_proposal(d, spec, th.lambda, st.M, rng, st);
      g = make_design(d, st);
      model.set(th);
      ++refreshes;
      flat = 0;
      st.refresh_at.push_back(st.loglik_trace.size());
      ll = e_step(st, model.total(), u, st.omega);
      st.loglik_trace.push_back(ll);
      continue;
    }
    const Eigen::VectorXd v1 = th.flatten();
    if (em_step(th, st.omega) < opts.tol) {
      st.loglik_trace.push_back(ll);
      st.converged = true;
      break;
    }
    const double ll2 = ll;
    const Eigen::VectorXd v2 = th.flatten();
    const Eigen::VectorXd r = v1 - v0, v = v2 - 2.0 * v1 + v0;
    const double alpha = std::clamp(r.norm() / v.norm(), 1.0, step_max);
    if (alpha == step_max) step_max *= kStepFactor;
    if (!(alpha > 1.0)) {
      st.loglik_trace.push_back(ll2);
      if (stalled(ll0, ll2)) {
        st.converged = st.likelihood_stop = true;
        break;
      }
      continue;
    }
    ParamTheta ext = th;
    unflatten(v0 + 2.0 * alpha * r + alpha * alpha * v, ext);
    bool accepted = false;
    if (admissible(ext)) {
      const RowModel saved_model = model;
      const ParamTheta th2 = th;
      const Eigen::VectorXd omega2 = st.omega;
      model.set(ext);
      e_step(st, model.total(), u, st.omega);
      th = ext;
      em_step(th, st.omega);
      accepted = admissible(th) && ll >= ll0;
      if (!accepted) {
        model = saved_model;
        th = th2;
        st.omega = omega2;
        ll = ll2;
      }
    }
    if (!accepted) step_max = std::max(1.0, alpha / kStepFactor);
    st.loglik_trace.push_back(ll);
    if (stalled(ll0, ll)) {
      st.converged = st.likelihood_stop = true;
      break;
    }
  }
  st.theta = th;
  if (!st.converged)
    throw FiError("fractional imputation did not converge in " + std::to_string(opts.max_iter) +
                  " accelerated iterations; last log-likelihood " + std::to_string(st.loglik_trace.back()));
}

FiResult fit_mle_fractional(const Dataset& d, const ParamModelSpec& spec, const FiOptions& opts) {
  if (spec.families.size() != d.p()) throw FiError("model specification does not match the covariates");
  if (opts.M < 1) throw FiError("at least one imputation per unit is required");
  FiState st;
  st.categories = categories_of(d, st.unit_category);
  st.theta = complete_case_theta(d, spec, st.categories);
  Rng rng = stream_rng(opts.seed, 0xF1ULL);
  draw_proposal(d, spec, st.theta.lambda, opts.M, rng, st);
  run_em(d, spec, st, Eigen::VectorXd::Ones(idx(d.n())), opts);
  return FiResult{st.theta, std::move(st)};
}

FiResult refit_weighted(const Dataset& d, const ParamModelSpec& spec, const FiState& base,
                        const Eigen::VectorXd& unit_weight, const FiOptions& opts) {
  if (static_cast<std::size_t>(unit_weight.size()) != d.n()) throw FiError("unit weights have the wrong length");
  FiState st = base;
  st.refresh_at.clear();
  run_em(d, spec, st, unit_weight, opts);
  return FiResult{st.theta, std::move(st)};
}

EstimateResult param_tau(const ParamTheta& theta, const Dataset& d, const FiState& st, const Eigen::VectorXd* u) {
  const Eigen::VectorXd delta = theta.beta[1] - theta.beta[0];
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < d.n(); ++i) {
    const double ui = u ? (*u)(idx(i)) : 1.0;
    double s = 0.0;
    for (std::size_t r = st.begin[i]; r < st.begin[i + 1]; ++r)
      s += st.omega(idx(r)) * (delta(0) + st.x.row(idx(r)).dot(delta.tail(delta.size() - 1)));
    num += ui * s;
    den += ui;
  }
  EstimateResult res;
  res.method = "para";
  res.estimate = num / den;
  res.diagnostics["iterations"] = st.iterations;
  res.diagnostics["cycles"] = st.cycles;
  res.diagnostics["converged"] = st.converged;
  res.diagnostics["likelihood_stop"] = st.likelihood_stop;
  res.diagnostics["refreshes"] = st.refresh_at.size();
  res.diagnostics["M"] = st.M;
  res.diagnostics["rows"] = st.rows();
  if (!st.loglik_trace.empty()) res.diagnostics["observed_loglik"] = st.loglik_trace.back();
  return res;
}

Eigen::VectorXd row_loglik(const Dataset& d, const ParamModelSpec& spec, const FiState& st, const ParamTheta& theta) {
  return row_loglik_design(make_design(d, st), spec, theta);
}

double observed_loglik(const Dataset& d, const ParamModelSpec& spec, const FiState& st, const ParamTheta& theta,
                       const Eigen::VectorXd& u) {
  Eigen::VectorXd omega;
  return e_step(st, row_loglik(d, spec, st, theta), u, omega);
}

std::vector<Factor> factors(const ParamModelSpec& spec, const FiState& st) {
  std::vector<Factor> f;
  for (std::size_t j = 0; j < spec.families.size(); ++j) f.push_back({Factor::Kind::Covariate, j});
  f.push_back({Factor::Kind::Treatment, 0});
  f.push_back({Factor::Kind::Outcome, 0});
  f.push_back({Factor::Kind::Outcome, 1});
  if (st.categories.size() > 1) f.push_back({Factor::Kind::Missingness, 0});
  return f;
}

std::string factor_name(const Factor& f) {
  switch (f.kind) {
    case Factor::Kind::Covariate:
      return "covariate x" + std::to_string(f.index + 1);
    case Factor::Kind::Treatment:
      return "treatment";
    case Factor::Kind::Outcome:
      return "outcome arm " + std::to_string(f.index);
    case Factor::Kind::Missingness:
      return "missingness";
  }
  return "";
}

Eigen::VectorXd factor_params(const ParamTheta& th, const Factor& f) {
  auto with_var = [](const Eigen::VectorXd& c, double s2) {
    Eigen::VectorXd v(c.size() + 1);
    v << c, s2;
    return v;
  };
  switch (f.kind) {
    case Factor::Kind::Covariate: {
      const auto& c = th.lambda[f.index];
      return with_var(c.coef, c.sigma2);
    }
    case Factor::Kind::Treatment:
      return th.alpha;
    case Factor::Kind::Outcome:
      return with_var(th.beta[f.index], th.sigma2[f.index]);
    case Factor::Kind::Missingness: {
      Eigen::VectorXd v(th.eta.size());
      for (Eigen::Index r = 0; r < th.eta.rows(); ++r) v.segment(r * th.eta.cols(), th.eta.cols()) = th.eta.row(r).transpose();
      return v;
    }
  }
  return {};
}

void set_factor_params(ParamTheta& th, const Factor& f, const Eigen::VectorXd& v) {
  switch (f.kind) {
    case Factor::Kind::Covariate: {
      auto& c = th.lambda[f.index];
      c.coef = v.head(v.size() - 1);
      c.sigma2 = v(v.size() - 1);
      return;
    }
    case Factor::Kind::Treatment:
      th.alpha = v;
      return;
    case Factor::Kind::Outcome:
      th.beta[f.index] = v.head(v.size() - 1);
      th.sigma2[f.index] = v(v.size() - 1);
      return;
    case Factor::Kind::Missingness:
      for (Eigen::Index r = 0; r < th.eta.rows(); ++r) th.eta.row(r) = v.segment(r * th.eta.cols(), th.eta.cols()).transpose();
      return;
  }
}

namespace {

// Gaussian factor log-likelihood and score in (coef, sigma2).
std::pair<double, Eigen::VectorXd> gaussian_factor(const Eigen::MatrixXd& Z, const Eigen::VectorXd& t,
                                                   const Eigen::VectorXd& w, const Eigen::VectorXd& coef, double s2) {
  const Eigen::VectorXd r = t - Z * coef;
  const double sw = w.sum();
  const double rss = w.dot(r.cwiseAbs2());
  const double ll = -0.5 * sw * (kLog2Pi + std::log(s2)) - 0.5 * rss / s2;
  Eigen::VectorXd g(coef.size() + 1);
  g.head(coef.size()) = Z.transpose() * w.cwiseProduct(r) / s2;
  g(coef.size()) = -0.5 * sw / s2 + 0.5 * rss / (s2 * s2);
  return {ll, g};
}

std::pair<double, Eigen::VectorXd> factor_eval(const Dataset& d, const ParamModelSpec& spec, const FiState& st,
                                               const ParamTheta& th, const Factor& f, const Eigen::VectorXd& u,
                                               bool want_score) {
  const Design g = make_design(d, st);
  const Eigen::VectorXd w = row_weights(g, st.omega, u);
  switch (f.kind) {
    case Factor::Kind::Covariate: {
      const auto j = idx(f.index);
      const Eigen::MatrixXd Z = g.x1.leftCols(j + 1);
      const Eigen::VectorXd t = g.x1.col(j + 1);
      const auto& c = th.lambda[f.index];
      if (spec.families[f.index] == CovFamily::Gaussian) return gaussian_factor(Z, t, w, c.coef, c.sigma2);
      // Bernoulli columns carry a placeholder variance with zero score.
      Eigen::VectorXd s(c.coef.size() + 1);
      s << (want_score ? glm::logistic_score(Z, t, w, c.coef) : Eigen::VectorXd::Zero(c.coef.size())), 0.0;
      return {glm::logistic_loglik(Z, t, w, c.coef), s};
    }
    case Factor::Kind::Treatment:
      return {glm::logistic_loglik(g.x1, g.a, w, th.alpha),
              want_score ? glm::logistic_score(g.x1, g.a, w, th.alpha) : Eigen::VectorXd()};
    case Factor::Kind::Outcome: {
      return gaussian_factor(g.x1_arm[f.index], g.y_arm[f.index], w(g.arm[f.index]), th.beta[f.index],
                             th.sigma2[f.index]);
    }
    case Factor::Kind::Missingness:
      return {glm::multinomial_loglik(g.xr, g.cat, w, th.eta),
              want_score ? glm::multinomial_score(g.xr, g.cat, w, th.eta) : Eigen::VectorXd()};
  }
  return {0.0, {}};
}

}  // namespace

double factor_loglik(const Dataset& d, const ParamModelSpec& spec, const FiState& st, const ParamTheta& theta,
                     const Factor& f, const Eigen::VectorXd& u) {
  return factor_eval(d, spec, st, theta, f, u, false).first;
}

Eigen::VectorXd factor_score(const Dataset& d, const ParamModelSpec& spec, const FiState& st, const ParamTheta& theta,
                             const Factor& f, const Eigen::VectorXd& u) {
  return factor_eval(d, spec, st, theta, f, u, true).second;
}

nlohmann::json to_json(const ParamTheta& t) {
  auto vec = [](const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  nlohmann::json j;
  j["alpha"] = vec(t.alpha);
  j["beta0"] = vec(t.beta[0]);
  j["beta1"] = vec(t.beta[1]);
  j["sigma2"] = {t.sigma2[0], t.sigma2[1]};
  j["eta"] = nlohmann::json::array();
  for (Eigen::Index r = 0; r < t.eta.rows(); ++r) j["eta"].push_back(vec(t.eta.row(r).transpose()));
  j["lambda"] = nlohmann::json::array();
  for (const auto& l : t.lambda) j["lambda"].push_back({{"coef", vec(l.coef)}, {"sigma2", l.sigma2}});
  return j;
}

}  // namespace mnar::fi
