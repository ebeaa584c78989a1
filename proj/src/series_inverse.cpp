#include "mnar/series_inverse.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>

#include "mnar/rng.hpp"

namespace mnar::series {

Eigen::VectorXd Standardizer::apply(const Eigen::Ref<const Eigen::VectorXd>& x) const {
  return sigma_inv_sqrt * (x - mu);
}

Eigen::MatrixXd Standardizer::apply_rows(const Eigen::MatrixXd& x) const {
  return (x.rowwise() - mu.transpose()) * sigma_inv_sqrt;  // symmetric, so no transpose needed
}

Standardizer Standardizer::identity(std::size_t p) {
  const auto pp = static_cast<Eigen::Index>(p);
  return Standardizer{Eigen::VectorXd::Zero(pp), Eigen::MatrixXd::Identity(pp, pp), false};
}

Standardizer fit_standardizer(const Eigen::MatrixXd& x) {
  const auto m = x.rows(), p = x.cols();
  if (m < p + 1) throw SeriesError("standardization needs at least p + 1 complete cases");
  Standardizer s;
  s.mu = x.colwise().mean().transpose();
  const Eigen::MatrixXd c = x.rowwise() - s.mu.transpose();
  Eigen::MatrixXd cov = c.transpose() * c / static_cast<double>(m - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  const double top = es.eigenvalues().maxCoeff();
  if (!(top > 0.0) || es.eigenvalues().minCoeff() <= 1e-12 * top) {
    const double ridge = 1e-8 * std::max(cov.trace() / static_cast<double>(p), 1e-300);
    cov.diagonal().array() += ridge;
    es.compute(cov);
    s.ridged = true;
    if (!(es.eigenvalues().minCoeff() > 0.0)) throw SeriesError("complete-case covariance is singular");
  }
  s.sigma_inv_sqrt = es.eigenvectors() * es.eigenvalues().cwiseSqrt().cwiseInverse().asDiagonal() *
                     es.eigenvectors().transpose();
  s.sigma_inv_sqrt = 0.5 * (s.sigma_inv_sqrt + s.sigma_inv_sqrt.transpose()).eval();
  return s;
}

HermiteBasis build_basis(std::size_t J, std::size_t p) {
  if (J < 1) throw SeriesError("basis size must be at least one");
  if (p < 1) throw SeriesError("basis dimension must be at least one");
  HermiteBasis b;
  b.p = p;
  std::vector<int> cur(p, 0);
  // Emits all tuples of the given total degree, earliest coordinate highest first.
  std::function<void(std::size_t, int)> emit = [&](std::size_t pos, int left) {
    if (b.multi_indices.size() >= J) return;
    if (pos + 1 == p) {
      cur[pos] = left;
      b.multi_indices.push_back(cur);
      return;
    }
    for (int v = left; v >= 0; --v) {
      cur[pos] = v;
      emit(pos + 1, left - v);
    }
  };
  for (int deg = 0; b.multi_indices.size() < J; ++deg) emit(0, deg);
  return b;
}

Eigen::VectorXd basis_eval(const HermiteBasis& b, const Eigen::Ref<const Eigen::VectorXd>& xt) {
  if (static_cast<std::size_t>(xt.size()) != b.p) throw SeriesError("basis evaluated at a point of the wrong dimension");
  const double env = std::exp(-xt.squaredNorm());
  Eigen::VectorXd out(static_cast<Eigen::Index>(b.J()));
  for (std::size_t j = 0; j < b.J(); ++j) {
    double v = env;
    for (std::size_t l = 0; l < b.p; ++l) v *= std::pow(xt(static_cast<Eigen::Index>(l)), b.multi_indices[j][l]);
    out(static_cast<Eigen::Index>(j)) = v;
  }
  return out;
}

Eigen::MatrixXd basis_eval_rows(const HermiteBasis& b, const Eigen::MatrixXd& xt) {
  Eigen::MatrixXd out(xt.rows(), static_cast<Eigen::Index>(b.J()));
  for (Eigen::Index i = 0; i < xt.rows(); ++i) out.row(i) = basis_eval(b, xt.row(i).transpose()).transpose();
  return out;
}

namespace {

// Coefficients (ascending) of P with d/dx [x^l e^{-x^2}] ... = P(x) e^{-x^2} after k derivatives.
std::vector<double> derivative_poly(int l, int k) {
  std::vector<double> c(static_cast<std::size_t>(l) + 1, 0.0);
  c.back() = 1.0;
  for (int step = 0; step < k; ++step) {
    std::vector<double> d(c.size() + 1, 0.0);
    for (std::size_t e = 1; e < c.size(); ++e) d[e - 1] += static_cast<double>(e) * c[e];
    for (std::size_t e = 0; e < c.size(); ++e) d[e + 1] -= 2.0 * c[e];
    c = std::move(d);
  }
  return c;
}

double polyval(const std::vector<double>& c, double x) {
  double v = 0.0;
  for (std::size_t e = c.size(); e-- > 0;) v = v * x + c[e];
  return v;
}

// Physicists' Gauss-Hermite rule (weight e^{-u^2}) by Golub-Welsch.
void gauss_hermite(int nodes, Eigen::VectorXd& u, Eigen::VectorXd& w) {
  Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(nodes, nodes);
  for (int k = 1; k < nodes; ++k) jac(k, k - 1) = jac(k - 1, k) = std::sqrt(static_cast<double>(k) / 2.0);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(jac);
  u = es.eigenvalues();
  w = std::sqrt(M_PI) * es.eigenvectors().row(0).transpose().array().square();
}

std::vector<std::vector<int>> derivative_indices(std::size_t p, int order) {
  std::vector<std::vector<int>> out;
  std::vector<int> cur(p, 0);
  std::function<void(std::size_t, int)> rec = [&](std::size_t pos, int left) {
    if (pos == p) {
      out.push_back(cur);
      return;
    }
    for (int v = 0; v <= left; ++v) {
      cur[pos] = v;
      rec(pos + 1, left - v);
    }
  };
  rec(0, order);
  return out;
}

// Integrates P_i P_j (1 + x'x)^delta0 e^{-2 x'x} over the supplied points,
// where `points` already carries the change of variables and `weights` the
// rule weights.
Eigen::MatrixXd assemble(const HermiteBasis& b, int order, double delta0, const std::vector<Eigen::VectorXd>& axes,
                         const std::vector<std::vector<std::size_t>>& index, const Eigen::VectorXd& weights,
                         const Eigen::MatrixXd* free_points) {
  const std::size_t J = b.J(), p = b.p;
  Eigen::MatrixXd L = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(J), static_cast<Eigen::Index>(J));
  const auto derivs = derivative_indices(p, order);
  const std::size_t npts = static_cast<std::size_t>(weights.size());
  auto coord = [&](std::size_t pt, std::size_t l) {
    return free_points ? (*free_points)(static_cast<Eigen::Index>(pt), static_cast<Eigen::Index>(l))
                       : axes[l](static_cast<Eigen::Index>(index[pt][l]));
  };
  Eigen::VectorXd tail(static_cast<Eigen::Index>(npts));
  for (std::size_t pt = 0; pt < npts; ++pt) {
    double r2 = 0.0;
    for (std::size_t l = 0; l < p; ++l) r2 += coord(pt, l) * coord(pt, l);
    tail(static_cast<Eigen::Index>(pt)) = std::pow(1.0 + r2, delta0) * weights(static_cast<Eigen::Index>(pt));
  }
  Eigen::MatrixXd vals(static_cast<Eigen::Index>(npts), static_cast<Eigen::Index>(J));
  for (const auto& dk : derivs) {
    for (std::size_t j = 0; j < J; ++j) {
      std::vector<std::vector<double>> polys(p);
      for (std::size_t l = 0; l < p; ++l) polys[l] = derivative_poly(b.multi_indices[j][l], dk[l]);
      for (std::size_t pt = 0; pt < npts; ++pt) {
        double v = 1.0;
        for (std::size_t l = 0; l < p; ++l) v *= polyval(polys[l], coord(pt, l));
        vals(static_cast<Eigen::Index>(pt), static_cast<Eigen::Index>(j)) = v;
      }
    }
    L += vals.transpose() * tail.asDiagonal() * vals;
  }
  return 0.5 * (L + L.transpose());
}

bool positive_definite(const Eigen::MatrixXd& L) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(L, Eigen::EigenvaluesOnly);
  const double top = es.eigenvalues().maxCoeff();
  return top > 0.0 && es.eigenvalues().minCoeff() > 1e-13 * top;
}

Eigen::MatrixXd tensor_gh(const HermiteBasis& b, int order, double delta0, int nodes) {
  Eigen::VectorXd u, w;
  gauss_hermite(nodes, u, w);
  // x = u / sqrt(2) turns e^{-2x^2} dx into e^{-u^2} du / sqrt(2).
  const Eigen::VectorXd x = u / std::sqrt(2.0);
  const std::size_t p = b.p;
  std::size_t npts = 1;
  for (std::size_t l = 0; l < p; ++l) npts *= static_cast<std::size_t>(nodes);
  std::vector<std::vector<std::size_t>> index(npts, std::vector<std::size_t>(p));
  Eigen::VectorXd weights(static_cast<Eigen::Index>(npts));
  for (std::size_t pt = 0; pt < npts; ++pt) {
    std::size_t rest = pt;
    double wt = 1.0;
    for (std::size_t l = p; l-- > 0;) {
      index[pt][l] = rest % static_cast<std::size_t>(nodes);
      rest /= static_cast<std::size_t>(nodes);
      wt *= w(static_cast<Eigen::Index>(index[pt][l])) / std::sqrt(2.0);
    }
    weights(static_cast<Eigen::Index>(pt)) = wt;
  }
  std::vector<Eigen::VectorXd> axes(p, x);
  return assemble(b, order, delta0, axes, index, weights, nullptr);
}

}  // namespace

RegularizerMatrix compute_lambda(const HermiteBasis& b, int order, std::optional<double> delta0, int nodes,
                                 std::uint64_t mc_seed) {
  if (order < 0) throw SeriesError("derivative order must be nonnegative");
  RegularizerMatrix r;
  r.order = order;
  r.delta0 = delta0 ? *delta0 : std::ceil(static_cast<double>(b.p) / 2.0) + 1.0;
  if (!(r.delta0 > static_cast<double>(b.p) / 2.0)) throw SeriesError("tail weight must exceed p/2");
  r.nodes = nodes;
  if (b.p <= 3) {
    r.lambda = tensor_gh(b, order, r.delta0, nodes);
    if (!positive_definite(r.lambda)) {
      r.nodes = 2 * nodes;
      r.lambda = tensor_gh(b, order, r.delta0, r.nodes);
    }
  } else {
    // x ~ N(0, I/4) has density (2/pi)^{p/2} e^{-2x'x}.
    r.monte_carlo = true;
    const std::size_t draws = 100000;
    Rng rng = stream_rng(mc_seed, 0x1A3B);
    std::normal_distribution<double> z(0.0, 0.5);
    Eigen::MatrixXd pts(static_cast<Eigen::Index>(draws), static_cast<Eigen::Index>(b.p));
    for (Eigen::Index i = 0; i < pts.rows(); ++i)
      for (Eigen::Index l = 0; l < pts.cols(); ++l) pts(i, l) = z(rng);
    const double scale = std::pow(M_PI / 2.0, static_cast<double>(b.p) / 2.0) / static_cast<double>(draws);
    Eigen::VectorXd weights = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(draws), scale);
    r.lambda = assemble(b, order, r.delta0, {}, {}, weights, &pts);
  }
  if (!positive_definite(r.lambda)) throw SeriesError("regularizer matrix is not positive definite");
  return r;
}

LsqResult constrained_lsq(const Eigen::MatrixXd& D, const Eigen::VectorXd& y, const Eigen::MatrixXd& Lambda,
                          double B) {
  const auto J = D.cols();
  if (y.size() != D.rows()) throw SeriesError("design and target lengths differ");
  if (Lambda.rows() != J || Lambda.cols() != J) throw SeriesError("regularizer has the wrong size");
  if (!(B > 0.0)) throw SeriesError("constraint bound must be positive");
  const Eigen::MatrixXd G = D.transpose() * D;
  const Eigen::VectorXd rhs = D.transpose() * y;

  LsqResult res;
  auto energy = [&](const Eigen::VectorXd& b) { return b.dot(Lambda * b); };
  auto finish = [&](Eigen::VectorXd beta, double mu) {
    res.beta = std::move(beta);
    res.multiplier = mu;
    res.active = mu > 0.0;
    res.objective = (y - D * res.beta).squaredNorm();
    return res;
  };

  Eigen::LDLT<Eigen::MatrixXd> ldlt(G);
  Eigen::VectorXd beta;
  if (ldlt.info() == Eigen::Success && ldlt.isPositive() && ldlt.vectorD().minCoeff() > 1e-14 * std::max(1.0, ldlt.vectorD().maxCoeff())) {
    beta = ldlt.solve(rhs);
  } else {
    Eigen::MatrixXd Gr = G;
    Gr.diagonal().array() += 1e-10;
    beta = Gr.ldlt().solve(rhs);
  }
  if (beta.allFinite() && energy(beta) <= B) return finish(std::move(beta), 0.0);

  auto solve_at = [&](double mu) -> Eigen::VectorXd { return (G + mu * Lambda).llt().solve(rhs); };
  double lo = 0.0, hi = 1.0;
  Eigen::VectorXd bhi = solve_at(hi);
  int expand = 0;
  while (energy(bhi) > B) {
    lo = hi;
    hi *= 10.0;
    bhi = solve_at(hi);
    if (++expand > 200) throw SeriesError("constrained least squares: could not bracket the multiplier");
  }
  for (res.iterations = 0; res.iterations < 200; ++res.iterations) {
    const double e = energy(bhi);
    if (std::abs(e - B) <= 1e-12 * B || hi - lo <= 1e-15 * hi) break;
    const double mid = 0.5 * (lo + hi);
    Eigen::VectorXd bm = solve_at(mid);
    if (energy(bm) > B) {
      lo = mid;
    } else {
      hi = mid;
      bhi = std::move(bm);
    }
  }
  if (energy(bhi) > B * (1.0 + 1e-8) || std::abs(energy(bhi) - B) > 1e-8 * B)
    throw SeriesError("constrained least squares: bisection did not reach the constraint boundary");
  return finish(std::move(bhi), hi);
}

XiTuning XiModel::tuning() const {
  XiTuning t;
  for (const auto& s : slots) t[{s.pattern, s.arm}] = s.tuning;
  return t;
}

Eigen::MatrixXd slot_features(const Dataset& d, const Pattern& pat, const std::vector<std::size_t>& units) {
  const auto cols = static_cast<Eigen::Index>(pat.obs_idx.size()) + 1;
  Eigen::MatrixXd f(static_cast<Eigen::Index>(units.size()), cols);
  for (std::size_t k = 0; k < units.size(); ++k) {
    const auto i = static_cast<Eigen::Index>(units[k]);
    for (std::size_t c = 0; c < pat.obs_idx.size(); ++c)
      f(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(c)) =
          d.x_values()(i, static_cast<Eigen::Index>(pat.obs_idx[c]));
    f(static_cast<Eigen::Index>(k), cols - 1) = d.y()(i);
  }
  return f;
}

namespace {

Eigen::VectorXd pick_bandwidth(const Eigen::MatrixXd& inputs, const Eigen::MatrixXd* targets,
                               const smooth::CvConfig& cv, const Eigen::VectorXd* frozen) {
  if (frozen && frozen->size() == inputs.cols()) return *frozen;
  if (inputs.rows() >= 2 && inputs.rows() >= cv.folds) return smooth::cv_bandwidth(inputs, targets, cv);
  return smooth::reference_bandwidth(inputs);
}

}  // namespace

SlotMoments estimate_moments(const Dataset& d, const PatternIndex& idx, const Pattern& pat, int arm,
                             const Eigen::MatrixXd& basis_cc, const std::vector<std::size_t>& cc_units,
                             const smooth::CvConfig& cv, const SlotTuning* frozen) {
  if (cc_units.empty()) throw SeriesError("no complete cases in arm " + std::to_string(arm));
  if (static_cast<std::size_t>(basis_cc.rows()) != cc_units.size())
    throw SeriesError("basis rows do not match the complete cases");
  SlotMoments out;
  std::size_t n_arm = 0;
  std::vector<std::size_t> r_units;
  for (const auto& [g, members] : idx.groups) {
    const bool covers = pat.observed_subset_of(g);
    for (auto i : members) {
      if (d.a()(static_cast<Eigen::Index>(i)) != arm) continue;
      ++n_arm;
      if (covers) out.units.push_back(i);
      if (g == pat) r_units.push_back(i);
    }
  }
  std::sort(out.units.begin(), out.units.end());
  const Eigen::MatrixXd eval = slot_features(d, pat, out.units);
  const Eigen::MatrixXd cc_feat = slot_features(d, pat, cc_units);

  out.tuning.complete_bw = pick_bandwidth(cc_feat, nullptr, cv, frozen ? &frozen->complete_bw : nullptr);
  const double p1 = static_cast<double>(cc_units.size()) / static_cast<double>(n_arm);
  out.f1 = p1 * smooth::kde_eval_many(smooth::kde_fit(cc_feat, out.tuning.complete_bw), eval);

  if (r_units.empty()) {
    out.target = Eigen::VectorXd::Zero(eval.rows());
  } else {
    const Eigen::MatrixXd r_feat = slot_features(d, pat, r_units);
    out.tuning.target_bw = pick_bandwidth(r_feat, nullptr, cv, frozen ? &frozen->target_bw : nullptr);
    const double pr = static_cast<double>(r_units.size()) / static_cast<double>(n_arm);
    out.target = pr * smooth::kde_eval_many(smooth::kde_fit(r_feat, out.tuning.target_bw), eval);
  }

  out.tuning.h_bw = pick_bandwidth(cc_feat, &basis_cc, cv, frozen ? &frozen->h_bw : nullptr);
  out.H = smooth::nw_eval_many(smooth::nw_fit_multi(cc_feat, basis_cc, out.tuning.h_bw), eval);
  return out;
}

XiSlot solve_slot(const Pattern& pat, int arm, const Eigen::MatrixXd& H, const Eigen::VectorXd& f1,
                  const Eigen::VectorXd& target, const RegularizerMatrix& lambda, double B) {
  if (H.rows() != f1.size() || H.rows() != target.size()) throw SeriesError("moment vectors have different lengths");
  XiSlot s;
  s.pattern = pat;
  s.arm = arm;
  s.n_eval = static_cast<std::size_t>(H.rows());
  if (H.rows() == 0) {
    s.beta = Eigen::VectorXd::Zero(H.cols());
    return s;
  }
  const Eigen::MatrixXd D = f1.asDiagonal() * H;
  const LsqResult r = constrained_lsq(D, target, lambda.lambda, B);
  s.beta = r.beta;
  s.objective = r.objective;
  s.multiplier = r.multiplier;
  s.active = r.active;
  return s;
}

XiMoments xi_moments(const Dataset& d, const XiFitOptions& opts, const XiTuning* frozen) {
  const PatternIndex idx = index_patterns(d);
  const auto& cc = idx.units(idx.complete);
  XiMoments mom;
  mom.basis = build_basis(opts.J, d.p());
  Eigen::MatrixXd xcc(static_cast<Eigen::Index>(cc.size()), static_cast<Eigen::Index>(d.p()));
  for (std::size_t k = 0; k < cc.size(); ++k)
    xcc.row(static_cast<Eigen::Index>(k)) = d.x_values().row(static_cast<Eigen::Index>(cc[k]));
  mom.standardizer = fit_standardizer(xcc);
  const auto patterns = idx.incomplete_patterns();
  if (patterns.empty()) return mom;

  for (int a = 0; a < 2; ++a) {
    std::vector<std::size_t> cc_a;
    for (auto i : cc)
      if (d.a()(static_cast<Eigen::Index>(i)) == a) cc_a.push_back(i);
    if (cc_a.empty()) throw SeriesError("no complete cases in arm " + std::to_string(a));
    Eigen::MatrixXd x_a(static_cast<Eigen::Index>(cc_a.size()), static_cast<Eigen::Index>(d.p()));
    for (std::size_t k = 0; k < cc_a.size(); ++k)
      x_a.row(static_cast<Eigen::Index>(k)) = d.x_values().row(static_cast<Eigen::Index>(cc_a[k]));
    const Eigen::MatrixXd basis_cc = basis_eval_rows(mom.basis, mom.standardizer.apply_rows(x_a));
    for (const auto& pat : patterns) {
      const SlotTuning* fz = nullptr;
      if (frozen) {
        auto it = frozen->find({pat, a});
        if (it != frozen->end()) fz = &it->second;
      }
      SlotMoments sm = estimate_moments(d, idx, pat, a, basis_cc, cc_a, opts.cv, fz);
      sm.pattern = pat;
      sm.arm = a;
      mom.slots.push_back(std::move(sm));
    }
  }
  return mom;
}

XiModel solve_xi_model(const XiMoments& mom, const XiFitOptions& opts) {
  if (opts.J > mom.basis.J()) throw SeriesError("basis size exceeds the one used for stage-one smoothing");
  XiModel m;
  m.basis = build_basis(opts.J, mom.basis.p);
  m.standardizer = mom.standardizer;
  m.B = opts.B;
  m.clip_floor = opts.clip_floor;
  if (mom.slots.empty()) return m;
  m.lambda = compute_lambda(m.basis, opts.lambda_order, opts.delta0);
  const auto J = static_cast<Eigen::Index>(opts.J);
  for (const auto& sm : mom.slots) {
    XiSlot s = solve_slot(sm.pattern, sm.arm, sm.H.leftCols(J), sm.f1, sm.target, m.lambda, m.B);
    s.tuning = sm.tuning;
    m.slots.push_back(std::move(s));
  }
  return m;
}

XiModel fit_xi(const Dataset& d, const XiFitOptions& opts, const XiTuning* frozen) {
  return solve_xi_model(xi_moments(d, opts, frozen), opts);
}

double xi_value(const XiModel& m, const XiSlot& slot, const Eigen::Ref<const Eigen::VectorXd>& x, ClipCounter* clips) {
  const double v = basis_eval(m.basis, m.standardizer.apply(x)).dot(slot.beta);
  if (v < 0.0) {
    if (clips) ++clips->xi_clipped;
    return 0.0;
  }
  return v;
}

double response_prob(const XiModel& m, const Eigen::Ref<const Eigen::VectorXd>& x, int a, ClipCounter* clips) {
  if (clips) ++clips->evaluations;
  double s = 0.0;
  for (const auto& slot : m.slots)
    if (slot.arm == a) s += xi_value(m, slot, x, clips);
  double p = 1.0 / (1.0 + s);
  if (p < m.clip_floor) {
    if (clips) ++clips->prob_clipped;
    p = m.clip_floor;
  }
  return p;
}

nlohmann::json to_json(const XiModel& m) {
  nlohmann::json j;
  j["J"] = m.basis.J();
  j["p"] = m.basis.p;
  j["multi_indices"] = m.basis.multi_indices;
  j["B"] = m.B;
  j["lambda_order"] = m.lambda.order;
  j["delta0"] = m.lambda.delta0;
  j["standardizer"] = {{"mu", std::vector<double>(m.standardizer.mu.data(), m.standardizer.mu.data() + m.standardizer.mu.size())},
                       {"ridged", m.standardizer.ridged}};
  j["slots"] = nlohmann::json::array();
  for (const auto& s : m.slots) {
    j["slots"].push_back({{"pattern", s.pattern.to_string()},
                          {"arm", s.arm},
                          {"beta", std::vector<double>(s.beta.data(), s.beta.data() + s.beta.size())},
                          {"objective", s.objective},
                          {"multiplier", s.multiplier},
                          {"constraint_active", s.active},
                          {"n_eval", s.n_eval}});
  }
  return j;
}

}  // namespace mnar::series
