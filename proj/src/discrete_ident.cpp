#include "mnar/discrete_ident.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>

namespace mnar::discrete {

std::size_t Support::q() const {
  std::size_t q = 1;
  for (const auto& l : x_levels) q *= l.size();
  return q;
}

std::vector<std::size_t> Support::cell_digits(std::size_t cell) const {
  std::vector<std::size_t> d(p());
  for (std::size_t j = p(); j-- > 0;) {
    d[j] = cell % x_levels[j].size();
    cell /= x_levels[j].size();
  }
  return d;
}

std::size_t Support::sub_cells(const Pattern& pat) const {
  std::size_t s = 1;
  for (auto j : pat.obs_idx) s *= x_levels[j].size();
  return s;
}

std::size_t Support::sub_cell_of(std::size_t cell, const Pattern& pat) const {
  const auto d = cell_digits(cell);
  std::size_t s = 0;
  for (auto j : pat.obs_idx) s = s * x_levels[j].size() + d[j];
  return s;
}

double DiscreteJoint::total() const {
  double t = 0.0;
  for (const auto& m : mass) t += m[0].sum() + m[1].sum();
  return t;
}

void DiscreteJoint::validate(double tol) const {
  if (support.y_levels.empty()) throw IdentificationError("outcome support is empty");
  for (const auto& l : support.x_levels)
    if (l.empty()) throw IdentificationError("covariate support is empty");
  if (patterns.empty() || !patterns.front().is_complete() || patterns.size() != mass.size())
    throw IdentificationError("joint table must list the complete pattern first");
  for (std::size_t t = 0; t < patterns.size(); ++t) {
    if (patterns[t].p() != support.p()) throw IdentificationError("pattern length does not match covariates");
    for (int a = 0; a < 2; ++a) {
      const auto& m = mass[t][static_cast<std::size_t>(a)];
      if (static_cast<std::size_t>(m.rows()) != support.sub_cells(patterns[t]) ||
          static_cast<std::size_t>(m.cols()) != support.K())
        throw IdentificationError("joint table has the wrong shape for pattern " + patterns[t].to_string());
      if ((m.array() < 0.0).any()) throw IdentificationError("joint table has negative mass");
    }
  }
  if (std::abs(total() - 1.0) > tol) throw IdentificationError("joint table does not sum to one");
}

DiscreteJoint observe(const FullJoint& full, const Mechanism& mech) {
  const auto& sup = full.support;
  DiscreteJoint j{sup, mech.patterns, {}};
  for (std::size_t t = 0; t < mech.patterns.size(); ++t) {
    const Pattern& pat = mech.patterns[t];
    std::array<Eigen::MatrixXd, 2> m;
    for (int a = 0; a < 2; ++a) {
      const auto ua = static_cast<std::size_t>(a);
      m[ua] = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(sup.sub_cells(pat)), static_cast<Eigen::Index>(sup.K()));
      for (std::size_t c = 0; c < sup.q(); ++c) {
        const auto s = static_cast<Eigen::Index>(sup.sub_cell_of(c, pat));
        const auto ci = static_cast<Eigen::Index>(c);
        m[ua].row(s) += mech.prob[t][ua](ci) * full.fxy[ua].row(ci);
      }
    }
    j.mass.push_back(std::move(m));
  }
  return j;
}

DiscreteJoint from_dataset(const WeightedDataset& wd, std::size_t max_levels) {
  const Dataset& d = wd.data;
  const std::size_t n = d.n(), p = d.p();
  if (wd.weights.size() != n) throw DataError(DataError::Kind::Validation, "weight column length mismatch");

  Support sup;
  sup.x_levels.resize(p);
  for (std::size_t col = 0; col < p; ++col) {
    std::set<double> vals;
    for (std::size_t i = 0; i < n; ++i)
      if (d.observed(i, col)) vals.insert(d.x_values()(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(col)));
    if (vals.size() > max_levels)
      throw DataError(DataError::Kind::Validation, "covariate x" + std::to_string(col + 1) + " has more than " +
                                                       std::to_string(max_levels) +
                                                       " distinct values; use the nonparametric estimator");
    if (vals.empty())
      throw DataError(DataError::Kind::Validation, "covariate x" + std::to_string(col + 1) + " is never observed");
    sup.x_levels[col].assign(vals.begin(), vals.end());
  }
  {
    std::set<double> vals(d.y().data(), d.y().data() + d.y().size());
    if (vals.size() > max_levels)
      throw DataError(DataError::Kind::Validation,
                      "outcome has more than " + std::to_string(max_levels) +
                          " distinct values; use the nonparametric estimator");
    sup.y_levels.assign(vals.begin(), vals.end());
  }

  std::map<Pattern, std::size_t> slot;
  DiscreteJoint j{sup, {Pattern::full(p)}, {}};
  slot[j.patterns[0]] = 0;
  for (std::size_t i = 0; i < n; ++i) {
    Pattern pat = pattern_of(d, i);
    if (!slot.count(pat)) {
      slot[pat] = j.patterns.size();
      j.patterns.push_back(pat);
    }
  }
  // Keep incomplete patterns in canonical order after the complete one.
  std::sort(j.patterns.begin() + 1, j.patterns.end());
  for (std::size_t t = 0; t < j.patterns.size(); ++t) slot[j.patterns[t]] = t;
  for (const auto& pat : j.patterns) {
    const auto rows = static_cast<Eigen::Index>(sup.sub_cells(pat));
    j.mass.push_back({Eigen::MatrixXd::Zero(rows, static_cast<Eigen::Index>(sup.K())),
                      Eigen::MatrixXd::Zero(rows, static_cast<Eigen::Index>(sup.K()))});
  }

  auto index_of = [](const std::vector<double>& levels, double v) {
    return static_cast<std::size_t>(std::lower_bound(levels.begin(), levels.end(), v) - levels.begin());
  };
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (wd.weights[i] < 0.0) throw DataError(DataError::Kind::Validation, "negative count in row " + std::to_string(i + 1));
    const Pattern pat = pattern_of(d, i);
    const std::size_t t = slot[pat];
    std::size_t s = 0;
    for (auto col : pat.obs_idx)
      s = s * sup.x_levels[col].size() +
          index_of(sup.x_levels[col], d.x_values()(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(col)));
    const auto k = index_of(sup.y_levels, d.y()(static_cast<Eigen::Index>(i)));
    j.mass[t][static_cast<std::size_t>(d.a()(static_cast<Eigen::Index>(i)))](static_cast<Eigen::Index>(s),
                                                                            static_cast<Eigen::Index>(k)) += wd.weights[i];
    total += wd.weights[i];
  }
  if (!(total > 0.0)) throw DataError(DataError::Kind::Validation, "frequency table has zero total count");
  for (auto& m : j.mass) {
    m[0] /= total;
    m[1] /= total;
  }
  return j;
}

Eigen::MatrixXd build_theta(const DiscreteJoint& j, int a) {
  if (a != 0 && a != 1) throw IdentificationError("arm must be 0 or 1");
  return j.mass.front()[static_cast<std::size_t>(a)].transpose();
}

IdentReport check_identifiability(const DiscreteJoint& j, double tol) {
  IdentReport rep;
  rep.q = j.support.q();
  rep.K = j.support.K();
  rep.tol = tol;
  bool ok = true;
  for (int a = 0; a < 2; ++a) {
    ArmRank& ar = rep.arms[static_cast<std::size_t>(a)];
    ar.arm = a;
    const Eigen::MatrixXd theta = build_theta(j, a);
    ar.singular_values = Eigen::JacobiSVD<Eigen::MatrixXd>(theta).singularValues();
    const double smax = ar.singular_values.size() ? ar.singular_values(0) : 0.0;
    ar.rank = 0;
    if (smax > 0.0)
      for (Eigen::Index k = 0; k < ar.singular_values.size(); ++k)
        if (ar.singular_values(k) > tol * smax) ++ar.rank;
    ar.condition_number = ar.rank == rep.q && ar.rank > 0
                              ? smax / ar.singular_values(static_cast<Eigen::Index>(rep.q) - 1)
                              : std::numeric_limits<double>::infinity();
    if (ar.rank < rep.q && ok) {
      ok = false;
      rep.reason = "rank of Theta for arm " + std::to_string(a) + " is " + std::to_string(ar.rank) + " < q = " +
                   std::to_string(rep.q);
    }
  }
  if (rep.K < rep.q) {
    ok = false;
    rep.reason = "K = " + std::to_string(rep.K) + " outcome levels cannot identify q = " + std::to_string(rep.q) +
                 " covariate cells (rank is at most K)";
  }
  rep.identifiable = ok;
  return rep;
}

XiTable solve_xi(const DiscreteJoint& j, double tol) {
  const IdentReport rep = check_identifiability(j, tol);
  if (!rep.identifiable) throw IdentificationError("not identifiable: " + rep.reason);
  const auto& sup = j.support;
  const std::size_t q = sup.q();

  XiTable out;
  out.patterns = j.patterns;
  out.xi.resize(j.patterns.size());
  out.residual.resize(j.patterns.size(), {0.0, 0.0});
  for (int a = 0; a < 2; ++a) out.xi[0][static_cast<std::size_t>(a)] = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(q));

  for (int a = 0; a < 2; ++a) {
    const auto ua = static_cast<std::size_t>(a);
    const Eigen::MatrixXd theta = build_theta(j, a);
    for (std::size_t t = 1; t < j.patterns.size(); ++t) {
      const Pattern& pat = j.patterns[t];
      Eigen::VectorXd xi = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(q));
      // One system per observed sub-cell: the cells consistent with it are the unknowns.
      std::vector<std::vector<Eigen::Index>> members(sup.sub_cells(pat));
      for (std::size_t c = 0; c < q; ++c) members[sup.sub_cell_of(c, pat)].push_back(static_cast<Eigen::Index>(c));
      for (std::size_t s = 0; s < members.size(); ++s) {
        const auto& cols = members[s];
        Eigen::MatrixXd sys(theta.rows(), static_cast<Eigen::Index>(cols.size()));
        for (std::size_t c = 0; c < cols.size(); ++c) sys.col(static_cast<Eigen::Index>(c)) = theta.col(cols[c]);
        const Eigen::VectorXd rhs = j.mass[t][ua].row(static_cast<Eigen::Index>(s)).transpose();
        Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(sys);
        cod.setThreshold(tol);
        if (static_cast<std::size_t>(cod.rank()) < cols.size())
          throw IdentificationError("rank deficient system for pattern " + pat.to_string() + ", arm " +
                                    std::to_string(a));
        const Eigen::VectorXd sol = cod.solve(rhs);
        out.residual[t][ua] = std::max(out.residual[t][ua], (sys * sol - rhs).norm());
        for (std::size_t c = 0; c < cols.size(); ++c) {
          double v = sol(static_cast<Eigen::Index>(c));
          if (v < -1e-8) ++out.negative_clipped;
          xi(cols[c]) = std::max(v, 0.0);
        }
      }
      out.xi[t][ua] = std::move(xi);
    }
  }
  return out;
}

Recovered recover_joint(const DiscreteJoint& j, const XiTable& xi) {
  const auto& sup = j.support;
  const auto q = static_cast<Eigen::Index>(sup.q());
  if (xi.patterns != j.patterns) throw IdentificationError("xi table does not match the joint's patterns");
  Recovered out;
  out.full.support = sup;
  out.mechanism.patterns = j.patterns;
  out.mechanism.prob.resize(j.patterns.size());
  for (int a = 0; a < 2; ++a) {
    const auto ua = static_cast<std::size_t>(a);
    Eigen::VectorXd total = Eigen::VectorXd::Zero(q);
    for (std::size_t t = 0; t < j.patterns.size(); ++t) total += xi.xi[t][ua];
    for (Eigen::Index c = 0; c < q; ++c)
      if (!(total(c) > 0.0) || !std::isfinite(total(c)))
        throw IdentificationError("positivity violated: odds sum is zero at a covariate cell");
    for (std::size_t t = 0; t < j.patterns.size(); ++t) out.mechanism.prob[t][ua] = xi.xi[t][ua].cwiseQuotient(total);
    // f(a, x, y) = f(a, x, y, R=1_p) / P(R=1_p | a, x) = f(a, x, y, R=1_p) * sum_r xi_r.
    out.full.fxy[ua] = total.asDiagonal() * j.mass.front()[ua];
  }
  return out;
}

TauResult discrete_tau(const FullJoint& full) {
  const auto& f = full.fxy;
  const Eigen::Map<const Eigen::VectorXd> y(full.support.y_levels.data(),
                                            static_cast<Eigen::Index>(full.support.y_levels.size()));
  const double total = full.total();
  if (!(total > 0.0)) throw IdentificationError("joint has no mass");
  const double treated = f[1].sum();
  const double floor = 1e-15 * total;
  TauResult r;
  for (Eigen::Index c = 0; c < f[0].rows(); ++c) {
    const double m0 = f[0].row(c).sum(), m1 = f[1].row(c).sum();
    if (m0 + m1 <= floor) continue;
    if (m0 <= 0.0 || m1 <= 0.0) throw IdentificationError("overlap violated: a supported cell has no mass in one arm");
    const double tau_x = f[1].row(c).dot(y) / m1 - f[0].row(c).dot(y) / m0;
    r.tau += tau_x * (m0 + m1) / total;
    if (treated > 0.0) r.tau_att += tau_x * m1 / treated;
  }
  return r;
}

namespace {

nlohmann::json vec_json(const Eigen::VectorXd& v) {
  nlohmann::json a = nlohmann::json::array();
  for (Eigen::Index k = 0; k < v.size(); ++k) {
    if (std::isfinite(v(k)))
      a.push_back(v(k));
    else
      a.push_back(nullptr);
  }
  return a;
}

}  // namespace

nlohmann::json to_json(const IdentReport& r) {
  nlohmann::json j;
  j["identifiable"] = r.identifiable;
  j["q"] = r.q;
  j["K"] = r.K;
  j["tol"] = r.tol;
  j["reason"] = r.reason;
  for (const auto& ar : r.arms) {
    nlohmann::json a;
    a["arm"] = ar.arm;
    a["rank"] = ar.rank;
    a["singular_values"] = vec_json(ar.singular_values);
    if (std::isfinite(ar.condition_number))
      a["condition_number"] = ar.condition_number;
    else
      a["condition_number"] = nullptr;
    j["arms"].push_back(a);
  }
  return j;
}

nlohmann::json to_json(const XiTable& xi) {
  nlohmann::json j = nlohmann::json::array();
  for (std::size_t t = 1; t < xi.patterns.size(); ++t) {
    for (int a = 0; a < 2; ++a) {
      const auto ua = static_cast<std::size_t>(a);
      j.push_back({{"pattern", xi.patterns[t].to_string()},
                   {"arm", a},
                   {"xi", vec_json(xi.xi[t][ua])},
                   {"residual", xi.residual[t][ua]}});
    }
  }
  return j;
}

}  // namespace mnar::discrete
