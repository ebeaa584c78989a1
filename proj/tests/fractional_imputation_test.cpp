#include <cmath>

#include <doctest.h>

#include "mnar/fractional_imputation.hpp"
#include "mnar/logistic.hpp"
#include "mnar/rng.hpp"
#include "mnar/sim_harness.hpp"

using namespace mnar;

namespace {

Eigen::VectorXd ols(const Eigen::MatrixXd& z, const Eigen::VectorXd& t) { return z.colPivHouseholderQr().solve(t); }

// Outcome regression of one arm over (1, X) on the given covariate table.
Eigen::VectorXd arm_ols(const Dataset& d, const Eigen::MatrixXd& x, int arm) {
  std::vector<Eigen::Index> rows;
  for (Eigen::Index i = 0; i < d.a().size(); ++i)
    if (d.a()(i) == arm) rows.push_back(i);
  Eigen::MatrixXd z(static_cast<Eigen::Index>(rows.size()), x.cols() + 1);
  Eigen::VectorXd t(z.rows());
  for (Eigen::Index k = 0; k < z.rows(); ++k) {
    z(k, 0) = 1.0;
    z.row(k).tail(x.cols()) = x.row(rows[static_cast<std::size_t>(k)]);
    t(k) = d.y()(rows[static_cast<std::size_t>(k)]);
  }
  return ols(z, t);
}

struct Fitted {
  Dataset data;
  fi::ParamModelSpec spec;
  fi::FiResult fit;
};

Fitted fit_b(std::size_t n, std::uint64_t seed, std::size_t M) {
  Rng rng = stream_rng(seed, 0);
  Dataset d = sim::generate_scenario_b(n, rng).data;
  fi::ParamModelSpec spec = fi::ParamModelSpec::infer(d);
  fi::FiOptions o;
  o.M = M;
  o.seed = seed;
  fi::FiResult r = fi::fit_mle_fractional(d, spec, o);
  return {std::move(d), std::move(spec), std::move(r)};
}

}  // namespace

TEST_SUITE("fractional_imputation") {
  TEST_CASE("covariate families are inferred from observed values") {
    Rng rng = stream_rng(60, 0);
    const Dataset d = sim::generate_scenario_b(300, rng).data;
    const auto spec = fi::ParamModelSpec::infer(d);
    REQUIRE(spec.families.size() == 6);
    CHECK(spec.families[0] == fi::CovFamily::Gaussian);
    CHECK(spec.families[5] == fi::CovFamily::Bernoulli);
  }

  TEST_CASE("without missing values the fit is the complete-data MLE") {
    Rng rng = stream_rng(61, 0);
    const sim::Simulated s = sim::generate_scenario_a(500, rng);
    const Dataset d = Dataset::complete(s.data.a(), s.data.y(), s.full_x);
    const auto spec = fi::ParamModelSpec::infer(d);
    const fi::FiResult r = fi::fit_mle_fractional(d, spec, {});
    CHECK(r.state.converged);
    CHECK(r.state.iterations == 1);
    CHECK(r.state.rows() == d.n());
    for (int arm = 0; arm < 2; ++arm)
      CHECK((r.theta.beta[static_cast<std::size_t>(arm)] - arm_ols(d, s.full_x, arm)).cwiseAbs().maxCoeff() < 1e-8);
    const Eigen::VectorXd ones = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(d.n()));
    for (const auto& f : fi::factors(spec, r.state))
      CHECK(fi::factor_score(d, spec, r.state, r.theta, f, ones).cwiseAbs().maxCoeff() < 1e-6);

    // The average effect is the mean of (1, x_i)'(beta1 - beta0).
    const Eigen::VectorXd delta = r.theta.beta[1] - r.theta.beta[0];
    double oracle = 0.0;
    for (Eigen::Index i = 0; i < s.full_x.rows(); ++i) oracle += delta(0) + s.full_x.row(i).dot(delta.tail(2));
    oracle /= static_cast<double>(d.n());
    CHECK(fi::param_tau(r.theta, d, r.state).estimate == doctest::Approx(oracle).epsilon(1e-12));
  }

  TEST_CASE("a single imputation of the true values is a fixed point") {
    Rng rng = stream_rng(62, 0);
    const sim::Simulated s = sim::generate_scenario_a(600, rng);
    const auto spec = fi::ParamModelSpec::infer(s.data);
    fi::FiState st = fi::state_from_rows(s.data, s.full_x);
    st.theta = fi::complete_case_theta(s.data, spec, st.categories);
    const Eigen::VectorXd ones = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(s.data.n()));
    fi::FiOptions o;
    o.tol = 1e-9;
    o.max_iter = 1000;
    fi::run_em(s.data, spec, st, ones, o);
    REQUIRE(st.converged);
    for (int arm = 0; arm < 2; ++arm)
      CHECK((st.theta.beta[static_cast<std::size_t>(arm)] - arm_ols(s.data, s.full_x, arm)).cwiseAbs().maxCoeff() <
            1e-6);
    const Eigen::VectorXd before = st.theta.flatten();
    fi::run_em(s.data, spec, st, ones, o);
    CHECK(st.cycles == 1);
    CHECK((st.theta.flatten() - before).cwiseAbs().maxCoeff() < 1e-6);
  }

  TEST_CASE("fitting scenario B") {
    const Fitted f = fit_b(400, 63, 20);
    const fi::FiState& st = f.fit.state;
    CHECK(st.converged);
    CHECK(st.M == 20);

    SUBCASE("fractional weights are normalized per unit") {
      for (std::size_t i = 0; i < f.data.n(); ++i) {
        double sum = 0.0;
        for (std::size_t r = st.begin[i]; r < st.begin[i + 1]; ++r) {
          CHECK(st.omega(static_cast<Eigen::Index>(r)) >= 0.0);
          sum += st.omega(static_cast<Eigen::Index>(r));
        }
        CHECK(std::abs(sum - 1.0) < 1e-12);
        if (f.data.complete_case(i)) {
          CHECK(st.begin[i + 1] - st.begin[i] == 1);
          CHECK(st.omega(static_cast<Eigen::Index>(st.begin[i])) == 1.0);
        }
      }
    }

    SUBCASE("observed values are never imputed") {
      for (std::size_t i = 0; i < f.data.n(); ++i)
        for (std::size_t r = st.begin[i]; r < st.begin[i + 1]; ++r)
          for (std::size_t j = 0; j < f.data.p(); ++j)
            if (auto v = f.data.x(i, j)) CHECK(st.x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) == *v);
    }

    SUBCASE("the observed-data likelihood does not decrease between refreshes") {
      const auto& tr = st.loglik_trace;
      for (std::size_t t = 1; t < tr.size(); ++t) {
        if (std::find(st.refresh_at.begin(), st.refresh_at.end(), t) != st.refresh_at.end()) continue;
        CHECK(tr[t] >= tr[t - 1] - 1e-6 * std::max(1.0, std::abs(tr[t - 1])));
      }
    }

    SUBCASE("analytic scores match finite differences") {
      const Eigen::VectorXd ones = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(f.data.n()));
      for (const auto& fac : fi::factors(f.spec, st)) {
        const Eigen::VectorXd theta = fi::factor_params(f.fit.theta, fac);
        const Eigen::VectorXd score = fi::factor_score(f.data, f.spec, st, f.fit.theta, fac, ones);
        for (Eigen::Index k = 0; k < theta.size(); ++k) {
          if (fac.kind == fi::Factor::Kind::Covariate && f.spec.families[fac.index] == fi::CovFamily::Bernoulli &&
              k == theta.size() - 1)
            continue;  // placeholder variance
          const double h = 1e-5 * std::max(1.0, std::abs(theta(k)));
          auto at = [&](double delta) {
            fi::ParamTheta t = f.fit.theta;
            Eigen::VectorXd v = theta;
            v(k) += delta;
            fi::set_factor_params(t, fac, v);
            return fi::factor_loglik(f.data, f.spec, st, t, fac, ones);
          };
          const double fd = (at(h) - at(-h)) / (2.0 * h);
          INFO(fi::factor_name(fac), " parameter ", k);
          CHECK(std::abs(score(k) - fd) <= 1e-4 * std::max(std::abs(fd), 1.0));
        }
      }
    }

    SUBCASE("equal outcome models give no effect") {
      fi::ParamTheta t = f.fit.theta;
      t.beta[1] = t.beta[0];
      CHECK(fi::param_tau(t, f.data, st).estimate == 0.0);
    }

    SUBCASE("factor parameters round-trip") {
      fi::ParamTheta t = f.fit.theta;
      for (const auto& fac : fi::factors(f.spec, st)) fi::set_factor_params(t, fac, fi::factor_params(f.fit.theta, fac));
      CHECK(t.flatten() == f.fit.theta.flatten());
    }

    SUBCASE("refitting with unit weights stays at the fit") {
      const Eigen::VectorXd ones = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(f.data.n()));
      const fi::FiResult again = fi::refit_weighted(f.data, f.spec, st, ones, {});
      CHECK(again.state.converged);
      CHECK(std::abs(fi::param_tau(again.theta, f.data, again.state).estimate -
                     fi::param_tau(f.fit.theta, f.data, st).estimate) < 1e-3);
    }

    SUBCASE("doubling every weight leaves the estimate unchanged") {
      const Eigen::VectorXd twos = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(f.data.n()), 2.0);
      const fi::FiResult a = fi::refit_weighted(f.data, f.spec, st, twos, {});
      const Eigen::VectorXd ones = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(f.data.n()));
      const fi::FiResult b = fi::refit_weighted(f.data, f.spec, st, ones, {});
      CHECK(std::abs(fi::param_tau(a.theta, f.data, a.state, &twos).estimate -
                     fi::param_tau(b.theta, f.data, b.state).estimate) < 1e-3);
    }
  }

  TEST_CASE("the fit is reproducible for a fixed seed") {
    const Fitted a = fit_b(300, 64, 10);
    const Fitted b = fit_b(300, 64, 10);
    CHECK(a.fit.theta.flatten() == b.fit.theta.flatten());
  }

  TEST_CASE("input errors") {
    Rng rng = stream_rng(65, 0);
    const Dataset d = sim::generate_scenario_a(200, rng).data;
    fi::ParamModelSpec bad;
    bad.families = {fi::CovFamily::Gaussian};
    CHECK_THROWS_AS(fi::fit_mle_fractional(d, bad, {}), fi::FiError);
    fi::FiOptions o;
    o.M = 0;
    CHECK_THROWS_AS(fi::fit_mle_fractional(d, fi::ParamModelSpec::infer(d), o), fi::FiError);
    CHECK_THROWS_AS(fi::state_from_rows(d, Eigen::MatrixXd::Zero(3, 2)), fi::FiError);
  }
}
