#include <cmath>

#include <doctest.h>

#include "mnar/discrete_ident.hpp"
#include "mnar/logistic.hpp"
#include "mnar/rng.hpp"
#include "mnar/sim_harness.hpp"
#include "support.hpp"

using namespace mnar;
using namespace mnar::discrete;

namespace {

// Binary X, the given outcome levels, f(a, x, y) proportional to the weights.
FullJoint binary_x_joint(const std::vector<double>& y_levels, Eigen::MatrixXd f0, Eigen::MatrixXd f1) {
  FullJoint j;
  j.support.x_levels = {{0.0, 1.0}};
  j.support.y_levels = y_levels;
  const double s = f0.sum() + f1.sum();
  j.fxy = {f0 / s, f1 / s};
  return j;
}

// P(R = 0 | a, x) = expit(c0 + c1 a + c2 x) for one covariate.
Mechanism logistic_mechanism(const Support& sup, double c0, double c1, double c2) {
  Mechanism m;
  m.patterns = {Pattern::full(1), Pattern::empty(1)};
  m.prob.resize(2);
  for (std::size_t a = 0; a < 2; ++a) {
    Eigen::VectorXd miss(static_cast<Eigen::Index>(sup.q()));
    for (Eigen::Index c = 0; c < miss.size(); ++c)
      miss(c) = glm::expit(c0 + c1 * static_cast<double>(a) + c2 * sup.x_levels[0][static_cast<std::size_t>(c)]);
    m.prob[0][a] = Eigen::VectorXd::Ones(miss.size()) - miss;
    m.prob[1][a] = miss;
  }
  return m;
}

Mechanism constant_mechanism(const Support& sup, std::vector<Pattern> patterns, const std::vector<double>& probs) {
  Mechanism m;
  m.patterns = std::move(patterns);
  for (double pr : probs)
    m.prob.push_back({Eigen::VectorXd::Constant(static_cast<Eigen::Index>(sup.q()), pr),
                      Eigen::VectorXd::Constant(static_cast<Eigen::Index>(sup.q()), pr)});
  return m;
}

Eigen::MatrixXd ident_f0() {
  Eigen::MatrixXd f(2, 2);
  f << 4, 1, 2, 3;
  return f;
}

Eigen::MatrixXd ident_f1() {
  Eigen::MatrixXd f(2, 2);
  f << 1, 2, 3, 1;
  return f;
}

}  // namespace

TEST_SUITE("discrete_ident") {
  TEST_CASE("Theta is the complete-pattern slice by direct lookup") {
    // 2 binary covariates, binary outcome, complete pattern and x2 missing.
    FullJoint full;
    full.support.x_levels = {{0, 1}, {0, 1}};
    full.support.y_levels = {0, 1};
    full.fxy[0] = Eigen::MatrixXd(4, 2);
    full.fxy[1] = Eigen::MatrixXd(4, 2);
    full.fxy[0] << 1, 2, 3, 4, 5, 6, 7, 8;
    full.fxy[1] << 8, 7, 6, 5, 4, 3, 2, 1;
    full.fxy[0] /= 72.0;
    full.fxy[1] /= 72.0;
    const Mechanism mech = constant_mechanism(full.support, {Pattern::full(2), Pattern({1, 0})}, {0.75, 0.25});
    const DiscreteJoint j = observe(full, mech);
    j.validate();
    for (int a = 0; a < 2; ++a) {
      const Eigen::MatrixXd th = build_theta(j, a);
      REQUIRE(th.rows() == 2);
      REQUIRE(th.cols() == 4);
      for (int x1 = 0; x1 < 2; ++x1)
        for (int x2 = 0; x2 < 2; ++x2)
          for (int y = 0; y < 2; ++y)
            CHECK(th(y, 2 * x1 + x2) == doctest::Approx(0.75 * full.fxy[static_cast<std::size_t>(a)](2 * x1 + x2, y)));
    }
    // The x2-missing slice sums over x2.
    CHECK(j.mass[1][0](1, 0) == doctest::Approx(0.25 * (5 + 7) / 72.0));
  }

  TEST_CASE("Theta scales with the table and keeps its rank") {
    const FullJoint full = binary_x_joint({0, 1, 2}, Eigen::MatrixXd::Random(2, 3).cwiseAbs(),
                                          Eigen::MatrixXd::Random(2, 3).cwiseAbs());
    const DiscreteJoint j = observe(full, logistic_mechanism(full.support, -1, 0.5, 1));
    DiscreteJoint scaled = j;
    for (auto& m : scaled.mass) {
      m[0] *= 3.0;
      m[1] *= 3.0;
    }
    CHECK(test::max_abs(build_theta(scaled, 1), 3.0 * build_theta(j, 1)) < 1e-15);
    CHECK(check_identifiability(scaled).arms[1].rank == check_identifiability(j).arms[1].rank);
  }

  TEST_CASE("no complete mass gives a zero Theta") {
    const FullJoint full = binary_x_joint({0, 1}, ident_f0(), ident_f1());
    const Mechanism mech = constant_mechanism(full.support, {Pattern::full(1), Pattern::empty(1)}, {0.0, 1.0});
    const DiscreteJoint j = observe(full, mech);
    CHECK(build_theta(j, 0).isZero(0.0));
    CHECK(build_theta(j, 1).isZero(0.0));
    CHECK_FALSE(check_identifiability(j).identifiable);
  }

  TEST_CASE("independent X and Y are not identifiable") {
    // f(x, y | a) = g(x) h(y) in both arms: rank one.
    Eigen::MatrixXd f0 = Eigen::Vector2d(0.3, 0.7) * Eigen::RowVector2d(0.4, 0.6);
    Eigen::MatrixXd f1 = Eigen::Vector2d(0.5, 0.5) * Eigen::RowVector2d(0.2, 0.8);
    const FullJoint full = binary_x_joint({0, 1}, f0, f1);
    const IdentReport rep = check_identifiability(observe(full, logistic_mechanism(full.support, -1, 0, 1)));
    CHECK_FALSE(rep.identifiable);
    CHECK(rep.arms[0].rank == 1);
    CHECK(rep.arms[1].rank == 1);
    CHECK_FALSE(rep.reason.empty());
  }

  TEST_CASE("a nonzero 2x2 determinant is identifiable") {
    const FullJoint full = binary_x_joint({0, 1}, ident_f0(), ident_f1());
    const DiscreteJoint j = observe(full, logistic_mechanism(full.support, -1, 0.5, 1));
    for (int a = 0; a < 2; ++a) CHECK(std::abs(build_theta(j, a).determinant()) > 1e-6);
    const IdentReport rep = check_identifiability(j);
    CHECK(rep.identifiable);
    CHECK(rep.arms[0].rank == 2);
    CHECK(std::isfinite(rep.arms[0].condition_number));
  }

  TEST_CASE("a single covariate cell is identifiable") {
    FullJoint full;
    full.support.x_levels = {{1.0}};
    full.support.y_levels = {0, 1, 2};
    full.fxy[0] = Eigen::RowVector3d(0.1, 0.2, 0.1);
    full.fxy[1] = Eigen::RowVector3d(0.3, 0.2, 0.1);
    const DiscreteJoint j = observe(full, logistic_mechanism(full.support, 0, 0, 0));
    CHECK(check_identifiability(j).identifiable);
  }

  TEST_CASE("fewer outcome levels than cells is reported") {
    FullJoint full;
    full.support.x_levels = {{0, 1, 2}};
    full.support.y_levels = {0, 1};
    full.fxy[0] = Eigen::MatrixXd::Constant(3, 2, 1.0 / 12);
    full.fxy[1] = Eigen::MatrixXd::Constant(3, 2, 1.0 / 12);
    const IdentReport rep = check_identifiability(observe(full, logistic_mechanism(full.support, 0, 0, 0)));
    CHECK_FALSE(rep.identifiable);
    CHECK(rep.reason.find("K") != std::string::npos);
  }

  TEST_CASE("relabelling covariate levels keeps the verdict") {
    Rng rng = stream_rng(21, 0);
    for (int rep = 0; rep < 10; ++rep) {
      const sim::DiscreteGenerator g = rep % 2 ? sim::random_identifiable_joint(rng) : sim::random_independent_joint(rng);
      const DiscreteJoint j = observe(g.full, g.mechanism);
      // Reverse the cell order of the complete slice: a column permutation of Theta.
      DiscreteJoint flipped = j;
      for (auto& m : flipped.mass[0]) m = m.colwise().reverse().eval();
      const IdentReport r1 = check_identifiability(j), r2 = check_identifiability(flipped);
      CHECK(r1.identifiable == r2.identifiable);
      CHECK(r1.arms[0].rank == r2.arms[0].rank);
      CHECK(r1.arms[1].rank == r2.arms[1].rank);
    }
  }

  TEST_CASE("outcome-independent missingness gives constant odds") {
    const FullJoint full = binary_x_joint({0, 1, 2}, (Eigen::MatrixXd(2, 3) << 1, 2, 3, 3, 1, 1).finished(),
                                          (Eigen::MatrixXd(2, 3) << 2, 2, 1, 1, 3, 2).finished());
    const DiscreteJoint j = observe(full, logistic_mechanism(full.support, std::log(0.3 / 0.7), 0, 0));
    const XiTable xi = solve_xi(j);
    for (int a = 0; a < 2; ++a) {
      CHECK((xi.xi[0][static_cast<std::size_t>(a)].array() == 1.0).all());
      CHECK((xi.xi[1][static_cast<std::size_t>(a)].array() - 0.3 / 0.7).abs().maxCoeff() < 1e-12);
    }
  }

  TEST_CASE("logistic mechanism is recovered exactly") {
    const FullJoint full = binary_x_joint({0, 1}, ident_f0(), ident_f1());
    const Mechanism mech = logistic_mechanism(full.support, -0.4, 0.8, -1.3);
    const DiscreteJoint j = observe(full, mech);
    const XiTable xi = solve_xi(j);
    for (std::size_t a = 0; a < 2; ++a) {
      const Eigen::VectorXd odds = mech.prob[1][a].cwiseQuotient(mech.prob[0][a]);
      CHECK((xi.xi[1][a] - odds).cwiseAbs().maxCoeff() < 1e-10);
    }
    const Recovered rec = recover_joint(j, xi);
    for (std::size_t a = 0; a < 2; ++a) {
      CHECK(test::max_abs(rec.full.fxy[a], full.fxy[a]) < 1e-10);
      CHECK(test::max_abs(rec.mechanism.prob[1][a], mech.prob[1][a]) < 1e-10);
    }
    CHECK(rec.full.total() == doctest::Approx(1.0).epsilon(1e-8));
  }

  TEST_CASE("random generators round-trip, including partial patterns") {
    Rng rng = stream_rng(22, 0);
    for (int rep = 0; rep < 20; ++rep) {
      const sim::DiscreteGenerator g = sim::random_identifiable_joint(rng);
      const DiscreteJoint j = observe(g.full, g.mechanism);
      const Recovered rec = recover_joint(j, solve_xi(j));
      for (std::size_t a = 0; a < 2; ++a) {
        CHECK(test::max_abs(rec.full.fxy[a], g.full.fxy[a]) < 1e-10);
        for (std::size_t t = 0; t < g.mechanism.patterns.size(); ++t)
          CHECK(test::max_abs(rec.mechanism.prob[t][a], g.mechanism.prob[t][a]) < 1e-10);
      }
    }
  }

  TEST_CASE("a pattern without mass has zero odds") {
    const FullJoint full = binary_x_joint({0, 1}, ident_f0(), ident_f1());
    const Mechanism mech = constant_mechanism(full.support, {Pattern::full(1), Pattern::empty(1)}, {1.0, 0.0});
    const XiTable xi = solve_xi(observe(full, mech));
    CHECK(xi.xi[1][0].isZero(0.0));
    CHECK(xi.xi[1][1].isZero(0.0));
  }

  TEST_CASE("solving a non-identifiable joint throws") {
    Eigen::MatrixXd f = Eigen::Vector2d(0.3, 0.7) * Eigen::RowVector2d(0.4, 0.6);
    const FullJoint full = binary_x_joint({0, 1}, f, f);
    CHECK_THROWS_AS(solve_xi(observe(full, logistic_mechanism(full.support, -1, 0, 1))), IdentificationError);
  }

  TEST_CASE("complete data is returned unchanged") {
    const FullJoint full = binary_x_joint({0, 1, 3}, (Eigen::MatrixXd(2, 3) << 1, 2, 3, 3, 1, 1).finished(),
                                          (Eigen::MatrixXd(2, 3) << 2, 2, 1, 1, 3, 2).finished());
    Mechanism none;
    none.patterns = {Pattern::full(1)};
    none.prob = {{Eigen::VectorXd::Ones(2), Eigen::VectorXd::Ones(2)}};
    const DiscreteJoint j = observe(full, none);
    const Recovered rec = recover_joint(j, solve_xi(j));
    for (std::size_t a = 0; a < 2; ++a) {
      CHECK(test::max_abs(rec.full.fxy[a], full.fxy[a]) < 1e-12);
      CHECK((rec.mechanism.prob[0][a].array() == 1.0).all());
    }
  }

  TEST_CASE("recovered response probabilities sum to one per cell") {
    Rng rng = stream_rng(23, 0);
    for (int rep = 0; rep < 10; ++rep) {
      const sim::DiscreteGenerator g = sim::random_identifiable_joint(rng);
      const DiscreteJoint j = observe(g.full, g.mechanism);
      const Recovered rec = recover_joint(j, solve_xi(j));
      for (std::size_t a = 0; a < 2; ++a) {
        Eigen::VectorXd s = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(g.full.support.q()));
        for (const auto& pr : rec.mechanism.prob) s += pr[a];
        CHECK((s.array() - 1.0).abs().maxCoeff() < 1e-12);
      }
    }
  }

  TEST_CASE("zero odds everywhere is a positivity violation") {
    const FullJoint full = binary_x_joint({0, 1}, ident_f0(), ident_f1());
    const DiscreteJoint j = observe(full, logistic_mechanism(full.support, 0, 0, 0));
    XiTable xi = solve_xi(j);
    for (auto& arms : xi.xi) {
      arms[0].setZero();
      arms[1].setZero();
    }
    CHECK_THROWS_AS(recover_joint(j, xi), IdentificationError);
  }

  TEST_CASE("exact effects") {
    // Y independent of A given X: tau = 0.
    Eigen::MatrixXd base(2, 3);
    base << 1, 2, 3, 3, 1, 1;
    CHECK(std::abs(discrete_tau(binary_x_joint({0, 1, 5}, base, 0.5 * base)).tau) < 1e-12);

    // Y(1) = Y(0) + 2 in every cell: shift the outcome levels by two.
    FullJoint shifted;
    shifted.support.x_levels = {{0, 1}};
    shifted.support.y_levels = {0, 1, 2, 3, 4};
    Eigen::MatrixXd f0 = Eigen::MatrixXd::Zero(2, 5), f1 = Eigen::MatrixXd::Zero(2, 5);
    f0.leftCols(3) = base;
    f1.rightCols(3) = 0.7 * base;
    f1.row(1) *= 2.0;
    const double s = f0.sum() + f1.sum();
    shifted.fxy = {f0 / s, f1 / s};
    const TauResult t = discrete_tau(shifted);
    CHECK(t.tau == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(t.tau_att == doctest::Approx(2.0).epsilon(1e-12));

    // Direct standardization on a complete joint.
    const FullJoint full = binary_x_joint({0, 1, 3}, (Eigen::MatrixXd(2, 3) << 1, 2, 3, 3, 1, 1).finished(),
                                          (Eigen::MatrixXd(2, 3) << 2, 2, 1, 1, 3, 2).finished());
    const Eigen::Vector3d y(0, 1, 3);
    double tau = 0.0, att = 0.0;
    const double treated = full.fxy[1].sum();
    for (int c = 0; c < 2; ++c) {
      const double m0 = full.fxy[0].row(c).sum(), m1 = full.fxy[1].row(c).sum();
      const double diff = full.fxy[1].row(c).dot(y) / m1 - full.fxy[0].row(c).dot(y) / m0;
      tau += diff * (m0 + m1);
      att += diff * m1 / treated;
    }
    CHECK(discrete_tau(full).tau == doctest::Approx(tau).epsilon(1e-14));
    CHECK(discrete_tau(full).tau_att == doctest::Approx(att).epsilon(1e-14));
  }

  TEST_CASE("a cell treated in one arm only violates overlap") {
    Eigen::MatrixXd f0 = ident_f0();
    f0.row(1).setZero();
    CHECK_THROWS_AS(discrete_tau(binary_x_joint({0, 1}, f0, ident_f1())), IdentificationError);
  }

  TEST_CASE("empirical tables from a weighted dataset") {
    const auto path = test::write_file("table.csv", "a,y,x1,n\n0,0,0,2\n0,1,1,1\n1,1,,3\n1,0,1,2\n");
    CsvSchema schema;
    schema.weight = "n";
    const DiscreteJoint j = from_dataset(load_weighted_csv(path, schema));
    REQUIRE(j.patterns.size() == 2);
    CHECK(j.mass[0][0](0, 0) == doctest::Approx(0.25));
    CHECK(j.mass[0][1](1, 0) == doctest::Approx(0.25));
    CHECK(j.mass[1][1](0, 1) == doctest::Approx(0.375));
    j.validate();

    const auto wide = test::write_file("wide.csv", "a,y,x1,n\n0,0,0.1,1\n0,1,0.2,1\n1,1,0.3,1\n");
    CHECK_THROWS_AS(from_dataset(load_weighted_csv(wide, schema), 2), DataError);
  }

  TEST_CASE("json report") {
    const FullJoint full = binary_x_joint({0, 1}, ident_f0(), ident_f1());
    const DiscreteJoint j = observe(full, logistic_mechanism(full.support, -1, 0.5, 1));
    const auto rep = to_json(check_identifiability(j));
    CHECK(rep["identifiable"] == true);
    CHECK(rep["q"] == 2);
    const auto xi = to_json(solve_xi(j));
    REQUIRE(xi.size() == 2);  // one entry per arm for the single incomplete pattern
    CHECK(xi[0]["pattern"] == "0");
    CHECK(xi[1]["arm"] == 1);
  }
}
