#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <doctest.h>

#include "mnar/rng.hpp"
#include "mnar/smoothers.hpp"

using namespace mnar;
using namespace mnar::smooth;

namespace {

Eigen::MatrixXd normal_points(Eigen::Index m, Eigen::Index d, Rng& rng) {
  std::normal_distribution<double> z;
  Eigen::MatrixXd x(m, d);
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = z(rng);
  return x;
}

Eigen::MatrixXd permute_rows(const Eigen::MatrixXd& x, const std::vector<Eigen::Index>& perm) {
  return x(perm, Eigen::all);
}

}  // namespace

TEST_SUITE("smoothers") {
  TEST_CASE("single point at its own location") {
    const KdeModel k = kde_fit(Eigen::MatrixXd::Zero(1, 1), Eigen::VectorXd::Ones(1));
    CHECK(kde_eval(k, Eigen::VectorXd::Zero(1)) == doctest::Approx(1.0 / std::sqrt(2.0 * M_PI)).epsilon(1e-14));
  }

  TEST_CASE("density integrates to one") {
    Rng rng = stream_rng(2, 0);
    // 1-D: trapezoid over the data range padded by 8 bandwidths.
    const Eigen::MatrixXd x1 = normal_points(30, 1, rng);
    const KdeModel k1 = kde_fit(x1, Eigen::VectorXd::Constant(1, 0.4));
    const double lo = x1.minCoeff() - 8 * 0.4, hi = x1.maxCoeff() + 8 * 0.4;
    const int steps = 4000;
    double s = 0.0;
    for (int i = 0; i <= steps; ++i) {
      const double q = lo + (hi - lo) * i / steps;
      s += (i == 0 || i == steps ? 0.5 : 1.0) * kde_eval(k1, Eigen::VectorXd::Constant(1, q));
    }
    CHECK(std::abs(s * (hi - lo) / steps - 1.0) < 1e-3);

    // 2-D on a product grid.
    const Eigen::MatrixXd x2 = normal_points(15, 2, rng);
    Eigen::VectorXd h(2);
    h << 0.5, 0.3;
    const KdeModel k2 = kde_fit(x2, h);
    const int g = 300;
    double s2 = 0.0;
    Eigen::Vector2d lo2, step;
    for (int j = 0; j < 2; ++j) {
      lo2(j) = x2.col(j).minCoeff() - 8 * h(j);
      step(j) = (x2.col(j).maxCoeff() + 8 * h(j) - lo2(j)) / g;
    }
    for (int i = 0; i <= g; ++i)
      for (int j = 0; j <= g; ++j) {
        const double w = (i == 0 || i == g ? 0.5 : 1.0) * (j == 0 || j == g ? 0.5 : 1.0);
        s2 += w * kde_eval(k2, Eigen::Vector2d(lo2(0) + i * step(0), lo2(1) + j * step(1)));
      }
    CHECK(std::abs(s2 * step(0) * step(1) - 1.0) < 1e-3);
  }

  TEST_CASE("symmetric points give a symmetric density") {
    Eigen::MatrixXd pts(2, 1);
    pts << -1.3, 1.3;
    const KdeModel k = kde_fit(pts, Eigen::VectorXd::Constant(1, 0.7));
    for (double q : {0.1, 0.5, 1.3, 2.9, 6.0})
      CHECK(std::abs(kde_eval(k, Eigen::VectorXd::Constant(1, q)) - kde_eval(k, Eigen::VectorXd::Constant(1, -q))) <
            1e-12);
  }

  TEST_CASE("density is positive far away and log density stays finite") {
    const KdeModel k = kde_fit(Eigen::MatrixXd::Zero(3, 1), Eigen::VectorXd::Constant(1, 0.1));
    CHECK(kde_eval(k, Eigen::VectorXd::Constant(1, 1.0)) > 0.0);
    const double far = kde_log_eval(k, Eigen::VectorXd::Constant(1, 100.0));
    CHECK(std::isfinite(far));
    CHECK(far == doctest::Approx(-0.5 * 1e6 - std::log(0.1) - 0.5 * std::log(2 * M_PI)).epsilon(1e-12));
  }

  TEST_CASE("argument errors") {
    CHECK_THROWS_AS(kde_fit(Eigen::MatrixXd::Zero(2, 2), Eigen::VectorXd::Ones(1)), SmootherError);
    CHECK_THROWS_AS(kde_fit(Eigen::MatrixXd::Zero(2, 1), Eigen::VectorXd::Zero(1)), SmootherError);
    CHECK_THROWS_AS(kde_fit(Eigen::MatrixXd::Zero(0, 1), Eigen::VectorXd::Ones(1)), SmootherError);
    const KdeModel k = kde_fit(Eigen::MatrixXd::Zero(2, 1), Eigen::VectorXd::Ones(1));
    CHECK_THROWS_AS(kde_eval(k, Eigen::VectorXd::Zero(2)), SmootherError);
    CHECK_THROWS_AS(nw_fit(Eigen::MatrixXd::Zero(0, 1), Eigen::VectorXd::Zero(0), Eigen::VectorXd::Ones(1)),
                    SmootherError);
  }

  TEST_CASE("Nadaraya-Watson closed forms") {
    const NwModel one = nw_fit(Eigen::MatrixXd::Constant(1, 1, 2.0), Eigen::VectorXd::Constant(1, 7.5),
                               Eigen::VectorXd::Ones(1));
    for (double q : {-50.0, 0.0, 2.0, 80.0}) CHECK(nw_eval(one, Eigen::VectorXd::Constant(1, q)) == 7.5);

    Rng rng = stream_rng(4, 0);
    const Eigen::MatrixXd x = normal_points(25, 2, rng);
    const NwModel flat = nw_fit(x, Eigen::VectorXd::Constant(25, -3.25), Eigen::VectorXd::Constant(2, 0.3));
    for (int i = 0; i < 5; ++i) CHECK(nw_eval(flat, normal_points(1, 2, rng).transpose()) == doctest::Approx(-3.25));
  }

  TEST_CASE("tiny bandwidth interpolates a linear target") {
    Rng rng = stream_rng(6, 0);
    const Eigen::MatrixXd x = normal_points(40, 2, rng);
    const Eigen::VectorXd t = 1.0 + 2.0 * x.col(0).array() - x.col(1).array();
    const NwModel m = nw_fit(x, t, Eigen::VectorXd::Constant(2, 1e-4));
    for (Eigen::Index i = 0; i < x.rows(); ++i) CHECK(std::abs(nw_eval(m, x.row(i).transpose()) - t(i)) < 1e-6);
  }

  TEST_CASE("underflowing weights fall back to the nearest neighbour") {
    Eigen::MatrixXd x(2, 1);
    x << 0.0, 1.0;
    const NwModel m = nw_fit(x, Eigen::Vector2d(10.0, 20.0), Eigen::VectorXd::Constant(1, 1e-3));
    CHECK(nw_eval(m, Eigen::VectorXd::Constant(1, 50.0)) == doctest::Approx(20.0));
    CHECK(nw_eval(m, Eigen::VectorXd::Constant(1, -50.0)) == doctest::Approx(10.0));
  }

  TEST_CASE("fit lies within the range of the targets") {
    Rng rng = stream_rng(8, 0);
    std::normal_distribution<double> z;
    for (int rep = 0; rep < 20; ++rep) {
      const Eigen::MatrixXd x = normal_points(30, 2, rng);
      Eigen::VectorXd t(30);
      for (auto& v : t) v = z(rng);
      const NwModel m = nw_fit(x, t, Eigen::VectorXd::Constant(2, 0.05 + 0.1 * rep));
      const Eigen::MatrixXd q = 3.0 * normal_points(50, 2, rng);
      const Eigen::MatrixXd fit = nw_eval_many(m, q);
      CHECK(fit.minCoeff() >= t.minCoeff() - 1e-12);
      CHECK(fit.maxCoeff() <= t.maxCoeff() + 1e-12);
    }
  }

  TEST_CASE("training row order does not matter") {
    Rng rng = stream_rng(10, 0);
    const Eigen::MatrixXd x = normal_points(35, 2, rng);
    const Eigen::VectorXd t = x.col(0).array().sin() + x.col(1).array();
    std::vector<Eigen::Index> perm(35);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    const Eigen::VectorXd h = Eigen::VectorXd::Constant(2, 0.4);
    const KdeModel k1 = kde_fit(x, h), k2 = kde_fit(permute_rows(x, perm), h);
    const NwModel n1 = nw_fit(x, t, h), n2 = nw_fit(permute_rows(x, perm), t(perm), h);
    const Eigen::MatrixXd q = normal_points(20, 2, rng);
    CHECK((kde_eval_many(k1, q) - kde_eval_many(k2, q)).cwiseAbs().maxCoeff() < 1e-14);
    CHECK((nw_eval_many(n1, q) - nw_eval_many(n2, q)).cwiseAbs().maxCoeff() < 1e-12);
  }

  TEST_CASE("one-point grid returns the scaled reference rule") {
    Rng rng = stream_rng(12, 0);
    const Eigen::MatrixXd x = normal_points(60, 2, rng);
    CvConfig cfg;
    cfg.grid = {0.7};
    const Eigen::VectorXd ref = reference_bandwidth(x);
    CHECK((cv_bandwidth(x, nullptr, cfg) - 0.7 * ref).cwiseAbs().maxCoeff() < 1e-15);
    const Eigen::MatrixXd t = x.col(0);
    CHECK((cv_bandwidth(x, &t, cfg) - 0.7 * ref).cwiseAbs().maxCoeff() < 1e-15);

    // 1.06 * sd * m^(-1/6) with the sample sd.
    const double sd = std::sqrt((x.col(1).array() - x.col(1).mean()).square().sum() / 59.0);
    CHECK(ref(1) == doctest::Approx(1.06 * sd * std::pow(60.0, -1.0 / 6.0)).epsilon(1e-12));
  }

  TEST_CASE("cross-validation is deterministic and sensible") {
    Rng rng = stream_rng(14, 0);
    const Eigen::MatrixXd x = normal_points(500, 1, rng);
    CvConfig cfg;
    const Eigen::VectorXd h1 = cv_bandwidth(x, nullptr, cfg), h2 = cv_bandwidth(x, nullptr, cfg);
    CHECK(h1 == h2);
    const double ratio = h1(0) / reference_bandwidth(x)(0);
    CHECK(ratio >= 0.3);
    CHECK(ratio <= 3.0);

    const Eigen::MatrixXd t = (x.array() * 2.0).sin();
    CHECK(cv_bandwidth(x, &t, cfg) == cv_bandwidth(x, &t, cfg));
  }

  TEST_CASE("cross-validation configuration errors") {
    const Eigen::MatrixXd x = Eigen::MatrixXd::Random(5, 1);
    CvConfig cfg;
    CHECK_THROWS_AS(cv_bandwidth(x, nullptr, cfg), SmootherError);  // 10 folds > 5 rows
    cfg.folds = 2;
    cfg.grid.clear();
    CHECK_THROWS_AS(cv_bandwidth(x, nullptr, cfg), SmootherError);
  }

  TEST_CASE("fold labels cover every row evenly") {
    const auto f = fold_labels(23, 5, 99);
    CHECK(f.size() == 23);
    std::vector<int> count(5, 0);
    for (int k : f) ++count[static_cast<std::size_t>(k)];
    CHECK(*std::max_element(count.begin(), count.end()) - *std::min_element(count.begin(), count.end()) <= 1);
    CHECK(f == fold_labels(23, 5, 99));
  }

  TEST_CASE("regression backends recover a smooth mean") {
    Rng rng = stream_rng(16, 0);
    std::normal_distribution<double> z;
    const Eigen::MatrixXd x = normal_points(800, 1, rng);
    Eigen::VectorXd t(800);
    for (Eigen::Index i = 0; i < 800; ++i) t(i) = std::sin(x(i, 0)) + 0.1 * z(rng);
    for (auto backend : {RegressionBackend::Spline, RegressionBackend::NadarayaWatson}) {
      RegressionSpec spec;
      spec.backend = backend;
      const auto reg = fit_regressor(x, t, spec);
      for (double q : {-1.0, 0.0, 0.8}) CHECK(std::abs(reg->predict(Eigen::VectorXd::Constant(1, q)) - std::sin(q)) < 0.06);
      // Refitting with the frozen tuning value gives the same model.
      spec.frozen = reg->tuning();
      const auto again = fit_regressor(x, t, spec);
      CHECK(again->tuning() == reg->tuning());
      CHECK(again->predict(Eigen::VectorXd::Constant(1, 0.3)) == reg->predict(Eigen::VectorXd::Constant(1, 0.3)));
    }
  }
}
