#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <doctest.h>

#include "mnar/data_model.hpp"
#include "mnar/rng.hpp"
#include "mnar/sim_harness.hpp"
#include "support.hpp"

using namespace mnar;

namespace {

DataError::Kind load_error(const std::string& path) {
  try {
    load_csv(path);
  } catch (const DataError& e) {
    return e.kind();
  }
  FAIL("expected a DataError");
  return DataError::Kind::Io;
}

Dataset random_dataset(std::size_t n, std::size_t p, Rng& rng) {
  std::normal_distribution<double> z;
  std::bernoulli_distribution coin(0.5), miss(0.3);
  Eigen::VectorXi a(static_cast<Eigen::Index>(n));
  Eigen::VectorXd y(static_cast<Eigen::Index>(n));
  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p));
  MaskMatrix r(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p));
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    a(i) = coin(rng);
    y(i) = z(rng) * 1e3;
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      x(i, j) = z(rng) / 7.0;
      r(i, j) = miss(rng) ? 0 : 1;
    }
  }
  return Dataset(a, y, x, r);
}

}  // namespace

TEST_SUITE("data_model") {
  TEST_CASE("empty x cell becomes missing") {
    const auto path = test::write_file("three.csv", "a,y,x1,x2\n1,2.5,0.3,1\n0,1.0,,0\n1,-1,2,NA\n");
    const Dataset d = load_csv(path);
    CHECK(d.n() == 3);
    CHECK(d.p() == 2);
    CHECK(d.observed(0, 0));
    CHECK_FALSE(d.observed(1, 0));
    CHECK_FALSE(d.x(1, 0).has_value());
    CHECK_FALSE(d.observed(2, 1));
    CHECK(*d.x(0, 0) == doctest::Approx(0.3));
    CHECK(d.a()(1) == 0);
  }

  TEST_CASE("treatment outside {0,1} names the row") {
    const auto path = test::write_file("bad_a.csv", "a,y,x1\n1,2,3\n2,1,1\n");
    try {
      load_csv(path);
      FAIL("expected a validation error");
    } catch (const DataError& e) {
      CHECK(e.kind() == DataError::Kind::Validation);
      CHECK(std::string(e.what()).find(":3:") != std::string::npos);
    }
  }

  TEST_CASE("ingestion errors are classified") {
    CHECK(load_error(test::write_file("no_y_cell.csv", "a,y,x1\n1,,3\n")) == DataError::Kind::Validation);
    CHECK(load_error(test::write_file("short_row.csv", "a,y,x1\n1,2\n")) == DataError::Kind::Parse);
    CHECK(load_error(test::write_file("bad_num.csv", "a,y,x1\n1,2,abc\n")) == DataError::Kind::Parse);
    CHECK(load_error(test::write_file("extra_col.csv", "a,y,x1,z\n1,2,3,4\n")) == DataError::Kind::Schema);
    CHECK(load_error(test::write_file("no_y.csv", "a,x1\n1,3\n")) == DataError::Kind::Schema);
    CHECK(load_error(test::tmp_path("does_not_exist.csv")) == DataError::Kind::Io);
  }

  TEST_CASE("write then load is the identity") {
    Rng rng = stream_rng(3, 0);
    for (int rep = 0; rep < 5; ++rep) {
      const Dataset d = random_dataset(40, 3, rng);
      const auto path = test::tmp_path("roundtrip.csv");
      write_csv(d, path);
      CHECK(load_csv(path) == d);
    }
  }

  TEST_CASE("index_patterns groups by exact row") {
    Eigen::MatrixXd x(3, 2);
    x << 1, 2, 3, 4, 5, 6;
    MaskMatrix r(3, 2);
    r << 1, 1, 1, 0, 1, 1;
    const Dataset d(Eigen::VectorXi::Zero(3), Eigen::VectorXd::Zero(3), x, r);
    const PatternIndex idx = index_patterns(d);
    CHECK(idx.groups.size() == 2);
    CHECK(idx.complete_count() == 2);
    CHECK(idx.units(Pattern({1, 0})) == std::vector<std::size_t>{1});

    const Dataset full = Dataset::complete(Eigen::VectorXi::Zero(3), Eigen::VectorXd::Zero(3), x);
    const PatternIndex all = index_patterns(full);
    CHECK(all.groups.size() == 1);
    CHECK(all.complete_count() == 3);
    CHECK(all.incomplete_patterns().empty());
  }

  TEST_CASE("every unit belongs to exactly one pattern, in any unit order") {
    Rng rng = stream_rng(5, 0);
    const Dataset d = random_dataset(200, 3, rng);
    const PatternIndex idx = index_patterns(d);
    std::vector<int> seen(d.n(), 0);
    for (const auto& [pat, units] : idx.groups)
      for (auto i : units) {
        ++seen[i];
        CHECK(pattern_of(d, i) == pat);
      }
    CHECK(std::all_of(seen.begin(), seen.end(), [](int c) { return c == 1; }));

    std::vector<std::size_t> perm(d.n());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    const PatternIndex shuffled = index_patterns(d.subset(perm));
    REQUIRE(shuffled.groups.size() == idx.groups.size());
    for (const auto& [pat, units] : idx.groups) CHECK(shuffled.units(pat).size() == units.size());
  }

  TEST_CASE("pattern index sets partition the columns") {
    const Pattern pat({1, 0, 1, 0});
    CHECK(pat.obs_idx == std::vector<std::size_t>{0, 2});
    CHECK(pat.mis_idx == std::vector<std::size_t>{1, 3});
    CHECK(Pattern::full(3).is_complete());
    CHECK(Pattern({1, 0}).observed_subset_of(Pattern::full(2)));
    CHECK_FALSE(Pattern::full(2).observed_subset_of(Pattern({1, 0})));
  }

  TEST_CASE("split_by_pattern returns observed sub-columns") {
    Eigen::MatrixXd x(4, 3);
    x << 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12;
    MaskMatrix r(4, 3);
    r << 1, 0, 1, 1, 1, 1, 1, 0, 1, 0, 0, 0;
    const Dataset d(Eigen::VectorXi::Zero(4), Eigen::VectorXd::Zero(4), x, r);
    const PatternIndex idx = index_patterns(d);

    const PatternSlice s = split_by_pattern(d, idx, Pattern({1, 0, 1}));
    CHECK(s.units == std::vector<std::size_t>{0, 2});
    Eigen::MatrixXd expect(2, 2);
    expect << 1, 3, 7, 9;
    CHECK(s.x_obs == expect);
    CHECK(s.mis_idx == std::vector<std::size_t>{1});

    const PatternSlice full = split_by_pattern(d, idx, Pattern::full(3));
    CHECK(full.units == std::vector<std::size_t>{1});
    CHECK(full.x_obs == x.row(1));

    const PatternSlice none = split_by_pattern(d, idx, Pattern::empty(3));
    CHECK(none.units == std::vector<std::size_t>{3});
    CHECK(none.x_obs.cols() == 0);

    CHECK(split_by_pattern(d, idx, Pattern({0, 1, 1})).units.empty());
  }

  TEST_CASE("scenario A has two patterns and about two thirds complete") {
    Rng rng = stream_rng(11, 0);
    const Dataset d = sim::generate_scenario_a(10000, rng).data;
    const PatternIndex idx = index_patterns(d);
    CHECK(idx.groups.size() == 2);
    const double rate = static_cast<double>(idx.complete_count()) / static_cast<double>(d.n());
    CHECK(std::abs(rate - 0.67) <= 0.03);
  }

  TEST_CASE("weight column is read as counts") {
    const auto path = test::write_file("counts.csv", "a,y,x1,n\n1,1,0,3\n0,2,1,0.5\n");
    CsvSchema schema;
    schema.weight = "n";
    const WeightedDataset wd = load_weighted_csv(path, schema);
    CHECK(wd.weights == std::vector<double>{3.0, 0.5});
    CHECK(wd.data.n() == 2);
  }
}
