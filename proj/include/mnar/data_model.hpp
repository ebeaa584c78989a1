#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace mnar {

/// Raised for malformed input files or datasets that violate the data model.
class DataError : public std::runtime_error {
 public:
  enum class Kind { Parse, Validation, Schema, Io };
  DataError(Kind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

using MaskMatrix = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>;

/// Partially observed causal data: treatment, outcome, covariates and the
/// observation mask (r(i,j) == 1 when x(i,j) is present).
///
/// Absent cells are held as 0.0 in the value table; every reader goes through
/// the mask, never through the stored value.
class Dataset {
 public:
  Dataset() = default;
  Dataset(Eigen::VectorXi a, Eigen::VectorXd y, Eigen::MatrixXd x, MaskMatrix r);

  /// Fully observed dataset.
  static Dataset complete(Eigen::VectorXi a, Eigen::VectorXd y, Eigen::MatrixXd x);

  std::size_t n() const { return static_cast<std::size_t>(y_.size()); }
  std::size_t p() const { return static_cast<std::size_t>(x_.cols()); }

  const Eigen::VectorXi& a() const { return a_; }
  const Eigen::VectorXd& y() const { return y_; }
  const Eigen::MatrixXd& x_values() const { return x_; }
  const MaskMatrix& r() const { return r_; }

  bool observed(std::size_t i, std::size_t j) const { return r_(i, j) != 0; }
  std::optional<double> x(std::size_t i, std::size_t j) const {
    if (!observed(i, j)) return std::nullopt;
    return x_(i, j);
  }
  bool complete_case(std::size_t i) const;

  /// Rows in the given order (duplicates allowed); used by the bootstrap.
  Dataset subset(const std::vector<std::size_t>& rows) const;

  bool operator==(const Dataset& other) const;

 private:
  void validate() const;

  Eigen::VectorXi a_;
  Eigen::VectorXd y_;
  Eigen::MatrixXd x_;
  MaskMatrix r_;
};

/// One missingness pattern: bits[j] == 1 when covariate j is observed.
struct Pattern {
  std::vector<std::uint8_t> bits;
  std::vector<std::size_t> obs_idx;
  std::vector<std::size_t> mis_idx;

  Pattern() = default;
  explicit Pattern(std::vector<std::uint8_t> b);
  static Pattern full(std::size_t p) { return Pattern(std::vector<std::uint8_t>(p, 1)); }
  static Pattern empty(std::size_t p) { return Pattern(std::vector<std::uint8_t>(p, 0)); }

  std::size_t p() const { return bits.size(); }
  bool is_complete() const { return mis_idx.empty(); }
  /// True when every covariate observed under this pattern is also observed under `other`.
  bool observed_subset_of(const Pattern& other) const;
  std::string to_string() const;

  auto operator<=>(const Pattern& o) const { return bits <=> o.bits; }
  bool operator==(const Pattern& o) const { return bits == o.bits; }
};

Pattern pattern_of(const Dataset& d, std::size_t i);

/// Units grouped by their exact missingness row.
struct PatternIndex {
  std::map<Pattern, std::vector<std::size_t>> groups;
  Pattern complete;

  const std::vector<std::size_t>& units(const Pattern& pat) const;
  /// Patterns other than the complete one, in map order.
  std::vector<Pattern> incomplete_patterns() const;
  std::size_t complete_count() const { return units(complete).size(); }
};

PatternIndex index_patterns(const Dataset& d);

/// Observed sub-columns (pattern's obs_idx) for every unit in the pattern group.
struct PatternSlice {
  std::vector<std::size_t> units;
  Eigen::MatrixXd x_obs;  // |units| x |obs_idx|
  std::vector<std::size_t> mis_idx;
};

PatternSlice split_by_pattern(const Dataset& d, const PatternIndex& idx, const Pattern& pat);

/// Column names used for CSV ingestion. Empty `x` means "detect x1..xp".
struct CsvSchema {
  std::string a = "a";
  std::string y = "y";
  std::vector<std::string> x;
  /// Optional multiplicity column (frequency tables); unused when empty.
  std::string weight;
};

struct WeightedDataset {
  Dataset data;
  std::vector<double> weights;
};

Dataset load_csv(const std::string& path, const CsvSchema& schema = {});
WeightedDataset load_weighted_csv(const std::string& path, const CsvSchema& schema);
void write_csv(const Dataset& d, const std::string& path);

}  // namespace mnar
