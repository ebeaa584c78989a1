#pragma once

#include <array>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "mnar/data_model.hpp"

namespace mnar::discrete {

class IdentificationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Finite supports shared by every table in this module. Covariate cells are
/// numbered lexicographically with the last covariate varying fastest.
struct Support {
  std::vector<std::vector<double>> x_levels;  // J_1..J_p values
  std::vector<double> y_levels;               // K values

  std::size_t p() const { return x_levels.size(); }
  std::size_t q() const;
  std::size_t K() const { return y_levels.size(); }
  /// Level index per covariate for a cell number.
  std::vector<std::size_t> cell_digits(std::size_t cell) const;
  /// Number of observed sub-cells under `pat` (1 when nothing is observed).
  std::size_t sub_cells(const Pattern& pat) const;
  /// Observed sub-cell of a full cell under `pat`.
  std::size_t sub_cell_of(std::size_t cell, const Pattern& pat) const;
};

/// The law of (A, X, Y): fxy[a](cell, k) = f(A=a, X=cell, Y=y_k).
struct FullJoint {
  Support support;
  std::array<Eigen::MatrixXd, 2> fxy;  // q x K each

  double total() const { return fxy[0].sum() + fxy[1].sum(); }
};

/// Missingness mechanism P(R=r | A=a, X=cell); the complete pattern is entry 0.
struct Mechanism {
  std::vector<Pattern> patterns;
  std::vector<std::array<Eigen::VectorXd, 2>> prob;  // per pattern, per arm, q-vector
};

/// Observable joint of (A, X_obs, Y, R). For pattern index t and arm a,
/// mass[t][a](s, k) = f(A=a, X_obs(r)=s, Y=y_k, R=r) over observed sub-cells s.
/// Pattern 0 is always the complete pattern, so mass[0][a] is q x K.
struct DiscreteJoint {
  Support support;
  std::vector<Pattern> patterns;
  std::vector<std::array<Eigen::MatrixXd, 2>> mass;

  double total() const;
  /// Checks shapes, nonnegativity and unit total (within `tol`).
  void validate(double tol = 1e-12) const;
};

/// Observable joint implied by a full law and an outcome-independent mechanism.
DiscreteJoint observe(const FullJoint& full, const Mechanism& mech);

/// Empirical joint from a weighted, integer-coded dataset (weights are counts).
/// Throws DataError(Validation) when a column has more than `max_levels` values.
DiscreteJoint from_dataset(const WeightedDataset& wd, std::size_t max_levels = 20);

/// K x q matrix with entry (k, cell) = f(A=a, X=cell, Y=y_k, R=1_p).
Eigen::MatrixXd build_theta(const DiscreteJoint& j, int a);

struct ArmRank {
  int arm = 0;
  std::size_t rank = 0;
  Eigen::VectorXd singular_values;
  double condition_number = 0.0;  // sigma_max / sigma_min; infinite if rank deficient
};

struct IdentReport {
  bool identifiable = false;
  std::size_t q = 0, K = 0;
  double tol = 1e-10;
  std::array<ArmRank, 2> arms;
  std::string reason;  // empty when identifiable
};

IdentReport check_identifiability(const DiscreteJoint& j, double tol = 1e-10);

/// xi[t][a](cell) = P(R=r_t | a, cell) / P(R=1_p | a, cell); xi[0] is all ones.
struct XiTable {
  std::vector<Pattern> patterns;
  std::vector<std::array<Eigen::VectorXd, 2>> xi;
  /// Largest least-squares residual norm over the sub-cell systems, per pattern and arm.
  std::vector<std::array<double, 2>> residual;
  /// Entries below -1e-8 that were clipped to zero.
  std::size_t negative_clipped = 0;
};

XiTable solve_xi(const DiscreteJoint& j, double tol = 1e-10);

struct Recovered {
  FullJoint full;
  Mechanism mechanism;
};

Recovered recover_joint(const DiscreteJoint& j, const XiTable& xi);

struct TauResult {
  double tau = 0.0;
  double tau_att = 0.0;
};

TauResult discrete_tau(const FullJoint& full);

nlohmann::json to_json(const IdentReport& r);
nlohmann::json to_json(const XiTable& xi);

}  // namespace mnar::discrete
