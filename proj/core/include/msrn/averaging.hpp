#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "msrn/errors.hpp"
#include "msrn/subspaces.hpp"

namespace msrn {

// Conditional equilibrium of the fastest level given the frozen slower
// coordinates: either an explicit finite distribution over discrete species
// counts or the first moments of the fast orthonormal coordinates.
struct ConditionalEquilibrium {
  enum class Kind { FiniteDistribution, FirstMoments };
  Kind kind = Kind::FirstMoments;

  // FiniteDistribution: states[q] holds counts of discrete_species, with
  // probabilities summing to one.
  std::vector<std::size_t> discrete_species;
  std::vector<std::vector<std::int64_t>> states;
  std::vector<double> probabilities;

  // FirstMoments: moments[j] is the stationary mean of coordinate
  // dir_indices[j] (an index into the decomposition's direction list).
  std::vector<std::size_t> dir_indices;
  std::vector<double> moments;
};

// Evaluates averaged propensities and the effective slow dynamics of a
// decomposed network.  All query points are full-length vectors v in the
// orthonormal coordinates defined by the decomposition's T matrix.
class AveragingEngine {
 public:
  explicit AveragingEngine(const MultiscaleDecomposition& D);

  const MultiscaleDecomposition& decomposition() const { return *D_; }
  std::size_t fastest_level() const { return fastest_level_; }
  bool has_fast_level() const { return fastest_level_ > 0; }
  bool fastest_finite() const { return fastest_finite_; }

  const std::vector<std::size_t>& slow_dirs() const { return slow_dirs_; }
  const std::vector<std::size_t>& const_dirs() const { return const_dirs_; }
  const std::vector<std::size_t>& mid_dirs() const { return mid_dirs_; }
  const std::vector<std::size_t>& fast_dirs() const { return fast_dirs_; }

  // Equilibrium of the fastest level with all slower coordinates frozen at v.
  ConditionalEquilibrium fast_equilibrium(const Eigen::VectorXd& v) const;
  // Same, but with the discrete species counts of the starting configuration
  // given explicitly (bypasses the integer corner search).
  ConditionalEquilibrium fast_equilibrium_from_counts(
      const Eigen::VectorXd& v, const std::vector<std::int64_t>& start) const;

  // Propensity of reaction k averaged over the fastest level at v.
  double lambda_bar(std::size_t k, const Eigen::VectorXd& v) const;
  // Additionally averaged over the intermediate level (three-scale networks).
  double lambda_bbar(std::size_t k, const Eigen::VectorXd& v) const;
  // Stationary first moments of the intermediate coordinates given the slow
  // ones; empty when the decomposition has no intermediate level.
  Eigen::VectorXd mid_moments(const Eigen::VectorXd& v) const;

  // Drift of the slow coordinates after averaging the fastest level only.
  Eigen::VectorXd F1_bar(const Eigen::VectorXd& v) const;
  // Fully averaged slow drift (fastest and intermediate levels).
  Eigen::VectorXd F_bar(const Eigen::VectorXd& v) const;
  // Jacobian of F_bar with respect to the slow coordinates.
  Eigen::MatrixXd F_bar_jacobian(const Eigen::VectorXd& v) const;

  // Coordinates of the initial state; helpers for moving between the slow
  // block and full-length vectors.
  Eigen::VectorXd initial_v() const;
  Eigen::VectorXd full_v_from_slow(const Eigen::VectorXd& v0) const;
  Eigen::VectorXd state_from_v(const Eigen::VectorXd& v) const;

  // Limit-form propensity: species with positive density exponent use plain
  // powers, discrete ones keep the falling factorial.
  double limit_propensity(std::size_t k, const Eigen::VectorXd& z) const;

  // pairings()(l, k) = (theta_l . zeta_k); survives(l, k) tells whether that
  // component persists in the limit at direction l's level.
  const Eigen::MatrixXd& pairings() const { return theta_zeta_; }
  bool survives(std::size_t l, std::size_t k) const { return survives_[l][k] != 0; }

  // Smallest positive increment of coordinate l under its level's surviving
  // jumps (unit for continuous directions); keeps finite-chain probes on
  // integer configurations.
  double lattice_step(std::size_t l) const;

  // Averaged propensities and their slopes along the intermediate
  // coordinates (lattice-stepped so finite fast solves stay feasible).
  struct MidLinearization {
    std::vector<double> base;  // averaged propensity per reaction at v
    Eigen::MatrixXd slopes;    // d(base)/d(v_mid), one column per mid direction
  };
  MidLinearization mid_linearize(const Eigen::VectorXd& v,
                                 const std::vector<std::size_t>& ks,
                                 bool verify) const;

  // Propensity of reaction k averaged over the fastest level, with the fast
  // coordinates replaced by an explicit equilibrium record.
  double average_over(std::size_t k, const ConditionalEquilibrium& eq,
                      const Eigen::VectorXd& v) const;
  void check_affine(std::size_t k, const std::vector<std::size_t>& dirs,
                    const char* what) const;

 private:
  struct FiniteChain {
    std::vector<std::vector<std::int64_t>> states;
    std::vector<double> probabilities;
  };

  std::vector<std::int64_t> integer_fast_corner(const Eigen::VectorXd& v) const;
  FiniteChain solve_finite(const Eigen::VectorXd& v,
                           const std::vector<std::int64_t>& start) const;
  std::vector<double> moment_solve(const Eigen::VectorXd& v) const;

  const MultiscaleDecomposition* D_;
  std::size_t s_ = 0;
  std::size_t nr_ = 0;
  std::vector<std::size_t> discrete_;
  std::vector<std::size_t> slow_dirs_, const_dirs_, mid_dirs_, fast_dirs_;
  std::size_t fastest_level_ = 0;
  bool fastest_finite_ = false;
  Eigen::MatrixXd theta_zeta_;
  std::vector<std::vector<char>> survives_;
  Eigen::VectorXd v0_;
};

}  // namespace msrn
