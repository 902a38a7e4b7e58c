#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <vector>

#include "msrn/errors.hpp"
#include "msrn/network.hpp"
#include "msrn/scales.hpp"

namespace msrn {

struct SubspacePair {
  std::vector<RatVec> range;              // canonical basis of span(vectors)
  std::vector<RatVec> null_of_transpose;  // canonical basis of {x : v.x = 0 for all v}
};

// Exact rational range/null decomposition of the subspace spanned by the
// (possibly empty) column list; `dim` is the ambient species dimension.
SubspacePair stoichiometric_subspace(const std::vector<RatVec>& vectors, std::size_t dim);

// Alpha-homogeneous orthogonal basis of span(vectors): block the span by
// abundance exponent, exact Gram-Schmidt within each block (blocks have
// disjoint supports, hence are mutually orthogonal), primitive integer
// generators, first nonzero component positive. Directions are ordered by
// alpha ascending, echelon order within a block. Throws NoHomogeneousBasis
// with a witness vector when the span does not split by alpha.
std::vector<BasisDirection> homogeneous_basis(const std::vector<RatVec>& span_vectors,
                                              const std::vector<Rational>& alpha);

// One row of the change of basis T, annotated with everything the dynamics
// needs: the exact generator g, its level, and the initial functional value
// g . z(0) (z(0) = N^{-alpha} x(0)). Orthonormal theta = g / |g|.
struct DirectionInfo {
  BasisDirection dir;
  int level = 0;          // 0 slow, 1 intermediate, 2 fastest
  bool constant = false;  // g . zeta_k = 0 for every reaction (level 0 only)
  Rational norm2;         // g . g
  double norm = 1.0;      // |g|
  double value0 = 0.0;    // g . z(0)
};

struct MultiscaleDecomposition {
  ReactionNetwork net;
  ScalingSpec scaling;
  std::vector<Rational> rho;

  // Classified levels; a slot that does not exist has m.finite = false.
  ScaleLevel level2, level1, level0;

  // Exact bases of the fast stoichiometric subspaces E2 = R(S2), E1 = R(S1).
  std::vector<RatVec> S2_range, S1_range;

  // All directions in T-row order: slow dynamical, constants, E1, E2.
  std::vector<DirectionInfo> directions;
  std::size_t s0 = 0, nconst = 0, s1 = 0, s2 = 0;

  Eigen::MatrixXd T;                // orthonormal rows matching `directions`
  Eigen::MatrixXd Pi0, Pi1, Pi2;   // Pi0 spans slow + constants

  // Reactions where the orthogonal projection of zeta_k differs from the
  // exponent-filtered limiting vector (informational).
  std::vector<std::size_t> projection_mismatch2, projection_mismatch1;

  std::size_t species() const { return net.species.size(); }
  std::size_t dim_total() const { return directions.size(); }
  std::size_t slow_begin() const { return 0; }
  std::size_t const_begin() const { return s0; }
  std::size_t mid_begin() const { return s0 + nconst; }
  std::size_t fast_begin() const { return s0 + nconst + s1; }

  const ScaleLevel& level(int idx) const {
    return idx == 2 ? level2 : (idx == 1 ? level1 : level0);
  }
  int fast_level_count() const {
    return (level2.m.finite ? 1 : 0) + (level1.m.finite ? 1 : 0);
  }

  // z = sum_l (w_l / |g_l|^2) g_l from functional values w_l = g_l . z.
  std::vector<double> state_from_functionals(const std::vector<double>& w) const;
  std::vector<double> functionals_from_state(const std::vector<double>& z) const;
  std::vector<double> initial_functionals() const;
  std::vector<double> initial_normalized_state() const;
};

// Full structural analysis: cascades level classification from the fastest
// subspace down, splits off conserved directions, and assembles projections
// and the change of basis. Throws PipelineError on K_{0,o} != 0, more than
// two fast levels, m0 != 0, or a missing slow level.
MultiscaleDecomposition decompose(const ReactionNetwork& net, const ScalingSpec& spec);

// gamma* = gamma - m0(gamma): the time change that makes the slowest level
// exponent exactly zero. Throws NoSlowDynamics for fully conserved networks.
Rational choose_gamma(const ReactionNetwork& net, const ScalingSpec& spec);

}  // namespace msrn
