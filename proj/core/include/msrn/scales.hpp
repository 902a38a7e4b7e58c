#pragma once

#include <cstddef>
#include <vector>

#include "msrn/network.hpp"

namespace msrn {

// rho_k = nu_k . alpha + beta_k + gamma, exact.
std::vector<Rational> reaction_exponents(const ReactionNetwork& net,
                                         const ScalingSpec& spec);

// Level exponent; `finite` is false when the subspace annihilates every
// reaction vector (the level has no dynamics at all).
struct LevelExponent {
  bool finite = false;
  Rational m;
};

// One direction of an alpha-homogeneous subspace basis: a primitive integer
// generator (pairwise orthogonal within its basis) whose support shares a
// single abundance exponent.
struct BasisDirection {
  RatVec generator;
  Rational alpha;

  bool operator==(const BasisDirection&) const = default;
};

// m = max{ rho_k - alpha_{theta_l} : g_l . zeta_k != 0 } over the basis.
LevelExponent level_exponent(const ReactionNetwork& net, const ScalingSpec& spec,
                             const std::vector<BasisDirection>& basis);

// Exponent-filtered projection of zeta_k onto the basis: component l survives
// iff rho_k - alpha_{theta_l} = m, so every limiting vector is
// alpha-homogeneous with shared exponent rho_k - m.
struct LimitingVector {
  std::size_t reaction = 0;
  RatVec species_coords;  // sum over surviving l of c_l g_l
  RatVec basis_coeffs;    // c_l = (g_l . zeta_k)/(g_l . g_l), one per direction
  Rational alpha;         // rho_k - m

  bool operator==(const LimitingVector&) const = default;
};

struct ScaleLevel {
  int index = 0;  // 0 = slow ... 2 = fastest
  LevelExponent m;
  std::vector<std::size_t> jump_class;   // rho_k = m, survives on an alpha=0 direction
  std::vector<std::size_t> drift_class;  // rho_k - alpha_theta = m for some alpha_theta > 0
  std::vector<LimitingVector> limiting;  // ascending reaction index

  const LimitingVector* find(std::size_t reaction) const;
  bool classified(std::size_t reaction) const { return find(reaction) != nullptr; }
};

ScaleLevel classify_level(const ReactionNetwork& net, const ScalingSpec& spec,
                          const std::vector<BasisDirection>& basis,
                          const LevelExponent& m);

// Union of the level's jump and drift classes, ascending and deduplicated.
std::vector<std::size_t> classified_reactions(const ScaleLevel& level);

enum class GeneratorKind { MarkovChain, Ode, Pdmp };

struct GeneratorTerm {
  std::size_t reaction = 0;
  std::vector<double> direction;  // species coordinates
};

// Data of the level generator: L h = sum_jump lambda_k (h(z+zeta) - h(z))
//                                  + sum_drift lambda_k grad h . zeta.
// kind = pdmp iff both term lists are nonempty; ode iff no jump terms.
struct GeneratorDescription {
  GeneratorKind kind = GeneratorKind::Ode;
  std::vector<GeneratorTerm> jump_terms;
  std::vector<GeneratorTerm> drift_terms;
};

GeneratorDescription limit_generator(const ScaleLevel& level, const ReactionNetwork& net);

const char* generator_kind_name(GeneratorKind k);

}  // namespace msrn
