#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "msrn/rational.hpp"

namespace msrn {

struct Species {
  std::string name;
  Rational alpha;                    // abundance exponent, >= 0
  std::int64_t initial_count = 0;    // molecules

  bool operator==(const Species&) const = default;
};

struct Reaction {
  std::string name;
  std::vector<std::int64_t> inputs;   // nu_ik per species, network order
  std::vector<std::int64_t> outputs;  // nu'_ik
  std::vector<std::int64_t> net;      // zeta_k = outputs - inputs, never all zero
  double kappa = 0.0;                 // normalized rate constant, > 0
  Rational beta;                      // rate exponent; kappa' = kappa * N^beta

  bool operator==(const Reaction&) const = default;
};

struct ReactionNetwork {
  std::string name;
  std::vector<Species> species;
  std::vector<Reaction> reactions;

  std::size_t species_count() const { return species.size(); }
  std::size_t reaction_count() const { return reactions.size(); }
  // Index of a species by name; species order fixes every coordinate
  // convention downstream.
  std::optional<std::size_t> species_index(const std::string& n) const;

  bool operator==(const ReactionNetwork&) const = default;
};

struct ScalingSpec {
  std::int64_t N = 2;  // system size, >= 2
  Rational gamma;      // time-scale exponent

  bool operator==(const ScalingSpec&) const = default;
};

struct SimulationDefaults {
  std::optional<double> tend;
  std::optional<std::uint64_t> seed;

  bool operator==(const SimulationDefaults&) const = default;
};

struct ParsedNetwork {
  ReactionNetwork network;
  ScalingSpec scaling;
  SimulationDefaults defaults;

  bool operator==(const ParsedNetwork&) const = default;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(int line, const std::string& msg)
      : std::runtime_error("line " + std::to_string(line) + ": " + msg), line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

// Parses the line-oriented network grammar ('#' comments):
//   network <name>
//   species <name> alpha <rational> init <integer>
//   reaction <name> : <multiset> -> <multiset> kappa <real> beta <rational>
//   N <integer> ; gamma <rational> ; optional tend <real>, seed <integer>
// Multisets are `0` or `A + 2 B`. Every error carries the offending line.
ParsedNetwork parse_network(const std::string& text);

// Emits the same grammar deterministically (declaration order, shortest
// round-trip reals); parse(serialize(x)) == x.
std::string serialize_network(const ParsedNetwork& pn);

inline const std::vector<std::int64_t>& reaction_vector(const Reaction& r) { return r.net; }

// lambda_k(x) = kappa_k N^beta_k * prod_i x_i (x_i - 1) ... (x_i - nu_ik + 1).
// Zero whenever some x_i < nu_ik.
double propensity(const Reaction& r, const std::vector<std::int64_t>& x,
                  const ScalingSpec& spec);

// lambda_k^N(z) = kappa_k * prod_i z_i (z_i - N^{-alpha_i}) ... with the
// finite-N steps kept by default; `limit_form` drops the N^{-alpha_i}
// corrections for species with alpha_i > 0 (discrete species keep step 1).
double normalized_propensity(const Reaction& r, const ReactionNetwork& net,
                             const std::vector<double>& z, const ScalingSpec& spec,
                             bool limit_form = false);

// Rational basis of {theta : theta . zeta_k = 0 for all k in subset}, in
// reduced row echelon form with primitive integer rows.
std::vector<RatVec> find_conservation_laws(const ReactionNetwork& net,
                                           const std::vector<std::size_t>& subset);
std::vector<RatVec> find_conservation_laws(const ReactionNetwork& net);

// Canonical echelon basis of the span of `vectors`: RREF rows, scaled to
// primitive integers, zero rows dropped.
std::vector<RatVec> canonical_basis(std::vector<RatVec> vectors);

// Shortest decimal string that parses back to exactly `v`.
std::string format_double(double v);

}  // namespace msrn
