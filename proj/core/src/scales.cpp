#include "msrn/scales.hpp"

#include <algorithm>

namespace msrn {

std::vector<Rational> reaction_exponents(const ReactionNetwork& net,
                                         const ScalingSpec& spec) {
  std::vector<Rational> rho;
  rho.reserve(net.reactions.size());
  for (const auto& r : net.reactions) {
    Rational v = r.beta + spec.gamma;
    for (std::size_t i = 0; i < net.species.size(); ++i)
      v += Rational(r.inputs[i]) * net.species[i].alpha;
    rho.push_back(v);
  }
  return rho;
}

namespace {

Rational pairing(const BasisDirection& dir, const std::vector<std::int64_t>& zeta) {
  Rational s(0);
  for (std::size_t i = 0; i < zeta.size(); ++i)
    if (zeta[i] != 0) s += dir.generator[i] * Rational(zeta[i]);
  return s;
}

}  // namespace

LevelExponent level_exponent(const ReactionNetwork& net, const ScalingSpec& spec,
                             const std::vector<BasisDirection>& basis) {
  auto rho = reaction_exponents(net, spec);
  LevelExponent out;
  for (std::size_t k = 0; k < net.reactions.size(); ++k) {
    for (const auto& dir : basis) {
      if (pairing(dir, net.reactions[k].net).is_zero()) continue;
      Rational cand = rho[k] - dir.alpha;
      if (!out.finite || cand > out.m) {
        out.finite = true;
        out.m = cand;
      }
    }
  }
  return out;
}

const LimitingVector* ScaleLevel::find(std::size_t reaction) const {
  for (const auto& lv : limiting)
    if (lv.reaction == reaction) return &lv;
  return nullptr;
}

ScaleLevel classify_level(const ReactionNetwork& net, const ScalingSpec& spec,
                          const std::vector<BasisDirection>& basis,
                          const LevelExponent& m) {
  ScaleLevel level;
  level.m = m;
  if (!m.finite) return level;
  auto rho = reaction_exponents(net, spec);
  std::size_t s = net.species.size();
  for (std::size_t k = 0; k < net.reactions.size(); ++k) {
    LimitingVector lv;
    lv.reaction = k;
    lv.species_coords.assign(s, Rational(0));
    lv.basis_coeffs.assign(basis.size(), Rational(0));
    lv.alpha = rho[k] - m.m;
    bool jump = false, drift = false;
    for (std::size_t l = 0; l < basis.size(); ++l) {
      const auto& dir = basis[l];
      if (rho[k] - dir.alpha != m.m) continue;  // component does not survive
      Rational c = pairing(dir, net.reactions[k].net);
      if (c.is_zero()) continue;
      c /= dot(dir.generator, dir.generator);
      lv.basis_coeffs[l] = c;
      for (std::size_t i = 0; i < s; ++i)
        if (!dir.generator[i].is_zero()) lv.species_coords[i] += c * dir.generator[i];
      (dir.alpha.is_zero() ? jump : drift) = true;
    }
    if (!jump && !drift) continue;
    if (jump) level.jump_class.push_back(k);
    if (drift) level.drift_class.push_back(k);
    level.limiting.push_back(std::move(lv));
  }
  return level;
}

GeneratorDescription limit_generator(const ScaleLevel& level, const ReactionNetwork& net) {
  (void)net;
  GeneratorDescription g;
  auto term_for = [&](std::size_t k) {
    GeneratorTerm t;
    t.reaction = k;
    const LimitingVector* lv = level.find(k);
    t.direction.reserve(lv->species_coords.size());
    for (const auto& c : lv->species_coords) t.direction.push_back(c.to_double());
    return t;
  };
  for (auto k : level.jump_class) g.jump_terms.push_back(term_for(k));
  for (auto k : level.drift_class) g.drift_terms.push_back(term_for(k));
  if (!g.jump_terms.empty())
    g.kind = g.drift_terms.empty() ? GeneratorKind::MarkovChain : GeneratorKind::Pdmp;
  else
    g.kind = GeneratorKind::Ode;
  return g;
}

const char* generator_kind_name(GeneratorKind k) {
  switch (k) {
    case GeneratorKind::MarkovChain: return "markov-chain";
    case GeneratorKind::Ode: return "ode";
    case GeneratorKind::Pdmp: return "pdmp";
  }
  return "?";
}

std::vector<std::size_t> classified_reactions(const ScaleLevel& level) {
  std::vector<std::size_t> ks(level.jump_class);
  ks.insert(ks.end(), level.drift_class.begin(), level.drift_class.end());
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
  return ks;
}

}  // namespace msrn
