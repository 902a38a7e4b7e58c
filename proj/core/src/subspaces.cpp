#include "msrn/subspaces.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

namespace msrn {

namespace {

RatVec primitive(RatVec v) {
  std::int64_t lcm_den = 1;
  for (const auto& x : v) lcm_den = std::lcm(lcm_den, x.den());
  for (auto& x : v) x *= Rational(lcm_den);
  std::int64_t g = 0;
  for (const auto& x : v) g = std::gcd(g, x.num() < 0 ? -x.num() : x.num());
  if (g > 1)
    for (auto& x : v) x /= Rational(g);
  canonical_sign(v);
  return v;
}

bool in_span(const std::vector<RatVec>& basis, const RatVec& v) {
  RatMat m(basis.begin(), basis.end());
  std::size_t r0 = rank(m);
  m.push_back(v);
  return rank(m) == r0;
}

std::string format_vec(const RatVec& v) {
  std::string s = "(";
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ", ";
    s += v[i].str();
  }
  return s + ")";
}

}  // namespace

SubspacePair stoichiometric_subspace(const std::vector<RatVec>& vectors, std::size_t dim) {
  SubspacePair out;
  out.range = canonical_basis(vectors);
  RatMat rows(vectors.begin(), vectors.end());
  if (rows.empty()) rows.push_back(RatVec(dim, Rational(0)));
  out.null_of_transpose = canonical_basis(null_space(std::move(rows)));
  return out;
}

std::vector<BasisDirection> homogeneous_basis(const std::vector<RatVec>& span_vectors,
                                              const std::vector<Rational>& alpha) {
  std::vector<BasisDirection> out;
  if (span_vectors.empty()) return out;
  std::size_t s = alpha.size();
  RatMat span_rows(span_vectors.begin(), span_vectors.end());
  std::size_t dim = rank(span_rows);
  if (dim == 0) return out;

  std::vector<Rational> levels(alpha.begin(), alpha.end());
  std::sort(levels.begin(), levels.end());
  levels.erase(std::unique(levels.begin(), levels.end()), levels.end());

  std::size_t total = 0;
  for (const auto& a : levels) {
    std::vector<RatVec> restricted;
    for (const auto& v : span_vectors) {
      RatVec r(s, Rational(0));
      bool nonzero = false;
      for (std::size_t i = 0; i < s; ++i) {
        if (alpha[i] != a) continue;
        r[i] = v[i];
        nonzero = nonzero || !v[i].is_zero();
      }
      if (nonzero) restricted.push_back(std::move(r));
    }
    auto block = canonical_basis(restricted);
    // Exact Gram-Schmidt inside the block; different blocks have disjoint
    // supports and are orthogonal for free.
    std::vector<RatVec> ortho;
    for (auto& b : block) {
      RatVec g = b;
      for (const auto& prev : ortho) {
        Rational c = dot(g, prev) / dot(prev, prev);
        if (c.is_zero()) continue;
        for (std::size_t i = 0; i < s; ++i) g[i] -= c * prev[i];
      }
      if (is_zero_vec(g)) continue;
      ortho.push_back(primitive(std::move(g)));
    }
    total += ortho.size();
    for (auto& g : ortho) out.push_back(BasisDirection{std::move(g), a});
  }

  if (total != dim) {
    // The alpha blocks generate strictly more than the span: some vector has
    // a block restriction outside the span. Report it.
    for (const auto& v : span_vectors) {
      for (const auto& a : levels) {
        RatVec r(s, Rational(0));
        for (std::size_t i = 0; i < s; ++i)
          if (alpha[i] == a) r[i] = v[i];
        if (is_zero_vec(r) || in_span(span_vectors, r)) continue;
        throw PipelineError(PipelineError::Code::NoHomogeneousBasis,
                            "subspace has no abundance-homogeneous basis; witness vector " +
                                format_vec(v) + " mixes exponents");
      }
    }
    throw PipelineError(PipelineError::Code::NoHomogeneousBasis,
                        "subspace has no abundance-homogeneous basis");
  }
  return out;
}

namespace {

struct Stage {
  ScaleLevel lvl;
  std::vector<BasisDirection> basis;
};

std::vector<Stage> cascade(const ReactionNetwork& net, const ScalingSpec& spec) {
  std::size_t s = net.species.size();
  std::vector<Rational> alpha(s);
  for (std::size_t i = 0; i < s; ++i) alpha[i] = net.species[i].alpha;

  std::vector<BasisDirection> basis_cur;
  for (std::size_t i = 0; i < s; ++i) {
    RatVec e(s, Rational(0));
    e[i] = Rational(1);
    basis_cur.push_back(BasisDirection{std::move(e), alpha[i]});
  }

  std::vector<Stage> stages;
  while (!basis_cur.empty()) {
    auto m = level_exponent(net, spec, basis_cur);
    if (!m.finite) break;  // all remaining directions are conserved
    auto lvl = classify_level(net, spec, basis_cur, m);
    stages.push_back(Stage{std::move(lvl), basis_cur});
    // Orthocomplement of the limiting vectors within span(basis_cur),
    // solved in coefficient space (the basis is orthogonal).
    RatMat coeff_rows;
    for (const auto& L : stages.back().lvl.limiting) {
      RatVec row(basis_cur.size());
      for (std::size_t l = 0; l < basis_cur.size(); ++l)
        row[l] = dot(basis_cur[l].generator, L.species_coords);
      coeff_rows.push_back(std::move(row));
    }
    std::vector<RatVec> next_span;
    for (const auto& c : null_space(std::move(coeff_rows))) {
      RatVec x(s, Rational(0));
      for (std::size_t l = 0; l < basis_cur.size(); ++l) {
        if (c[l].is_zero()) continue;
        for (std::size_t i = 0; i < s; ++i) x[i] += c[l] * basis_cur[l].generator[i];
      }
      next_span.push_back(std::move(x));
    }
    basis_cur = homogeneous_basis(next_span, alpha);
  }
  return stages;
}

}  // namespace

Rational choose_gamma(const ReactionNetwork& net, const ScalingSpec& spec) {
  auto stages = cascade(net, spec);
  if (stages.empty())
    throw PipelineError(PipelineError::Code::NoSlowDynamics,
                        "every direction is conserved; no time scale to normalize");
  return spec.gamma - stages.back().lvl.m.m;
}

std::vector<double> MultiscaleDecomposition::state_from_functionals(
    const std::vector<double>& w) const {
  std::vector<double> z(species(), 0.0);
  for (std::size_t l = 0; l < directions.size(); ++l) {
    double c = w[l] / directions[l].norm2.to_double();
    if (c == 0.0) continue;
    const auto& g = directions[l].dir.generator;
    for (std::size_t i = 0; i < z.size(); ++i)
      if (!g[i].is_zero()) z[i] += c * g[i].to_double();
  }
  return z;
}

std::vector<double> MultiscaleDecomposition::functionals_from_state(
    const std::vector<double>& z) const {
  std::vector<double> w(directions.size(), 0.0);
  for (std::size_t l = 0; l < directions.size(); ++l) {
    const auto& g = directions[l].dir.generator;
    double acc = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i)
      if (!g[i].is_zero()) acc += g[i].to_double() * z[i];
    w[l] = acc;
  }
  return w;
}

std::vector<double> MultiscaleDecomposition::initial_normalized_state() const {
  std::vector<double> z(species());
  for (std::size_t i = 0; i < z.size(); ++i)
    z[i] = static_cast<double>(net.species[i].initial_count) *
           std::pow(static_cast<double>(scaling.N), -net.species[i].alpha.to_double());
  return z;
}

std::vector<double> MultiscaleDecomposition::initial_functionals() const {
  return functionals_from_state(initial_normalized_state());
}

MultiscaleDecomposition decompose(const ReactionNetwork& net, const ScalingSpec& spec) {
  MultiscaleDecomposition D;
  D.net = net;
  D.scaling = spec;
  D.rho = reaction_exponents(net, spec);
  std::size_t s = net.species.size();
  std::vector<Rational> alpha(s);
  for (std::size_t i = 0; i < s; ++i) alpha[i] = net.species[i].alpha;

  auto stages = cascade(net, spec);
  if (stages.empty())
    throw PipelineError(PipelineError::Code::NoSlowDynamics,
                        "every direction is conserved; the network has no dynamics");
  if (stages.size() > 3)
    throw PipelineError(PipelineError::Code::TooManyLevels,
                        "network separates into " + std::to_string(stages.size() - 1) +
                            " fast time scales; at most two are supported");

  Rational m0 = stages.back().lvl.m.m;
  if (!(m0 == Rational(0)))
    throw PipelineError(PipelineError::Code::TimeNotNormalized,
                        "slowest time-scale exponent is " + m0.str() +
                            ", not 0; rerun with gamma " + (spec.gamma - m0).str());

  D.level0 = stages.back().lvl;
  D.level0.index = 0;
  if (stages.size() >= 2) {
    D.level1 = stages[stages.size() - 2].lvl;
    D.level1.index = 1;
  } else {
    D.level1.index = 1;
  }
  if (stages.size() == 3) {
    D.level2 = stages[0].lvl;
    D.level2.index = 2;
  } else {
    D.level2.index = 2;
  }

  if (!D.level0.jump_class.empty()) {
    std::string names;
    for (auto k : D.level0.jump_class) {
      if (!names.empty()) names += ", ";
      names += net.reactions[k].name;
    }
    throw PipelineError(PipelineError::Code::SlowJumpClass,
                        "slow level keeps jump reactions {" + names +
                            "}; the deterministic limit does not exist");
  }

  auto limiting_span = [](const ScaleLevel& lvl) {
    std::vector<RatVec> v;
    for (const auto& L : lvl.limiting) v.push_back(L.species_coords);
    return v;
  };
  auto fast_dirs = homogeneous_basis(limiting_span(D.level2), alpha);
  auto mid_dirs = homogeneous_basis(limiting_span(D.level1), alpha);
  D.S2_range = canonical_basis(limiting_span(D.level2));
  D.S1_range = canonical_basis(limiting_span(D.level1));

  // Exact check: does the orthogonal projection onto a fast subspace agree
  // with the exponent-filtered limiting vector?
  auto mismatches = [&](const ScaleLevel& lvl, const std::vector<BasisDirection>& dirs) {
    std::vector<std::size_t> out;
    for (const auto& L : lvl.limiting) {
      RatVec proj(s, Rational(0));
      for (const auto& d : dirs) {
        Rational c(0);
        for (std::size_t i = 0; i < s; ++i)
          if (net.reactions[L.reaction].net[i] != 0)
            c += d.generator[i] * Rational(net.reactions[L.reaction].net[i]);
        c /= dot(d.generator, d.generator);
        if (c.is_zero()) continue;
        for (std::size_t i = 0; i < s; ++i)
          if (!d.generator[i].is_zero()) proj[i] += c * d.generator[i];
      }
      if (!(proj == L.species_coords)) out.push_back(L.reaction);
    }
    return out;
  };
  D.projection_mismatch2 = mismatches(D.level2, fast_dirs);
  D.projection_mismatch1 = mismatches(D.level1, mid_dirs);

  auto conserved_by_all = [&](const RatVec& g) {
    for (const auto& r : net.reactions) {
      Rational p(0);
      for (std::size_t i = 0; i < s; ++i)
        if (r.net[i] != 0) p += g[i] * Rational(r.net[i]);
      if (!p.is_zero()) return false;
    }
    return true;
  };

  std::vector<BasisDirection> slow_dirs, const_dirs;
  for (auto& d : stages.back().basis)
    (conserved_by_all(d.generator) ? const_dirs : slow_dirs).push_back(d);

  auto z0 = [&]() {
    std::vector<double> z(s);
    for (std::size_t i = 0; i < s; ++i)
      z[i] = static_cast<double>(net.species[i].initial_count) *
             std::pow(static_cast<double>(spec.N), -net.species[i].alpha.to_double());
    return z;
  }();

  auto push_dir = [&](BasisDirection d, int level, bool constant) {
    DirectionInfo info;
    info.norm2 = dot(d.generator, d.generator);
    info.norm = std::sqrt(info.norm2.to_double());
    double v0 = 0.0;
    for (std::size_t i = 0; i < s; ++i)
      if (!d.generator[i].is_zero()) v0 += d.generator[i].to_double() * z0[i];
    info.value0 = v0;
    info.dir = std::move(d);
    info.level = level;
    info.constant = constant;
    D.directions.push_back(std::move(info));
  };
  for (auto& d : slow_dirs) push_dir(std::move(d), 0, false);
  for (auto& d : const_dirs) push_dir(std::move(d), 0, true);
  for (auto& d : mid_dirs) push_dir(std::move(d), 1, false);
  for (auto& d : fast_dirs) push_dir(std::move(d), 2, false);
  D.s0 = slow_dirs.size();
  D.nconst = const_dirs.size();
  D.s1 = mid_dirs.size();
  D.s2 = fast_dirs.size();

  if (D.dim_total() != s)
    throw PipelineError(PipelineError::Code::SingularSystem,
                        "subspace dimensions do not fill the species space");

  auto n = static_cast<Eigen::Index>(s);
  D.T.setZero(n, n);
  D.Pi0.setZero(n, n);
  D.Pi1.setZero(n, n);
  D.Pi2.setZero(n, n);
  for (std::size_t l = 0; l < D.directions.size(); ++l) {
    const auto& info = D.directions[l];
    Eigen::VectorXd theta(n);
    for (std::size_t i = 0; i < s; ++i)
      theta(static_cast<Eigen::Index>(i)) = info.dir.generator[i].to_double() / info.norm;
    D.T.row(static_cast<Eigen::Index>(l)) = theta.transpose();
    (info.level == 0 ? D.Pi0 : (info.level == 1 ? D.Pi1 : D.Pi2)) +=
        theta * theta.transpose();
  }

  return D;
}

}  // namespace msrn
