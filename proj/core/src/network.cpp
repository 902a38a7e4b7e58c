#include "msrn/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace msrn {

namespace {

std::vector<std::string> tokenize(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream ss(line);
  std::string tok;
  while (ss >> tok) out.push_back(tok);
  return out;
}

std::string strip_comment(const std::string& line) {
  std::size_t pos = line.find('#');
  return pos == std::string::npos ? line : line.substr(0, pos);
}

Rational parse_rational_at(const std::string& s, int line) {
  try {
    return Rational::parse(s);
  } catch (const std::invalid_argument& e) {
    throw ParseError(line, e.what());
  }
}

std::int64_t parse_integer_at(const std::string& s, int line, const char* what) {
  try {
    std::size_t pos = 0;
    std::int64_t v = std::stoll(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ParseError(line, std::string("malformed ") + what + " '" + s + "'");
  }
}

double parse_real_at(const std::string& s, int line, const char* what) {
  try {
    std::size_t pos = 0;
    double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ParseError(line, std::string("malformed ") + what + " '" + s + "'");
  }
}

bool is_count_token(const std::string& s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; });
}

// Parses `0` or `A + 2 B` from tokens[begin, end) into per-species counts.
std::vector<std::int64_t> parse_multiset(const std::vector<std::string>& toks,
                                         std::size_t begin, std::size_t end,
                                         const ReactionNetwork& net, int line,
                                         const std::string& rname) {
  std::vector<std::int64_t> counts(net.species.size(), 0);
  if (begin == end) throw ParseError(line, "empty species multiset in reaction '" + rname + "'");
  if (end - begin == 1 && toks[begin] == "0") return counts;
  std::size_t i = begin;
  while (i < end) {
    std::int64_t mult = 1;
    if (is_count_token(toks[i])) {
      mult = parse_integer_at(toks[i], line, "stoichiometric count");
      if (mult <= 0) throw ParseError(line, "non-positive stoichiometric count in reaction '" + rname + "'");
      ++i;
      if (i == end) throw ParseError(line, "dangling count in reaction '" + rname + "'");
    }
    auto idx = net.species_index(toks[i]);
    if (!idx) throw ParseError(line, "unknown species '" + toks[i] + "' in reaction '" + rname + "'");
    counts[*idx] += mult;
    ++i;
    if (i == end) break;
    if (toks[i] != "+") throw ParseError(line, "expected '+' between species in reaction '" + rname + "'");
    ++i;
    if (i == end) throw ParseError(line, "dangling '+' in reaction '" + rname + "'");
  }
  return counts;
}

std::string format_multiset(const std::vector<std::int64_t>& counts,
                            const std::vector<Species>& species) {
  std::string out;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (counts[i] == 0) continue;
    if (!out.empty()) out += " + ";
    if (counts[i] != 1) out += std::to_string(counts[i]) + " ";
    out += species[i].name;
  }
  return out.empty() ? "0" : out;
}

}  // namespace

std::optional<std::size_t> ReactionNetwork::species_index(const std::string& n) const {
  for (std::size_t i = 0; i < species.size(); ++i)
    if (species[i].name == n) return i;
  return std::nullopt;
}

std::string format_double(double v) {
  char buf[40];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) return buf;
  }
  return buf;
}

ParsedNetwork parse_network(const std::string& text) {
  ParsedNetwork pn;
  std::unordered_set<std::string> species_names, reaction_names;
  bool saw_network = false, saw_N = false, saw_gamma = false;
  std::istringstream in(text);
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    auto toks = tokenize(strip_comment(raw));
    if (toks.empty()) continue;
    const std::string& kw = toks[0];
    if (kw == "network") {
      if (toks.size() != 2) throw ParseError(line, "expected `network <name>`");
      if (saw_network) throw ParseError(line, "duplicate network directive");
      pn.network.name = toks[1];
      saw_network = true;
    } else if (kw == "species") {
      if (toks.size() != 6 || toks[2] != "alpha" || toks[4] != "init")
        throw ParseError(line, "expected `species <name> alpha <rational> init <integer>`");
      Species sp;
      sp.name = toks[1];
      if (!species_names.insert(sp.name).second)
        throw ParseError(line, "duplicate species name '" + sp.name + "'");
      sp.alpha = parse_rational_at(toks[3], line);
      if (sp.alpha.sign() < 0)
        throw ParseError(line, "species '" + sp.name + "' has negative alpha " + sp.alpha.str());
      sp.initial_count = parse_integer_at(toks[5], line, "initial count");
      if (sp.initial_count < 0)
        throw ParseError(line, "species '" + sp.name + "' has negative initial count");
      pn.network.species.push_back(std::move(sp));
    } else if (kw == "reaction") {
      // reaction <name> : <multiset> -> <multiset> kappa <real> beta <rational>
      if (toks.size() < 8 || toks[2] != ":")
        throw ParseError(line, "expected `reaction <name> : <inputs> -> <outputs> kappa <real> beta <rational>`");
      Reaction r;
      r.name = toks[1];
      if (!reaction_names.insert(r.name).second)
        throw ParseError(line, "duplicate reaction name '" + r.name + "'");
      auto arrow = std::find(toks.begin() + 3, toks.end(), std::string("->"));
      auto kappa_kw = std::find(toks.begin() + 3, toks.end(), std::string("kappa"));
      if (arrow == toks.end() || kappa_kw == toks.end() || kappa_kw < arrow)
        throw ParseError(line, "reaction '" + r.name + "' missing `->` or `kappa`");
      std::size_t arrow_i = static_cast<std::size_t>(arrow - toks.begin());
      std::size_t kappa_i = static_cast<std::size_t>(kappa_kw - toks.begin());
      if (kappa_i + 4 != toks.size() || toks[kappa_i + 2] != "beta")
        throw ParseError(line, "reaction '" + r.name + "' must end with `kappa <real> beta <rational>`");
      r.inputs = parse_multiset(toks, 3, arrow_i, pn.network, line, r.name);
      r.outputs = parse_multiset(toks, arrow_i + 1, kappa_i, pn.network, line, r.name);
      r.kappa = parse_real_at(toks[kappa_i + 1], line, "rate constant");
      if (!(r.kappa > 0))
        throw ParseError(line, "reaction '" + r.name + "' has non-positive rate constant");
      r.beta = parse_rational_at(toks[kappa_i + 3], line);
      r.net.resize(pn.network.species.size());
      for (std::size_t i = 0; i < r.net.size(); ++i) r.net[i] = r.outputs[i] - r.inputs[i];
      if (std::all_of(r.net.begin(), r.net.end(), [](std::int64_t z) { return z == 0; }))
        throw ParseError(line, "reaction '" + r.name + "' has zero net change");
      pn.network.reactions.push_back(std::move(r));
    } else if (kw == "N") {
      if (toks.size() != 2) throw ParseError(line, "expected `N <integer>`");
      pn.scaling.N = parse_integer_at(toks[1], line, "system size");
      if (pn.scaling.N < 2) throw ParseError(line, "system size N must be at least 2");
      saw_N = true;
    } else if (kw == "gamma") {
      if (toks.size() != 2) throw ParseError(line, "expected `gamma <rational>`");
      pn.scaling.gamma = parse_rational_at(toks[1], line);
      saw_gamma = true;
    } else if (kw == "tend") {
      if (toks.size() != 2) throw ParseError(line, "expected `tend <real>`");
      double t = parse_real_at(toks[1], line, "tend");
      if (!(t > 0)) throw ParseError(line, "tend must be positive");
      pn.defaults.tend = t;
    } else if (kw == "seed") {
      if (toks.size() != 2) throw ParseError(line, "expected `seed <integer>`");
      std::int64_t s = parse_integer_at(toks[1], line, "seed");
      if (s < 0) throw ParseError(line, "seed must be non-negative");
      pn.defaults.seed = static_cast<std::uint64_t>(s);
    } else {
      throw ParseError(line, "unknown directive '" + kw + "'");
    }
  }
  if (!saw_network) throw ParseError(line, "missing `network <name>` directive");
  if (!saw_N) throw ParseError(line, "missing `N <integer>` directive");
  (void)saw_gamma;  // gamma defaults to 0, matching the unscaled time convention
  return pn;
}

std::string serialize_network(const ParsedNetwork& pn) {
  std::ostringstream out;
  out << "network " << pn.network.name << "\n";
  for (const auto& sp : pn.network.species)
    out << "species " << sp.name << " alpha " << sp.alpha.str() << " init "
        << sp.initial_count << "\n";
  for (const auto& r : pn.network.reactions)
    out << "reaction " << r.name << " : " << format_multiset(r.inputs, pn.network.species)
        << " -> " << format_multiset(r.outputs, pn.network.species) << " kappa "
        << format_double(r.kappa) << " beta " << r.beta.str() << "\n";
  out << "N " << pn.scaling.N << "\n";
  out << "gamma " << pn.scaling.gamma.str() << "\n";
  if (pn.defaults.tend) out << "tend " << format_double(*pn.defaults.tend) << "\n";
  if (pn.defaults.seed) out << "seed " << *pn.defaults.seed << "\n";
  return out.str();
}

double propensity(const Reaction& r, const std::vector<std::int64_t>& x,
                  const ScalingSpec& spec) {
  double prod = r.kappa * std::pow(static_cast<double>(spec.N), r.beta.to_double());
  for (std::size_t i = 0; i < r.inputs.size(); ++i) {
    for (std::int64_t j = 0; j < r.inputs[i]; ++j) {
      if (x[i] <= j) return 0.0;
      prod *= static_cast<double>(x[i] - j);
    }
  }
  return prod;
}

double normalized_propensity(const Reaction& r, const ReactionNetwork& net,
                             const std::vector<double>& z, const ScalingSpec& spec,
                             bool limit_form) {
  double prod = r.kappa;
  for (std::size_t i = 0; i < r.inputs.size(); ++i) {
    if (r.inputs[i] == 0) continue;
    double step;
    if (net.species[i].alpha.is_zero())
      step = 1.0;  // discrete species keep their falling factorial in the limit
    else
      step = limit_form ? 0.0
                        : std::pow(static_cast<double>(spec.N),
                                   -net.species[i].alpha.to_double());
    for (std::int64_t j = 0; j < r.inputs[i]; ++j) {
      double factor = z[i] - static_cast<double>(j) * step;
      if (factor <= 0.0) return 0.0;
      prod *= factor;
    }
  }
  return prod;
}

std::vector<RatVec> canonical_basis(std::vector<RatVec> vectors) {
  if (vectors.empty()) return {};
  rref(vectors);
  std::vector<RatVec> out;
  for (auto& v : vectors) {
    if (is_zero_vec(v)) continue;
    // Scale to the primitive integer representative with positive lead.
    std::int64_t lcm_den = 1;
    for (const auto& x : v) lcm_den = std::lcm(lcm_den, x.den());
    for (auto& x : v) x *= Rational(lcm_den);
    std::int64_t g = 0;
    for (const auto& x : v) g = std::gcd(g, x.num() < 0 ? -x.num() : x.num());
    if (g > 1)
      for (auto& x : v) x /= Rational(g);
    canonical_sign(v);
    out.push_back(std::move(v));
  }
  return out;
}

std::vector<RatVec> find_conservation_laws(const ReactionNetwork& net,
                                           const std::vector<std::size_t>& subset) {
  std::size_t n = net.species.size();
  RatMat m;
  for (auto k : subset) {
    RatVec row(n);
    for (std::size_t i = 0; i < n; ++i) row[i] = Rational(net.reactions[k].net[i]);
    m.push_back(std::move(row));
  }
  if (m.empty()) m.push_back(RatVec(n, Rational(0)));  // null map: whole space conserved
  return canonical_basis(null_space(std::move(m)));
}

std::vector<RatVec> find_conservation_laws(const ReactionNetwork& net) {
  std::vector<std::size_t> all(net.reaction_count());
  std::iota(all.begin(), all.end(), 0);
  return find_conservation_laws(net, all);
}

}  // namespace msrn
