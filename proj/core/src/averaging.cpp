#include "msrn/averaging.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace msrn {

namespace {

constexpr std::size_t kMaxChainStates = 200000;
constexpr std::size_t kMaxDenseSolve = 4000;
constexpr std::size_t kMaxCornerScan = 200000;

}  // namespace

AveragingEngine::AveragingEngine(const MultiscaleDecomposition& D) : D_(&D) {
  s_ = D.species();
  nr_ = D.net.reactions.size();
  for (std::size_t i = 0; i < s_; ++i)
    if (D.net.species[i].alpha.is_zero()) discrete_.push_back(i);

  for (std::size_t l = 0; l < D.directions.size(); ++l) {
    const auto& info = D.directions[l];
    if (info.constant)
      const_dirs_.push_back(l);
    else if (info.level == 0)
      slow_dirs_.push_back(l);
    else if (info.level == 1)
      mid_dirs_.push_back(l);
    else
      fast_dirs_.push_back(l);
  }
  if (D.level2.m.finite)
    fastest_level_ = 2;
  else if (D.level1.m.finite)
    fastest_level_ = 1;
  else
    fastest_level_ = 0;
  if (fastest_level_ <= 1) {
    fast_dirs_ = mid_dirs_;  // two-scale: the single fast level sits in slot 1
    mid_dirs_.clear();
  }

  const ScaleLevel& fl = D.level(fastest_level_);
  fastest_finite_ = fastest_level_ > 0 && fl.drift_class.empty();
  for (auto l : fast_dirs_)
    if (!D.directions[l].dir.alpha.is_zero()) fastest_finite_ = false;

  theta_zeta_.setZero(static_cast<Eigen::Index>(D.directions.size()),
                      static_cast<Eigen::Index>(nr_));
  survives_.assign(D.directions.size(), std::vector<char>(nr_, 0));
  for (std::size_t l = 0; l < D.directions.size(); ++l) {
    const auto& info = D.directions[l];
    const LevelExponent& m = D.level(info.level).m;
    for (std::size_t k = 0; k < nr_; ++k) {
      Rational p(0);
      const auto& zeta = D.net.reactions[k].net;
      for (std::size_t i = 0; i < s_; ++i)
        if (zeta[i] != 0) p += info.dir.generator[i] * Rational(zeta[i]);
      theta_zeta_(static_cast<Eigen::Index>(l), static_cast<Eigen::Index>(k)) =
          p.to_double() / info.norm;
      if (m.finite && !p.is_zero() && D.rho[k] - info.dir.alpha == m.m)
        survives_[l][k] = 1;
    }
  }

  auto z0 = D.initial_normalized_state();
  v0_ = D.T * Eigen::Map<const Eigen::VectorXd>(z0.data(),
                                                static_cast<Eigen::Index>(z0.size()));
}

Eigen::VectorXd AveragingEngine::initial_v() const { return v0_; }

Eigen::VectorXd AveragingEngine::full_v_from_slow(const Eigen::VectorXd& v0) const {
  Eigen::VectorXd v = v0_;
  for (std::size_t j = 0; j < slow_dirs_.size(); ++j)
    v(static_cast<Eigen::Index>(slow_dirs_[j])) = v0(static_cast<Eigen::Index>(j));
  return v;
}

Eigen::VectorXd AveragingEngine::state_from_v(const Eigen::VectorXd& v) const {
  return D_->T.transpose() * v;
}

double AveragingEngine::limit_propensity(std::size_t k, const Eigen::VectorXd& z) const {
  const Reaction& r = D_->net.reactions[k];
  double prod = r.kappa;
  for (std::size_t i = 0; i < s_; ++i) {
    if (r.inputs[i] == 0) continue;
    double step = D_->net.species[i].alpha.is_zero() ? 1.0 : 0.0;
    for (std::int64_t j = 0; j < r.inputs[i]; ++j) {
      double f = z(static_cast<Eigen::Index>(i)) - static_cast<double>(j) * step;
      if (f <= 0.0) return 0.0;
      prod *= f;
    }
  }
  return prod;
}

double AveragingEngine::lattice_step(std::size_t l) const {
  const auto& info = D_->directions[l];
  if (!info.dir.alpha.is_zero()) return 1.0;
  const ScaleLevel& lvl = D_->level(info.level);
  std::int64_t g = 0;
  for (auto k : lvl.jump_class) {
    if (!survives_[l][k]) continue;
    Rational p(0);
    const auto& zeta = D_->net.reactions[k].net;
    for (std::size_t i = 0; i < s_; ++i)
      if (zeta[i] != 0) p += info.dir.generator[i] * Rational(zeta[i]);
    if (p.den() != 1) continue;  // integer by construction for alpha = 0 dirs
    std::int64_t n = p.num() < 0 ? -p.num() : p.num();
    g = std::gcd(g, n);
  }
  return g == 0 ? 1.0 : static_cast<double>(g) / info.norm;
}

void AveragingEngine::check_affine(std::size_t k, const std::vector<std::size_t>& dirs,
                                   const char* what) const {
  std::int64_t total = 0;
  for (std::size_t i = 0; i < s_; ++i) {
    bool supported = false;
    for (auto l : dirs)
      if (!D_->directions[l].dir.generator[i].is_zero()) supported = true;
    if (supported) total += D_->net.reactions[k].inputs[i];
  }
  if (total > 1)
    throw PipelineError(PipelineError::Code::MomentClosureUnavailable,
                        std::string("moment closure unavailable: propensity of reaction '") +
                            D_->net.reactions[k].name + "' is not affine in the " + what);
}

std::vector<std::int64_t> AveragingEngine::integer_fast_corner(
    const Eigen::VectorXd& v) const {
  // Base point: projection of the discrete state onto the frozen (non-fast)
  // alpha = 0 directions; the fast directions then supply free multipliers.
  std::vector<double> base(discrete_.size(), 0.0);
  for (std::size_t l = 0; l < D_->directions.size(); ++l) {
    const auto& info = D_->directions[l];
    if (!info.dir.alpha.is_zero()) continue;
    if (std::find(fast_dirs_.begin(), fast_dirs_.end(), l) != fast_dirs_.end()) continue;
    double w = v(static_cast<Eigen::Index>(l)) * info.norm;  // g . z
    if (std::abs(w - std::round(w)) > 1e-6)
      throw PipelineError(PipelineError::Code::Unsupported,
                          "query point has a non-integer frozen discrete coordinate");
    double c = std::round(w) / info.norm2.to_double();
    for (std::size_t d = 0; d < discrete_.size(); ++d)
      base[d] += c * info.dir.generator[discrete_[d]].to_double();
  }

  auto gen_on_discrete = [&](std::size_t l) {
    std::vector<double> g(discrete_.size());
    for (std::size_t d = 0; d < discrete_.size(); ++d)
      g[d] = D_->directions[l].dir.generator[discrete_[d]].to_double();
    return g;
  };
  auto try_candidate = [&](const std::vector<double>& x) -> std::vector<std::int64_t> {
    std::vector<std::int64_t> out(x.size());
    for (std::size_t d = 0; d < x.size(); ++d) {
      double r = std::round(x[d]);
      if (std::abs(x[d] - r) > 1e-6 || r < -0.5) return {};
      out[d] = static_cast<std::int64_t>(r);
    }
    return out;
  };

  if (fast_dirs_.size() == 1) {
    auto g = gen_on_discrete(fast_dirs_[0]);
    std::size_t pivot = 0;
    while (pivot < g.size() && g[pivot] == 0.0) ++pivot;
    for (std::size_t t = 0; t <= kMaxCornerScan; ++t) {
      double c = (static_cast<double>(t) - base[pivot]) / g[pivot];
      std::vector<double> x(base);
      for (std::size_t d = 0; d < x.size(); ++d) x[d] += c * g[d];
      auto cand = try_candidate(x);
      if (!cand.empty()) return cand;
    }
  } else if (fast_dirs_.size() == 2) {
    auto g1 = gen_on_discrete(fast_dirs_[0]), g2 = gen_on_discrete(fast_dirs_[1]);
    std::size_t p1 = 0, p2 = 0;
    double det = 0.0;
    for (std::size_t a = 0; a < g1.size() && det == 0.0; ++a)
      for (std::size_t b = 0; b < g1.size() && det == 0.0; ++b) {
        det = g1[a] * g2[b] - g1[b] * g2[a];
        if (det != 0.0) p1 = a, p2 = b;
      }
    std::size_t side = 450;  // ~200k candidate pairs
    for (std::size_t t1 = 0; t1 <= side; ++t1)
      for (std::size_t t2 = 0; t2 <= side; ++t2) {
        double r1 = static_cast<double>(t1) - base[p1];
        double r2 = static_cast<double>(t2) - base[p2];
        double c1 = (r1 * g2[p2] - r2 * g2[p1]) / det;
        double c2 = (g1[p1] * r2 - g1[p2] * r1) / det;
        std::vector<double> x(base);
        for (std::size_t d = 0; d < x.size(); ++d) x[d] += c1 * g1[d] + c2 * g2[d];
        auto cand = try_candidate(x);
        if (!cand.empty()) return cand;
      }
  } else {
    throw PipelineError(PipelineError::Code::Unsupported,
                        "finite fast solve supports at most two discrete fast directions");
  }
  throw PipelineError(PipelineError::Code::UnboundedFastChain,
                      "no feasible integer fast configuration found for the query point");
}

AveragingEngine::FiniteChain AveragingEngine::solve_finite(
    const Eigen::VectorXd& v, const std::vector<std::int64_t>& start) const {
  const ScaleLevel& lvl = D_->level(fastest_level_);
  Eigen::VectorXd z_cont = state_from_v(v);

  std::vector<std::vector<std::int64_t>> moves;
  std::vector<std::size_t> move_reaction;
  for (auto k : lvl.jump_class) {
    std::vector<std::int64_t> d(discrete_.size());
    for (std::size_t j = 0; j < discrete_.size(); ++j)
      d[j] = D_->net.reactions[k].net[discrete_[j]];
    moves.push_back(std::move(d));
    move_reaction.push_back(k);
  }

  auto rate_of = [&](const std::vector<std::int64_t>& x, std::size_t k) {
    Eigen::VectorXd z = z_cont;
    for (std::size_t j = 0; j < discrete_.size(); ++j)
      z(static_cast<Eigen::Index>(discrete_[j])) = static_cast<double>(x[j]);
    return limit_propensity(k, z);
  };

  std::map<std::vector<std::int64_t>, std::size_t> index;
  std::vector<std::vector<std::int64_t>> states;
  struct Edge {
    std::size_t from, to;
    double rate;
  };
  std::vector<Edge> edges;
  states.push_back(start);
  index[start] = 0;
  for (std::size_t q = 0; q < states.size(); ++q) {
    auto x = states[q];
    for (std::size_t mv = 0; mv < moves.size(); ++mv) {
      double rate = rate_of(x, move_reaction[mv]);
      if (rate <= 0.0) continue;
      auto y = x;
      bool ok = true;
      for (std::size_t j = 0; j < y.size(); ++j) {
        y[j] += moves[mv][j];
        if (y[j] < 0) ok = false;
      }
      if (!ok) continue;
      auto [it, inserted] = index.try_emplace(y, states.size());
      if (inserted) {
        states.push_back(y);
        if (states.size() > kMaxChainStates)
          throw PipelineError(PipelineError::Code::UnboundedFastChain,
                              "fast chain state space exceeds " +
                                  std::to_string(kMaxChainStates) + " states");
      }
      edges.push_back(Edge{q, it->second, rate});
    }
  }

  std::size_t n = states.size();
  // Closed communicating classes via Kosaraju; the equilibrium is unique iff
  // exactly one class has no outgoing edge.
  std::vector<std::vector<std::size_t>> fwd(n), rev(n);
  for (const auto& e : edges) {
    fwd[e.from].push_back(e.to);
    rev[e.to].push_back(e.from);
  }
  std::vector<std::size_t> order;
  order.reserve(n);
  std::vector<char> seen(n, 0);
  for (std::size_t root = 0; root < n; ++root) {
    if (seen[root]) continue;
    std::vector<std::pair<std::size_t, std::size_t>> stack{{root, 0}};
    seen[root] = 1;
    while (!stack.empty()) {
      auto& [u, pos] = stack.back();
      if (pos < fwd[u].size()) {
        std::size_t w = fwd[u][pos++];
        if (!seen[w]) {
          seen[w] = 1;
          stack.push_back({w, 0});
        }
      } else {
        order.push_back(u);
        stack.pop_back();
      }
    }
  }
  std::vector<std::size_t> comp(n, SIZE_MAX);
  std::size_t ncomp = 0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if (comp[*it] != SIZE_MAX) continue;
    std::vector<std::size_t> stack{*it};
    comp[*it] = ncomp;
    while (!stack.empty()) {
      std::size_t u = stack.back();
      stack.pop_back();
      for (auto w : rev[u])
        if (comp[w] == SIZE_MAX) {
          comp[w] = ncomp;
          stack.push_back(w);
        }
    }
    ++ncomp;
  }
  std::vector<char> closed(ncomp, 1);
  for (const auto& e : edges)
    if (comp[e.from] != comp[e.to]) closed[comp[e.from]] = 0;
  std::size_t nclosed = 0, closed_id = 0;
  for (std::size_t c = 0; c < ncomp; ++c)
    if (closed[c]) {
      ++nclosed;
      closed_id = c;
    }
  if (nclosed != 1)
    throw PipelineError(PipelineError::Code::ReducibleFastChain,
                        "conditional equilibrium is not unique: " +
                            std::to_string(nclosed) + " closed communicating classes among " +
                            std::to_string(n) + " states");

  std::vector<std::size_t> members;
  std::vector<std::size_t> local(n, SIZE_MAX);
  for (std::size_t q = 0; q < n; ++q)
    if (comp[q] == closed_id) {
      local[q] = members.size();
      members.push_back(q);
    }
  std::size_t nc = members.size();
  if (nc > kMaxDenseSolve)
    throw PipelineError(PipelineError::Code::UnboundedFastChain,
                        "fast chain closed class too large for direct solve (" +
                            std::to_string(nc) + " states)");

  // pi Q = 0 with sum(pi) = 1: solve Q^T pi = 0 with the last balance
  // equation replaced by the normalization row.
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(nc),
                                            static_cast<Eigen::Index>(nc));
  for (const auto& e : edges) {
    if (local[e.from] == SIZE_MAX || local[e.to] == SIZE_MAX) continue;
    auto i = static_cast<Eigen::Index>(local[e.from]);
    auto j = static_cast<Eigen::Index>(local[e.to]);
    A(j, i) += e.rate;
    A(i, i) -= e.rate;
  }
  Eigen::MatrixXd Asolve = A;
  Asolve.row(static_cast<Eigen::Index>(nc - 1)).setOnes();
  Eigen::VectorXd b = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(nc));
  b(static_cast<Eigen::Index>(nc - 1)) = 1.0;
  Eigen::VectorXd pi = Asolve.partialPivLu().solve(b);

  double scale = std::max(1.0, nc == 0 ? 1.0 : A.cwiseAbs().maxCoeff());
  double resid = (A * pi).cwiseAbs().maxCoeff();
  if (!std::isfinite(resid) || resid > 1e-10 * scale)
    throw PipelineError(PipelineError::Code::SingularSystem,
                        "stationary solve residual " + std::to_string(resid) +
                            " exceeds tolerance");
  double total = 0.0;
  for (Eigen::Index i = 0; i < pi.size(); ++i) {
    if (pi(i) < -1e-12)
      throw PipelineError(PipelineError::Code::SingularSystem,
                          "stationary distribution has negative mass");
    pi(i) = std::max(0.0, pi(i));
    total += pi(i);
  }
  pi /= total;

  FiniteChain out;
  out.states.reserve(nc);
  out.probabilities.reserve(nc);
  for (std::size_t j = 0; j < nc; ++j) {
    out.states.push_back(states[members[j]]);
    out.probabilities.push_back(pi(static_cast<Eigen::Index>(j)));
  }
  return out;
}

std::vector<double> AveragingEngine::moment_solve(const Eigen::VectorXd& v) const {
  const ScaleLevel& lvl = D_->level(fastest_level_);
  auto classified = classified_reactions(lvl);
  for (auto k : classified) check_affine(k, fast_dirs_, "fast coordinates");

  std::size_t nf = fast_dirs_.size();
  Eigen::VectorXd zstar = state_from_v(v);
  std::vector<double> a(nr_, 0.0);
  Eigen::MatrixXd bcoef = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(nr_),
                                                static_cast<Eigen::Index>(nf));
  for (auto k : classified) {
    double base = limit_propensity(k, zstar);
    a[k] = base;
    for (std::size_t j = 0; j < nf; ++j) {
      Eigen::VectorXd zs =
          zstar + D_->T.row(static_cast<Eigen::Index>(fast_dirs_[j])).transpose();
      bcoef(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) =
          limit_propensity(k, zs) - base;
    }
    for (std::size_t j = 0; j < nf; ++j)
      a[k] -= bcoef(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) *
              v(static_cast<Eigen::Index>(fast_dirs_[j]));
  }

  Eigen::MatrixXd M = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(nf),
                                            static_cast<Eigen::Index>(nf));
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(nf));
  for (std::size_t l = 0; l < nf; ++l) {
    for (auto k : classified) {
      if (!survives_[fast_dirs_[l]][k]) continue;
      double tz = theta_zeta_(static_cast<Eigen::Index>(fast_dirs_[l]),
                              static_cast<Eigen::Index>(k));
      rhs(static_cast<Eigen::Index>(l)) -= a[k] * tz;
      for (std::size_t j = 0; j < nf; ++j)
        M(static_cast<Eigen::Index>(l), static_cast<Eigen::Index>(j)) +=
            bcoef(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) * tz;
    }
  }
  Eigen::FullPivLU<Eigen::MatrixXd> lu(M);
  if (!lu.isInvertible())
    throw PipelineError(PipelineError::Code::SingularSystem,
                        "stationary moment system of the fast level is singular");
  Eigen::VectorXd mom = lu.solve(rhs);
  std::vector<double> out(nf);
  for (std::size_t j = 0; j < nf; ++j) {
    double mj = mom(static_cast<Eigen::Index>(j));
    if (!std::isfinite(mj))
      throw PipelineError(PipelineError::Code::SingularSystem,
                          "stationary moments are not finite");
    out[j] = mj;
  }
  return out;
}

ConditionalEquilibrium AveragingEngine::fast_equilibrium_from_counts(
    const Eigen::VectorXd& v, const std::vector<std::int64_t>& start) const {
  ConditionalEquilibrium eq;
  eq.kind = ConditionalEquilibrium::Kind::FiniteDistribution;
  eq.discrete_species = discrete_;
  auto chain = solve_finite(v, start);
  eq.states = std::move(chain.states);
  eq.probabilities = std::move(chain.probabilities);
  return eq;
}

ConditionalEquilibrium AveragingEngine::fast_equilibrium(const Eigen::VectorXd& v) const {
  ConditionalEquilibrium eq;
  if (fastest_level_ == 0) return eq;  // no fast level: empty first-moments record
  if (fastest_finite_) return fast_equilibrium_from_counts(v, integer_fast_corner(v));
  eq.kind = ConditionalEquilibrium::Kind::FirstMoments;
  eq.dir_indices = fast_dirs_;
  eq.moments = moment_solve(v);
  return eq;
}

double AveragingEngine::average_over(std::size_t k, const ConditionalEquilibrium& eq,
                                     const Eigen::VectorXd& v) const {
  if (eq.kind == ConditionalEquilibrium::Kind::FiniteDistribution) {
    Eigen::VectorXd z = state_from_v(v);
    double acc = 0.0;
    for (std::size_t q = 0; q < eq.states.size(); ++q) {
      if (eq.probabilities[q] == 0.0) continue;
      for (std::size_t j = 0; j < eq.discrete_species.size(); ++j)
        z(static_cast<Eigen::Index>(eq.discrete_species[j])) =
            static_cast<double>(eq.states[q][j]);
      acc += eq.probabilities[q] * limit_propensity(k, z);
    }
    return acc;
  }
  if (eq.dir_indices.empty()) return limit_propensity(k, state_from_v(v));
  check_affine(k, eq.dir_indices, "fast coordinates");
  Eigen::VectorXd vbar = v;
  for (std::size_t j = 0; j < eq.dir_indices.size(); ++j)
    vbar(static_cast<Eigen::Index>(eq.dir_indices[j])) = eq.moments[j];
  return limit_propensity(k, state_from_v(vbar));
}

double AveragingEngine::lambda_bar(std::size_t k, const Eigen::VectorXd& v) const {
  return average_over(k, fast_equilibrium(v), v);
}

AveragingEngine::MidLinearization AveragingEngine::mid_linearize(
    const Eigen::VectorXd& v, const std::vector<std::size_t>& ks, bool verify) const {
  MidLinearization lin;
  std::size_t nm = mid_dirs_.size();
  lin.base.assign(nr_, 0.0);
  lin.slopes = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(nr_),
                                     static_cast<Eigen::Index>(nm));
  auto eq0 = fast_equilibrium(v);
  for (auto k : ks) lin.base[k] = average_over(k, eq0, v);

  for (std::size_t j = 0; j < nm; ++j) {
    double step = lattice_step(mid_dirs_[j]);
    // Prefer a forward step along the level-1 lattice; fall back to a
    // backward one when the query point sits on the upper feasibility edge.
    auto probe = [&](double sgn) {
      Eigen::VectorXd v1 = v, v2 = v;
      v1(static_cast<Eigen::Index>(mid_dirs_[j])) += sgn * step;
      v2(static_cast<Eigen::Index>(mid_dirs_[j])) += 2.0 * sgn * step;
      auto eq1 = fast_equilibrium(v1);
      for (auto k : ks) {
        double f1 = average_over(k, eq1, v1);
        if (verify) {
          auto eq2 = fast_equilibrium(v2);
          double f2 = average_over(k, eq2, v2);
          double second = f2 - 2.0 * f1 + lin.base[k];
          if (std::abs(second) >
              1e-8 * std::max({1.0, std::abs(lin.base[k]), std::abs(f2)}))
            throw PipelineError(
                PipelineError::Code::MomentClosureUnavailable,
                std::string("averaged propensity of reaction '") +
                    D_->net.reactions[k].name +
                    "' is not affine in the intermediate coordinates");
        }
        lin.slopes(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) =
            (f1 - lin.base[k]) / (sgn * step);
      }
    };
    try {
      probe(1.0);
    } catch (const PipelineError& e) {
      if (e.code() != PipelineError::Code::UnboundedFastChain &&
          e.code() != PipelineError::Code::Unsupported)
        throw;
      probe(-1.0);
    }
  }
  return lin;
}

Eigen::VectorXd AveragingEngine::mid_moments(const Eigen::VectorXd& v) const {
  std::size_t nm = mid_dirs_.size();
  if (nm == 0) return Eigen::VectorXd();
  auto classified = classified_reactions(D_->level1);
  auto lin = mid_linearize(v, classified, /*verify=*/true);

  Eigen::MatrixXd M = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(nm),
                                            static_cast<Eigen::Index>(nm));
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(nm));
  for (std::size_t l = 0; l < nm; ++l) {
    for (auto k : classified) {
      if (!survives_[mid_dirs_[l]][k]) continue;
      double tz = theta_zeta_(static_cast<Eigen::Index>(mid_dirs_[l]),
                              static_cast<Eigen::Index>(k));
      double a = lin.base[k];
      for (std::size_t j = 0; j < nm; ++j)
        a -= lin.slopes(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) *
             v(static_cast<Eigen::Index>(mid_dirs_[j]));
      rhs(static_cast<Eigen::Index>(l)) -= a * tz;
      for (std::size_t j = 0; j < nm; ++j)
        M(static_cast<Eigen::Index>(l), static_cast<Eigen::Index>(j)) +=
            lin.slopes(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) * tz;
    }
  }
  Eigen::FullPivLU<Eigen::MatrixXd> lu(M);
  if (!lu.isInvertible())
    throw PipelineError(PipelineError::Code::SingularSystem,
                        "stationary moment system of the intermediate level is singular");
  return lu.solve(rhs);
}

double AveragingEngine::lambda_bbar(std::size_t k, const Eigen::VectorXd& v) const {
  if (mid_dirs_.empty()) return lambda_bar(k, v);
  Eigen::VectorXd mid = mid_moments(v);
  auto lin = mid_linearize(v, {k}, /*verify=*/true);
  double out = lin.base[k];
  for (std::size_t j = 0; j < mid_dirs_.size(); ++j)
    out += lin.slopes(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) *
           (mid(static_cast<Eigen::Index>(j)) -
            v(static_cast<Eigen::Index>(mid_dirs_[j])));
  return out;
}

Eigen::VectorXd AveragingEngine::F1_bar(const Eigen::VectorXd& v) const {
  auto eq = fast_equilibrium(v);
  Eigen::VectorXd out = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(slow_dirs_.size()));
  for (std::size_t l = 0; l < slow_dirs_.size(); ++l) {
    double acc = 0.0;
    for (std::size_t k = 0; k < nr_; ++k) {
      if (!survives_[slow_dirs_[l]][k]) continue;
      acc += average_over(k, eq, v) * theta_zeta_(static_cast<Eigen::Index>(slow_dirs_[l]),
                                                  static_cast<Eigen::Index>(k));
    }
    out(static_cast<Eigen::Index>(l)) = acc;
  }
  return out;
}

Eigen::VectorXd AveragingEngine::F_bar(const Eigen::VectorXd& v) const {
  if (mid_dirs_.empty()) return F1_bar(v);
  std::vector<std::size_t> needed;
  for (std::size_t k = 0; k < nr_; ++k)
    for (auto l : slow_dirs_)
      if (survives_[l][k]) {
        needed.push_back(k);
        break;
      }
  Eigen::VectorXd mid = mid_moments(v);
  auto lin = mid_linearize(v, needed, /*verify=*/true);
  Eigen::VectorXd out = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(slow_dirs_.size()));
  for (auto k : needed) {
    double lam = lin.base[k];
    for (std::size_t j = 0; j < mid_dirs_.size(); ++j)
      lam += lin.slopes(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) *
             (mid(static_cast<Eigen::Index>(j)) -
              v(static_cast<Eigen::Index>(mid_dirs_[j])));
    for (std::size_t l = 0; l < slow_dirs_.size(); ++l)
      if (survives_[slow_dirs_[l]][k])
        out(static_cast<Eigen::Index>(l)) +=
            lam * theta_zeta_(static_cast<Eigen::Index>(slow_dirs_[l]),
                              static_cast<Eigen::Index>(k));
  }
  return out;
}

Eigen::MatrixXd AveragingEngine::F_bar_jacobian(const Eigen::VectorXd& v) const {
  std::size_t n0 = slow_dirs_.size();
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n0),
                                            static_cast<Eigen::Index>(n0));
  for (std::size_t j = 0; j < n0; ++j) {
    // A frozen discrete slow coordinate carries no fluctuation; its Jacobian
    // column never enters the linear-noise dynamics.
    if (D_->directions[slow_dirs_[j]].dir.alpha.is_zero()) continue;
    double h = 1e-6 * std::max(1.0, std::abs(v(static_cast<Eigen::Index>(slow_dirs_[j]))));
    auto diff = [&](double hh) {
      Eigen::VectorXd vp = v, vm = v;
      vp(static_cast<Eigen::Index>(slow_dirs_[j])) += hh;
      vm(static_cast<Eigen::Index>(slow_dirs_[j])) -= hh;
      return Eigen::VectorXd((F_bar(vp) - F_bar(vm)) / (2.0 * hh));
    };
    Eigen::VectorXd dh = diff(h), dh2 = diff(h / 2.0);
    J.col(static_cast<Eigen::Index>(j)) = (4.0 * dh2 - dh) / 3.0;
  }
  return J;
}

}  // namespace msrn
