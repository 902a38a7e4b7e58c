#include "msrn/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <unordered_map>

#include "msrn/errors.hpp"
#include "msrn/rng.hpp"

namespace msrn {
namespace {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

Index ei(std::size_t i) { return static_cast<Index>(i); }

[[noreturn]] void sim_fail(const std::string& msg) {
  throw PipelineError(PipelineError::Code::SimulationFailure, msg);
}

std::vector<std::string> default_names(const std::vector<std::string>& given,
                                       std::size_t n, const char* stem) {
  if (given.size() == n) return given;
  std::vector<std::string> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = stem + std::to_string(i);
  return out;
}

void check_grid(const std::vector<double>& grid, double t_end) {
  if (grid.empty()) sim_fail("output grid is empty");
  if (grid.front() < 0.0 || grid.back() > t_end * (1.0 + 1e-12))
    sim_fail("output grid leaves [0, t_end]");
  for (std::size_t i = 1; i < grid.size(); ++i)
    if (grid[i] <= grid[i - 1]) sim_fail("output grid is not strictly increasing");
}

// ------------------------------------------------------------------ SSA core

// Shared state for the exact-path engines: counts, flattened mass-action
// inputs and net changes, and the species-sharing dependency graph.  Counts
// live in doubles (integer-exact below 2^52, guarded at refresh) so the hot
// propensity path runs without conversions.  Mass action up to second order
// is  c * x[sp1] * (x[sp2] + bias)  with a sentinel slot x[s] == 1 standing
// in for absent factors; higher orders fall back to the falling-factorial
// loop.  Networks of at most 16 reactions, none above second order, take a
// dense path that recomputes every propensity each event (drift-free, and
// cheaper than graph walks at that size); larger networks maintain
// propensities incrementally through the dependency graph, with the running
// total rebuilt every 2^15 events to bound float drift.
struct SsaCore {
  struct InputCount {
    std::uint32_t sp;
    std::int64_t n;
  };
  struct Delta {
    std::uint32_t sp;
    double dn;
  };

  std::size_t s = 0, nr = 0, npad = 0;
  bool dense = false;
  std::vector<double> rate_c;  // kappa_k * N^{beta_k}, zero-padded to npad
  std::vector<std::uint32_t> sp1, sp2;
  std::vector<double> bias;
  std::vector<char> generic;
  std::vector<double> zscale;  // N^{-alpha_i}
  double traw_per_unit = 1.0;  // N^{gamma}: t_raw = traw_per_unit * t

  std::vector<InputCount> inputs;
  std::vector<std::uint32_t> in_off;
  std::vector<Delta> deltas;
  std::vector<std::uint32_t> d_off;
  std::vector<std::uint32_t> deps;
  std::vector<std::uint32_t> dep_off;

  // Slot-permuted copies for the dense kernel, hottest reaction first; slot j
  // describes reaction prid[j].  Net changes are padded to exactly three
  // (species, delta) pairs, unused ones pointing at the dump slot of x.
  std::vector<double> prc, pbs, pddn;
  std::vector<std::uint64_t> ps1, ps2, pdsp;  // 64-bit so indexed loads need no widening
  std::vector<std::uint32_t> prid;

  std::vector<double> x;  // counts; trailing sentinel 1.0 and a dump slot
  std::vector<double> a;
  std::vector<std::uint32_t> order;  // reaction ids, descending propensity
  double total = 0.0;

  SsaCore(const ReactionNetwork& net, const ScalingSpec& scaling,
          const std::vector<std::int64_t>& x0) {
    s = net.species_count();
    nr = net.reaction_count();
    if (x0.size() != s) sim_fail("initial state has the wrong dimension");
    for (auto v : x0)
      if (v < 0) sim_fail("initial state has a negative count");
    if (nr == 0) sim_fail("network has no reactions");
    const double N = static_cast<double>(scaling.N);
    traw_per_unit = std::pow(N, scaling.gamma.to_double());
    zscale.resize(s);
    for (std::size_t i = 0; i < s; ++i)
      zscale[i] = std::pow(N, -net.species[i].alpha.to_double());

    rate_c.resize(nr);
    in_off.assign(nr + 1, 0);
    d_off.assign(nr + 1, 0);
    std::vector<std::vector<std::uint32_t>> consumers(s);
    const std::uint32_t sentinel = static_cast<std::uint32_t>(s);
    bool any_generic = false;
    for (std::size_t k = 0; k < nr; ++k) {
      const Reaction& r = net.reactions[k];
      rate_c[k] = r.kappa * std::pow(N, r.beta.to_double());
      if (!std::isfinite(rate_c[k])) sim_fail("rate constant overflow in '" + r.name + "'");
      for (std::size_t i = 0; i < s; ++i) {
        if (r.inputs[i] > 0) {
          inputs.push_back({static_cast<std::uint32_t>(i), r.inputs[i]});
          consumers[i].push_back(static_cast<std::uint32_t>(k));
        }
        if (r.net[i] != 0)
          deltas.push_back({static_cast<std::uint32_t>(i), static_cast<double>(r.net[i])});
      }
      in_off[k + 1] = static_cast<std::uint32_t>(inputs.size());
      d_off[k + 1] = static_cast<std::uint32_t>(deltas.size());
      const std::uint32_t ni = in_off[k + 1] - in_off[k];
      const InputCount* in = inputs.data() + in_off[k];
      std::uint32_t a1 = sentinel, a2 = sentinel;
      double b = 0.0;
      bool gen = false;
      if (ni == 1 && in[0].n == 1) {
        a1 = in[0].sp;
      } else if (ni == 1 && in[0].n == 2) {
        a1 = a2 = in[0].sp;
        b = -1.0;
      } else if (ni == 2 && in[0].n == 1 && in[1].n == 1) {
        a1 = in[0].sp;
        a2 = in[1].sp;
      } else if (ni != 0) {
        gen = true;
        any_generic = true;
      }
      sp1.push_back(a1);
      sp2.push_back(a2);
      bias.push_back(b);
      generic.push_back(gen ? 1 : 0);
    }
    std::size_t max_deltas = 0;
    for (std::size_t k = 0; k < nr; ++k)
      max_deltas = std::max<std::size_t>(max_deltas, d_off[k + 1] - d_off[k]);
    npad = nr <= 4 ? 4 : nr <= 8 ? 8 : nr <= 16 ? 16 : nr;
    dense = nr <= 16 && !any_generic && max_deltas <= 3;
    if (dense) {
      prc.assign(npad, 0.0);
      pbs.assign(npad, 0.0);
      ps1.assign(npad, sentinel);
      ps2.assign(npad, sentinel);
      prid.assign(npad, 0);
      pdsp.assign(3 * npad, s + 1);  // dump slot
      pddn.assign(3 * npad, 0.0);
    }
    dep_off.assign(nr + 1, 0);
    std::vector<char> seen(nr, 0);
    for (std::size_t k = 0; k < nr; ++k) {
      std::vector<std::uint32_t> dk;
      for (std::uint32_t di = d_off[k]; di < d_off[k + 1]; ++di)
        for (auto j : consumers[deltas[di].sp])
          if (!seen[j]) {
            seen[j] = 1;
            dk.push_back(j);
          }
      std::sort(dk.begin(), dk.end());
      for (auto j : dk) {
        seen[j] = 0;
        deps.push_back(j);
      }
      dep_off[k + 1] = static_cast<std::uint32_t>(deps.size());
    }

    x.resize(s);
    for (std::size_t i = 0; i < s; ++i) x[i] = static_cast<double>(x0[i]);
    x.push_back(1.0);  // sentinel factor
    x.push_back(0.0);  // dump slot for padded delta pairs
    a.assign(nr, 0.0);
    order.resize(nr);
    for (std::size_t k = 0; k < nr; ++k) order[k] = static_cast<std::uint32_t>(k);
  }

  double generic_prop(std::size_t k) const {
    double p = rate_c[k];
    for (std::uint32_t ii = in_off[k]; ii < in_off[k + 1]; ++ii) {
      const double xi = x[inputs[ii].sp];
      const std::int64_t n = inputs[ii].n;
      if (xi < static_cast<double>(n)) return 0.0;
      for (std::int64_t j = 0; j < n; ++j) p *= xi - static_cast<double>(j);
    }
    return p;
  }

  double prop(std::size_t k) const {
    if (generic[k]) [[unlikely]]
      return generic_prop(k);
    return rate_c[k] * x[sp1[k]] * (x[sp2[k]] + bias[k]);
  }

  void refresh() {
    for (std::size_t i = 0; i < s; ++i)
      if (!(x[i] >= 0.0) || x[i] > 4.5e15)
        sim_fail("species count left the integer-exact range of a double");
    total = 0.0;
    for (std::size_t k = 0; k < nr; ++k) {
      a[k] = prop(k);
      total += a[k];
    }
    if (!std::isfinite(total) || total > 1e17) sim_fail("propensity overflow");
    std::sort(order.begin(), order.end(), [&](std::uint32_t l, std::uint32_t r) {
      return a[l] != a[r] ? a[l] > a[r] : l < r;
    });
    if (!dense) return;
    for (std::size_t j = 0; j < nr; ++j) {
      const std::uint32_t k = order[j];
      prid[j] = k;
      prc[j] = rate_c[k];
      ps1[j] = sp1[k];
      ps2[j] = sp2[k];
      pbs[j] = bias[k];
      for (std::uint32_t d = 0; d < 3; ++d) {
        const std::uint32_t di = d_off[k] + d;
        const bool real = di < d_off[k + 1];
        pdsp[3 * j + d] = real ? deltas[di].sp : static_cast<std::uint32_t>(s + 1);
        pddn[3 * j + d] = real ? deltas[di].dn : 0.0;
      }
    }
  }

  void apply_state(std::uint32_t k) {
    for (std::uint32_t di = d_off[k]; di < d_off[k + 1]; ++di)
      x[deltas[di].sp] += deltas[di].dn;
  }

  void apply(std::uint32_t k) {
    apply_state(k);
    for (std::uint32_t ji = dep_off[k]; ji < dep_off[k + 1]; ++ji) {
      const std::uint32_t j = deps[ji];
      const double fresh = prop(j);
      total += fresh - a[j];
      a[j] = fresh;
    }
  }

  std::uint32_t argmax_a() const {
    std::uint32_t best = 0;
    for (std::size_t k = 1; k < nr; ++k)
      if (a[k] > a[best]) best = static_cast<std::uint32_t>(k);
    return best;
  }

  std::uint32_t select(double r) const {
    double acc = 0.0;
    for (std::size_t i = 0; i < nr; ++i) {
      const std::uint32_t k = order[i];
      acc += a[k];
      if (r < acc) return k;
    }
    // float leak between `total` and sum(a): fall back to the largest entry
    return argmax_a();
  }

  // Dense-path selection once r has cleared the two hottest slots.  Slot
  // propensities are recomputed from the counts with the exact expression the
  // kernel uses, so the prefix sums match its hot-path boundaries bit-for-bit.
  [[gnu::noinline]] std::uint32_t select_cold_slot(double r) const {
    double acc = 0.0;
    for (std::uint32_t j = 0; j < nr; ++j) {
      acc += prc[j] * x[ps1[j]] * (x[ps2[j]] + pbs[j]);
      if (r < acc) return j;
    }
    std::uint32_t best = 0;  // float leak: fall back to the largest slot
    double abest = -1.0;
    for (std::uint32_t j = 0; j < nr; ++j) {
      const double aj = prc[j] * x[ps1[j]] * (x[ps2[j]] + pbs[j]);
      if (aj > abest) {
        abest = aj;
        best = j;
      }
    }
    return best;
  }

  VectorXd normalized_state() const {
    VectorXd z(ei(s));
    for (std::size_t i = 0; i < s; ++i) z(ei(i)) = x[i] * zscale[i];
    return z;
  }
};

[[noreturn]] void event_cap_fail(std::uint64_t events) {
  sim_fail("event cap exceeded after " + std::to_string(events) +
           " reaction events; raise the cap or shorten the horizon");
}

// Observer contract: hold(t_raw, dt_raw) sees the pre-jump state occupying
// [t, t+dt); jump(t_raw, k) sees the post-jump state and returns false to
// stop the run.  Holding times are exact, so path integrals of any state
// functional accumulate without discretization error.

// Direct method over the dependency graph (any network size).
template <class Obs>
std::uint64_t ssa_run_graph(SsaCore& core, Xoshiro256pp& rng, double t_raw_end,
                            std::uint64_t max_events, Obs& obs) {
  core.refresh();
  double t = 0.0;
  std::uint64_t events = 0;
  double e_next = rng.exponential();
  double u_next = rng.uniform();
  for (;;) {
    if (core.total <= 0.0) {  // absorbing state: occupy the rest of the window
      obs.hold(t, t_raw_end - t);
      return events;
    }
    const double dt = e_next / core.total;
    const double t_new = t + dt;
    if (t_new >= t_raw_end) {
      obs.hold(t, t_raw_end - t);
      return events;
    }
    obs.hold(t, dt);
    const double r = u_next * core.total;
    e_next = rng.exponential();
    u_next = rng.uniform();
    const std::uint32_t k = core.select(r);
    core.apply(k);
    t = t_new;
    ++events;
    if (!obs.jump(t, k)) return events;
    if (events >= max_events) event_cap_fail(events);
    if ((events & 0x7fffu) == 0) core.refresh();
  }
}

// Balanced-tree sum of slot propensities [B, E).  Pairwise association keeps
// the adds off one serial dependency chain (the compiler may not reassociate
// floating-point sums itself) and leaves only O(log n) values live at once.
template <std::size_t B, std::size_t E>
inline double pair_sum(const double* rc, const std::uint64_t* s1, const std::uint64_t* s2,
                       const double* bs, const double* x) {
  if constexpr (E - B == 1) {
    return rc[B] * x[s1[B]] * (x[s2[B]] + bs[B]);
  } else {
    constexpr std::size_t M = B + (E - B) / 2;
    return pair_sum<B, M>(rc, s1, s2, bs, x) + pair_sum<M, E>(rc, s1, s2, bs, x);
  }
}

// Direct method for small second-order networks: every propensity is
// recomputed from the counts each event (no stored propensities, so no
// incremental drift), with NR the padded slot count so everything unrolls.
// Slots are ordered hottest-first at each refresh; the two leading slots are
// computed by name so selection usually resolves with one compare, and the
// remaining slots only ever exist inside the pair_sum reduction tree.  The
// next event's random numbers are drawn before selection so their latency
// overlaps the state update.
template <std::size_t NR, class Obs>
std::uint64_t ssa_run_dense(SsaCore& core, Xoshiro256pp& rng, double t_raw_end,
                            std::uint64_t max_events, Obs& obs) {
  core.refresh();
  const double* rc = core.prc.data();
  const double* bs = core.pbs.data();
  const std::uint64_t* s1 = core.ps1.data();
  const std::uint64_t* s2 = core.ps2.data();
  const std::uint64_t* dsp = core.pdsp.data();
  const double* ddn = core.pddn.data();
  const std::uint32_t* rid = core.prid.data();
  double* x = core.x.data();
  double t = 0.0;
  std::uint64_t events = 0;
  double e_next = rng.exponential();
  double u_next = rng.uniform();
  for (;;) {
    const double a0 = rc[0] * x[s1[0]] * (x[s2[0]] + bs[0]);
    const double a1 = rc[1] * x[s1[1]] * (x[s2[1]] + bs[1]);
    const double t01 = a0 + a1;
    const double total = t01 + pair_sum<2, NR>(rc, s1, s2, bs, x);
    if (!(total > 0.0)) {  // absorbing state: occupy the rest of the window
      obs.hold(t, t_raw_end - t);
      return events;
    }
    const double dt = e_next / total;
    const double t_new = t + dt;
    if (t_new >= t_raw_end) {
      obs.hold(t, t_raw_end - t);
      return events;
    }
    obs.hold(t, dt);
    const double r = u_next * total;
    e_next = rng.exponential();
    u_next = rng.uniform();
    std::uint32_t k;
    if (r < t01) [[likely]]
      k = r < a0 ? 0 : 1;
    else
      k = core.select_cold_slot(r);
    x[dsp[3 * k + 0]] += ddn[3 * k + 0];
    x[dsp[3 * k + 1]] += ddn[3 * k + 1];
    x[dsp[3 * k + 2]] += ddn[3 * k + 2];
    t = t_new;
    ++events;
    if (!obs.jump(t, rid[k])) return events;
    if (events >= max_events) event_cap_fail(events);
    if ((events & 0x7fffu) == 0) core.refresh();
  }
}

// Indexed binary min-heap of absolute candidate firing times, one clock per
// reaction; idle reactions sit at +infinity.
struct TimeHeap {
  std::vector<double> tau;
  std::vector<std::uint32_t> heap, pos;

  explicit TimeHeap(std::size_t n)
      : tau(n, std::numeric_limits<double>::infinity()), heap(n), pos(n) {
    for (std::size_t i = 0; i < n; ++i) heap[i] = pos[i] = static_cast<std::uint32_t>(i);
  }
  void swap_slots(std::size_t i, std::size_t j) {
    std::swap(heap[i], heap[j]);
    pos[heap[i]] = static_cast<std::uint32_t>(i);
    pos[heap[j]] = static_cast<std::uint32_t>(j);
  }
  void update(std::uint32_t k, double t) {
    tau[k] = t;
    std::size_t i = pos[k];
    while (i > 0 && tau[heap[i]] < tau[heap[(i - 1) / 2]]) {
      swap_slots(i, (i - 1) / 2);
      i = (i - 1) / 2;
    }
    for (;;) {
      std::size_t m = i;
      const std::size_t l = 2 * i + 1;
      if (l < heap.size() && tau[heap[l]] < tau[heap[m]]) m = l;
      if (l + 1 < heap.size() && tau[heap[l + 1]] < tau[heap[m]]) m = l + 1;
      if (m == i) break;
      swap_slots(i, m);
      i = m;
    }
  }
  std::uint32_t top() const { return heap[0]; }
};

// Next-reaction method: the earliest clock fires, and every clock whose rate
// the firing touched (the fired reaction's dependents, plus itself) is
// redrawn from its new rate — exact by memorylessness of the exponential.
template <class Obs>
std::uint64_t ssa_run_nrm(SsaCore& core, Xoshiro256pp& rng, double t_raw_end,
                          std::uint64_t max_events, Obs& obs) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  core.refresh();
  TimeHeap clocks(core.nr);
  for (std::uint32_t k = 0; k < core.nr; ++k)
    if (core.a[k] > 0.0) clocks.update(k, rng.exponential() / core.a[k]);
  double t = 0.0;
  std::uint64_t events = 0;
  for (;;) {
    const std::uint32_t k = clocks.top();
    const double t_fire = clocks.tau[k];
    if (!(t_fire < t_raw_end)) {  // also covers the all-clocks-idle case
      obs.hold(t, t_raw_end - t);
      return events;
    }
    obs.hold(t, t_fire - t);
    core.apply_state(k);
    t = t_fire;
    bool self_redrawn = false;
    for (std::uint32_t ji = core.dep_off[k]; ji < core.dep_off[k + 1]; ++ji) {
      const std::uint32_t j = core.deps[ji];
      const double aj = core.prop(j);
      core.total += aj - core.a[j];
      core.a[j] = aj;
      clocks.update(j, aj > 0.0 ? t + rng.exponential() / aj : inf);
      self_redrawn |= (j == k);
    }
    if (!self_redrawn)  // rate untouched, but this clock has just fired
      clocks.update(k, core.a[k] > 0.0 ? t + rng.exponential() / core.a[k] : inf);
    ++events;
    if (!obs.jump(t, k)) return events;
    if (events >= max_events) event_cap_fail(events);
    if ((events & 0x7fffu) == 0) core.refresh();
  }
}

template <class Obs>
std::uint64_t ssa_run(SsaCore& core, Xoshiro256pp& rng, double t_raw_end,
                      std::uint64_t max_events, Obs& obs,
                      SsaMethod method = SsaMethod::Direct) {
  if (method == SsaMethod::NextReaction)
    return ssa_run_nrm(core, rng, t_raw_end, max_events, obs);
  if (core.dense) {
    if (core.npad == 4) return ssa_run_dense<4>(core, rng, t_raw_end, max_events, obs);
    if (core.npad == 8) return ssa_run_dense<8>(core, rng, t_raw_end, max_events, obs);
    return ssa_run_dense<16>(core, rng, t_raw_end, max_events, obs);
  }
  return ssa_run_graph(core, rng, t_raw_end, max_events, obs);
}

struct GridRecorder {
  const SsaCore& core;
  const std::vector<double>& grid_raw;
  Trajectory& out;
  StoppingRule stop;  // component = raw species index, bounds in normalized units
  bool freeze = true;
  std::size_t gi = 0;
  // next grid boundary, cached so the per-event check is one compare
  double next_t = grid_raw.empty() ? std::numeric_limits<double>::infinity() : grid_raw[0];
  bool halted = false;

  void record_row() {
    for (std::size_t i = 0; i < core.s; ++i)
      out.states(ei(gi), ei(i)) = core.x[i] * core.zscale[i];
    ++gi;
    next_t = gi < grid_raw.size() ? grid_raw[gi] : std::numeric_limits<double>::infinity();
  }
  void hold(double t, double dt) {
    const double t_new = t + dt;
    if (t_new <= next_t) [[likely]] return;
    while (gi < grid_raw.size() && grid_raw[gi] < t_new) record_row();
  }
  bool jump(double t, std::uint32_t) {
    if (!stop.enabled()) return true;
    const std::size_t sp = static_cast<std::size_t>(stop.component);
    const double v = core.x[sp] * core.zscale[sp];
    if (v <= stop.low)
      out.absorbed = true;
    else if (v >= stop.high)
      out.escaped = true;
    else
      return true;
    out.stop_time = t / core.traw_per_unit;
    halted = true;
    return false;
  }
  void finish() {
    if (halted && !freeze) {
      out.times.resize(gi);
      out.states.conservativeResize(ei(gi), Eigen::NoChange);
      return;
    }
    while (gi < grid_raw.size()) record_row();
  }
};

// ------------------------------------------------- compensated slow process

struct KeyHash {
  std::size_t operator()(const std::vector<std::int64_t>& v) const {
    std::uint64_t h = 1469598103934665603ull;
    for (auto c : v) {
      h ^= static_cast<std::uint64_t>(c);
      h *= 1099511628211ull;
    }
    return static_cast<std::size_t>(h);
  }
};

// Tracks  V(t) - int sum_k a_k dV_k dt  and the same compensation for the
// bilinear corrector H = scale * W(key) * c.  All jump increments are exact:
// dV_k and dc_k are the true finite-N functional jumps, and the generator
// acts on H by differencing H over each reaction jump.  W is memoized per
// key; cross entries cache (W' - W) and W' dc_k per key-changing reaction.
struct MartingaleObserver {
  struct Entry;
  struct Cross {
    Entry* next = nullptr;
    MatrixXd dW;       // W(key') - W(key)
    VectorXd wnext_dc;  // W(key') * dc_k
  };
  struct Entry {
    MatrixXd W;                // s0 x nc
    MatrixXd dH;               // s0 x nr, key-preserving columns = W * dc_k
    std::vector<Cross> cross;  // per reaction, key-changing only
  };

  SsaCore& core;
  const BilinearCorrector& cor;
  std::size_t s0, nc, nr;
  MatrixXd dV;  // s0 x nr
  MatrixXd dC;  // nc x nr
  MatrixXd theta_slow, theta_c;
  std::vector<char> key_changing;
  std::vector<std::vector<std::int64_t>> key_delta;

  std::unordered_map<std::vector<std::int64_t>, Entry, KeyHash> memo;
  Entry* cur = nullptr;
  std::vector<std::int64_t> key;
  VectorXd c;
  VectorXd acc1, acc2;
  VectorXd drift_, genh_, habs_;  // per-event scratch, allocated once
  double sup_h = 0.0;
  std::uint64_t jumps = 0;

  MartingaleObserver(SsaCore& core_, const MultiscaleDecomposition& dec,
                     const BilinearCorrector& cor_)
      : core(core_), cor(cor_) {
    s0 = dec.s0;
    nc = cor.coord_dirs.size();
    nr = core.nr;
    if (s0 == 0) sim_fail("no slow functionals to compensate");
    theta_slow.resize(ei(s0), ei(core.s));
    for (std::size_t l = 0; l < s0; ++l) theta_slow.row(ei(l)) = dec.T.row(ei(l));
    theta_c.resize(ei(nc), ei(core.s));
    for (std::size_t j = 0; j < nc; ++j)
      theta_c.row(ei(j)) = dec.T.row(ei(cor.coord_dirs[j]));

    dV.setZero(ei(s0), ei(nr));
    dC.setZero(ei(nc), ei(nr));
    key_changing.assign(nr, 0);
    key_delta.assign(nr, std::vector<std::int64_t>(cor.key_species.size(), 0));
    for (std::size_t k = 0; k < nr; ++k) {
      const auto& zeta = dec.net.reactions[k].net;
      for (std::size_t i = 0; i < core.s; ++i) {
        if (zeta[i] == 0) continue;
        const double step = core.zscale[i] * static_cast<double>(zeta[i]);
        for (std::size_t l = 0; l < s0; ++l) dV(ei(l), ei(k)) += theta_slow(ei(l), ei(i)) * step;
        for (std::size_t j = 0; j < nc; ++j) dC(ei(j), ei(k)) += theta_c(ei(j), ei(i)) * step;
      }
      for (std::size_t j = 0; j < cor.key_species.size(); ++j) {
        key_delta[k][j] = zeta[cor.key_species[j]];
        if (key_delta[k][j] != 0) key_changing[k] = 1;
      }
    }

    key = current_key();
    cur = entry_for(key, core.normalized_state());
    c = theta_c * core.normalized_state();
    acc1.setZero(ei(s0));
    acc2.setZero(ei(s0));
    drift_.setZero(ei(s0));
    genh_.setZero(ei(s0));
    habs_.setZero(ei(s0));
  }

  std::vector<std::int64_t> current_key() const {
    std::vector<std::int64_t> k(cor.key_species.size());
    for (std::size_t j = 0; j < k.size(); ++j)
      k[j] = std::llround(core.x[cor.key_species[j]]);
    return k;
  }

  Entry* entry_for(const std::vector<std::int64_t>& k, const VectorXd& z) {
    auto it = memo.find(k);
    if (it != memo.end()) return &it->second;
    Entry e;
    e.W = cor.weights(z);
    if (e.W.rows() != ei(s0) || e.W.cols() != ei(nc))
      sim_fail("corrector weight matrix has the wrong shape");
    e.dH.setZero(ei(s0), ei(nr));
    for (std::size_t r = 0; r < nr; ++r)
      if (!key_changing[r]) e.dH.col(ei(r)) = e.W * dC.col(ei(r));
    e.cross.resize(nr);
    return &memo.emplace(k, std::move(e)).first->second;
  }

  Cross& cross_for(std::uint32_t k) {
    Cross& cr = cur->cross[k];
    if (cr.next == nullptr) {
      std::vector<std::int64_t> nk = key;
      for (std::size_t j = 0; j < nk.size(); ++j) nk[j] += key_delta[k][j];
      VectorXd z = core.normalized_state();  // pre-jump
      const auto& zeta = core.deltas;
      for (std::uint32_t di = core.d_off[k]; di < core.d_off[k + 1]; ++di)
        z(ei(zeta[di].sp)) += core.zscale[zeta[di].sp] * zeta[di].dn;
      Entry* cur_saved = cur;  // entry_for may rehash; pointers stay valid
      Entry* nxt = entry_for(nk, z);
      Cross& c2 = cur_saved->cross[k];
      c2.next = nxt;
      c2.dW = nxt->W - cur_saved->W;
      c2.wnext_dc = nxt->W * dC.col(ei(k));
      return c2;
    }
    return cr;
  }

  void hold(double, double dt) {
    if (dt <= 0.0) return;
    drift_.setZero();
    genh_.setZero();
    for (std::size_t k = 0; k < nr; ++k) {
      const double ak = core.a[k];
      if (ak <= 0.0) continue;
      drift_ += ak * dV.col(ei(k));
      if (!key_changing[k]) {
        genh_ += ak * cur->dH.col(ei(k));
      } else {
        Cross& cr = cross_for(static_cast<std::uint32_t>(k));
        genh_.noalias() += ak * (cr.dW * c);
        genh_ += ak * cr.wnext_dc;
      }
    }
    acc1 += dt * drift_;
    acc2 += dt * genh_;
    habs_.noalias() = cur->W * c;
    const double h = habs_.lpNorm<Eigen::Infinity>();
    if (h > sup_h) sup_h = h;
  }

  bool jump(double, std::uint32_t k) {
    if (key_changing[k]) {
      Cross& cr = cur->cross[k];  // prepared by hold (a_k > 0 when fired)
      for (std::size_t j = 0; j < key.size(); ++j) key[j] += key_delta[k][j];
      cur = cr.next;
    }
    c += dC.col(ei(k));
    if ((++jumps & 0xffffu) == 0) c = theta_c * core.normalized_state();
    return true;
  }
};

// ------------------------------------------------------------ RK4 machinery

template <class F>
VectorXd rk4_step(F&& f, double t, const VectorXd& y, double h) {
  const VectorXd k1 = f(t, y);
  const VectorXd k2 = f(t + 0.5 * h, VectorXd(y + 0.5 * h * k1));
  const VectorXd k3 = f(t + 0.5 * h, VectorXd(y + 0.5 * h * k2));
  const VectorXd k4 = f(t + h, VectorXd(y + h * k3));
  return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

// Step-doubling RK4 with Richardson extrapolation.  Error control is
// relative (1e-8); both the doubled step and the extrapolated update are
// linear combinations of RK4 stages, so linear first integrals of `f` are
// preserved to roundoff.
struct OdeStepper {
  double tol = 1e-8;
  double h = 0.0;

  template <class F>
  void advance_to(F&& f, double& t, VectorXd& y, double t_target) {
    while (t < t_target) {
      if (h <= 0.0) h = t_target - t;
      double hs = std::min(h, t_target - t);
      for (;;) {
        const VectorXd y1 = rk4_step(f, t, y, hs);
        const VectorXd ym = rk4_step(f, t, y, 0.5 * hs);
        const VectorXd y2 = rk4_step(f, t + 0.5 * hs, ym, 0.5 * hs);
        const double scale = std::max(1.0, y.lpNorm<Eigen::Infinity>());
        const double err = y1.allFinite() && y2.allFinite()
                               ? (y1 - y2).lpNorm<Eigen::Infinity>() / scale
                               : std::numeric_limits<double>::infinity();
        if (err > tol) {
          hs *= 0.5;
          if (hs < 1e-14 * std::max(1.0, std::abs(t_target)))
            sim_fail("step size underflow in the deterministic integrator");
          continue;
        }
        y = y2 + (y2 - y1) / 15.0;
        t += hs;
        if (!y.allFinite() || y.lpNorm<Eigen::Infinity>() > 1e12)
          sim_fail("solution blow-up at t = " + format_double(t));
        h = err < tol / 64.0 ? 2.0 * hs : hs;
        break;
      }
    }
    t = t_target;
  }
};

MatrixXd unvec(const VectorXd& v, Index off, Index n) {
  MatrixXd m(n, n);
  for (Index j = 0; j < n; ++j) m.col(j) = v.segment(off + j * n, n);
  return m;
}

void vec_into(VectorXd& v, Index off, const MatrixXd& m) {
  const Index n = m.rows();
  for (Index j = 0; j < n; ++j) v.segment(off + j * n, n) = m.col(j);
}

}  // namespace

std::vector<double> uniform_grid(double t_end, std::size_t n) {
  if (!(t_end > 0.0) || n == 0) sim_fail("output grid needs t_end > 0 and n >= 1");
  std::vector<double> g(n + 1);
  for (std::size_t i = 0; i <= n; ++i)
    g[i] = t_end * static_cast<double>(i) / static_cast<double>(n);
  return g;
}

Trajectory ssa_simulate(const ReactionNetwork& net, const ScalingSpec& scaling,
                        const std::vector<std::int64_t>& x0, double t_end,
                        std::uint64_t seed, const std::vector<double>& grid,
                        const SsaOptions& opts) {
  check_grid(grid, t_end);
  SsaCore core(net, scaling, x0);
  if (opts.stop.enabled() &&
      static_cast<std::size_t>(opts.stop.component) >= core.s)
    sim_fail("stopping rule names a species out of range");

  Trajectory out;
  out.method = "ssa";
  out.seed = seed;
  out.times = grid;
  out.components.reserve(core.s);
  for (const auto& sp : net.species) out.components.push_back(sp.name);
  out.states.setZero(ei(grid.size()), ei(core.s));

  std::vector<double> grid_raw(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) grid_raw[i] = grid[i] * core.traw_per_unit;

  GridRecorder rec{core, grid_raw, out, opts.stop, opts.freeze_after_stop};
  bool stopped_at_start = false;
  if (opts.stop.enabled()) {
    const auto sp = static_cast<std::size_t>(opts.stop.component);
    const double v = static_cast<double>(x0[sp]) * core.zscale[sp];
    if (v <= opts.stop.low)
      out.absorbed = true;
    else if (v >= opts.stop.high)
      out.escaped = true;
    if (out.absorbed || out.escaped) {
      out.stop_time = 0.0;
      stopped_at_start = true;
    }
  }
  if (!stopped_at_start) {
    Xoshiro256pp rng(seed);
    out.events =
        ssa_run(core, rng, t_end * core.traw_per_unit, opts.max_events, rec, opts.method);
  }
  rec.finish();
  return out;
}

MartingaleSample ssa_martingale(const ReactionNetwork& net, const ScalingSpec& scaling,
                                const MultiscaleDecomposition& dec,
                                const BilinearCorrector& corrector, double r_N,
                                const std::vector<std::int64_t>& x0, double t_end,
                                std::uint64_t seed, std::uint64_t max_events) {
  SsaCore core(net, scaling, x0);
  for (auto sp : corrector.key_species)
    if (sp >= core.s) sim_fail("corrector key names a species out of range");
  for (auto d : corrector.coord_dirs)
    if (d >= dec.dim_total()) sim_fail("corrector coordinate out of range");
  if (!corrector.weights) sim_fail("corrector weight evaluator is empty");

  MartingaleObserver obs(core, dec, corrector);
  const VectorXd v_start = obs.theta_slow * core.normalized_state();
  const VectorXd h_start = obs.cur->W * obs.c;

  Xoshiro256pp rng(seed);
  MartingaleSample out;
  // The compensator integrands read the maintained propensity vector, so this
  // always runs over the incremental dependency-graph loop.
  out.events = ssa_run_graph(core, rng, t_end * core.traw_per_unit, max_events, obs);

  const VectorXd v_end = obs.theta_slow * core.normalized_state();
  const VectorXd c_end = obs.theta_c * core.normalized_state();
  const VectorXd h_end = obs.cur->W * c_end;
  out.slow_end = v_end;
  out.m1 = r_N * (v_end - v_start - obs.acc1);
  out.m2 = r_N * corrector.scale * (h_end - h_start - obs.acc2);
  out.corrector_sup = r_N * corrector.scale * obs.sup_h;
  return out;
}

Trajectory ode_solve(const VectorField& f, const VectorXd& v0, double t_end,
                     const std::vector<double>& grid,
                     const std::vector<std::string>& components) {
  check_grid(grid, t_end);
  if (!f) sim_fail("vector field is empty");
  Trajectory out;
  out.method = "ode";
  out.times = grid;
  out.components = default_names(components, static_cast<std::size_t>(v0.size()), "v");
  out.states.setZero(ei(grid.size()), v0.size());

  OdeStepper stepper;
  double t = 0.0;
  VectorXd y = v0;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    stepper.advance_to(f, t, y, grid[i]);
    out.states.row(ei(i)) = y.transpose();
    ++out.events;
  }
  return out;
}

Trajectory sde_simulate(const SdeSpec& sde, const VectorXd& x0, double t_end,
                        std::uint64_t seed, const std::vector<double>& grid,
                        const SdeOptions& opts, const std::vector<std::string>& components) {
  check_grid(grid, t_end);
  if (!sde.drift || !sde.noise_factor) sim_fail("SDE drift/noise evaluators are empty");
  if (!(sde.noise_scale > 0.0)) sim_fail("SDE noise scale must be positive");
  const bool has_comp = static_cast<bool>(sde.companion_field);
  const Index n = x0.size();
  const Index ncomp = has_comp ? sde.companion_init.size() : 0;

  const double dt_req = opts.dt > 0.0 ? opts.dt : t_end / 2000.0;
  const std::size_t nsteps =
      static_cast<std::size_t>(std::ceil(t_end / dt_req - 1e-9));
  const double dt = t_end / static_cast<double>(nsteps);
  const double sqdt = std::sqrt(dt);

  if (opts.stop.enabled() && opts.stop.component >= n)
    sim_fail("stopping rule names a component out of range");

  Trajectory out;
  out.method = "sde";
  out.seed = seed;
  out.times = grid;
  const std::size_t width =
      static_cast<std::size_t>(n) + (opts.record_companion ? static_cast<std::size_t>(ncomp) : 0);
  out.components = default_names(components, width, "x");
  out.states.setZero(ei(grid.size()), ei(width));

  VectorXd xc = x0;
  VectorXd comp = has_comp ? sde.companion_init : VectorXd();
  Xoshiro256pp rng(seed);

  std::size_t gi = 0;
  auto record_until = [&](double t_now) {
    while (gi < grid.size() && grid[gi] <= t_now + 1e-12 * t_end) {
      out.states.row(ei(gi)).head(n) = xc.transpose();
      if (opts.record_companion && ncomp > 0)
        out.states.row(ei(gi)).tail(ncomp) = comp.transpose();
      ++gi;
    }
  };
  record_until(0.0);

  bool halted = false;
  for (std::size_t step = 0; step < nsteps && gi < grid.size(); ++step) {
    const double t = dt * static_cast<double>(step);
    const VectorXd mu = sde.drift(t, xc, comp);
    const MatrixXd sig = sde.noise_factor(t, xc, comp);
    VectorXd dw(sig.cols());
    for (Index j = 0; j < dw.size(); ++j) dw(j) = rng.normal() * sqdt;
    xc += dt * mu + sde.noise_scale * (sig * dw);
    if (has_comp) comp = rk4_step(sde.companion_field, t, comp, dt);
    ++out.events;
    if (!xc.allFinite() || (has_comp && !comp.allFinite()))
      sim_fail("non-finite state at t = " + format_double(t + dt));

    if (opts.boundary != BoundaryPolicy::None)
      for (Index i = 0; i < n; ++i)
        if (xc(i) < 0.0) {
          xc(i) = 0.0;
          if (opts.boundary == BoundaryPolicy::Reflect) ++out.boundary_clamps;
        }

    const double t_new = dt * static_cast<double>(step + 1);
    record_until(t_new);
    if (opts.stop.enabled()) {
      const double v = xc(opts.stop.component);
      if (v <= opts.stop.low)
        out.absorbed = true;
      else if (v >= opts.stop.high)
        out.escaped = true;
      if (out.absorbed || out.escaped) {
        out.stop_time = t_new;
        halted = true;
        break;
      }
    }
  }

  if (halted && !opts.freeze_after_stop) {
    out.times.resize(gi);
    out.states.conservativeResize(ei(gi), Eigen::NoChange);
  } else {
    record_until(t_end);
  }
  return out;
}

VariancePath variance_ode(const std::function<MatrixXd(const VectorXd&)>& jacobian,
                          const std::function<MatrixXd(const VectorXd&)>& gbar,
                          const VectorField& companion_field, const VectorXd& v0,
                          double t_end, const std::vector<double>& grid) {
  check_grid(grid, t_end);
  if (!jacobian || !gbar || !companion_field) sim_fail("variance ODE evaluators are empty");
  const Index n = v0.size();
  VectorXd y(n + n * n);
  y.head(n) = v0;
  y.tail(n * n).setZero();

  auto f = [&](double t, const VectorXd& yy) {
    const VectorXd v = yy.head(n);
    const MatrixXd S = unvec(yy, n, n);
    const MatrixXd J = jacobian(v);
    const MatrixXd dS = J * S + S * J.transpose() + gbar(v);
    VectorXd dy(yy.size());
    dy.head(n) = companion_field(t, v);
    vec_into(dy, n, dS);
    return dy;
  };

  VariancePath out;
  out.times = grid;
  OdeStepper stepper;
  double t = 0.0;
  for (double tg : grid) {
    stepper.advance_to(f, t, y, tg);
    MatrixXd S = unvec(y, n, n);
    S = 0.5 * (S + S.transpose()).eval();
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(S);
    if (es.info() != Eigen::Success)
      sim_fail("variance matrix eigensolve failed at t = " + format_double(tg));
    const double floor_tol = -1e-7 * (1.0 + S.cwiseAbs().maxCoeff());
    VectorXd ev = es.eigenvalues();
    for (Index i = 0; i < ev.size(); ++i) {
      if (ev(i) < floor_tol)
        sim_fail("variance matrix lost positive semidefiniteness at t = " + format_double(tg));
      if (ev(i) < 0.0) ev(i) = 0.0;
    }
    S = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
    out.sigma.push_back(S);
    out.companion.push_back(y.head(n));
  }
  return out;
}

namespace {

// Shared accumulator for the fast-subnetwork time averages over [T/2, T].
struct MomentAccumulator {
  double t_lo, t_hi;
  VectorXd iz;
  MatrixXd izz;
  explicit MomentAccumulator(Index n, double t_end)
      : t_lo(0.5 * t_end), t_hi(t_end), iz(VectorXd::Zero(n)), izz(MatrixXd::Zero(n, n)) {}
  // exact for piecewise-constant states (jump chains)
  void add_hold(double t, double dt, const VectorXd& z) {
    const double a = std::max(t, t_lo);
    const double b = std::min(t + dt, t_hi);
    if (b <= a) return;
    iz += (b - a) * z;
    izz += (b - a) * (z * z.transpose());
  }
  void finalize(FastSimResult& out) const {
    const double span = t_hi - t_lo;
    out.time_avg = iz / span;
    out.time_avg_second = izz / span;
  }
};

}  // namespace

FastSimResult fast_subnetwork_simulate(
    const GeneratorDescription& gen,
    const std::function<double(std::size_t, const VectorXd&)>& rate,
    const VectorXd& z0, double t_end, std::uint64_t seed,
    const std::vector<double>& grid, const std::vector<std::string>& components,
    std::uint64_t max_events) {
  check_grid(grid, t_end);
  if (!rate) sim_fail("rate evaluator is empty");
  const Index n = z0.size();
  for (const auto& term : gen.jump_terms)
    if (ei(term.direction.size()) != n) sim_fail("jump direction has the wrong dimension");
  for (const auto& term : gen.drift_terms)
    if (ei(term.direction.size()) != n) sim_fail("drift direction has the wrong dimension");

  FastSimResult res;
  Trajectory& out = res.traj;
  out.method = "fast";
  out.seed = seed;
  out.times = grid;
  out.components = default_names(components, static_cast<std::size_t>(n), "z");
  out.states.setZero(ei(grid.size()), n);
  MomentAccumulator acc(n, t_end);

  auto dir_vec = [&](const GeneratorTerm& term) {
    return Eigen::Map<const VectorXd>(term.direction.data(), n);
  };
  auto intensity = [&](const VectorXd& z) {
    double s = 0.0;
    for (const auto& term : gen.jump_terms) s += std::max(0.0, rate(term.reaction, z));
    return s;
  };

  Xoshiro256pp rng(seed);
  std::size_t gi = 0;
  auto record_until = [&](double t_now, const VectorXd& z) {
    while (gi < grid.size() && grid[gi] <= t_now + 1e-12 * t_end) {
      out.states.row(ei(gi)) = z.transpose();
      ++gi;
    }
  };

  auto select_jump = [&](const VectorXd& z, double lam) -> const GeneratorTerm* {
    double r = rng.uniform() * lam;
    double a = 0.0;
    const GeneratorTerm* last = nullptr;
    for (const auto& term : gen.jump_terms) {
      const double rk = std::max(0.0, rate(term.reaction, z));
      if (rk <= 0.0) continue;
      last = &term;
      a += rk;
      if (r < a) return &term;
    }
    return last;
  };

  if (gen.drift_terms.empty()) {
    // pure jump chain: exact exponential holding times
    VectorXd z = z0;
    double t = 0.0;
    record_until(0.0, z);
    for (;;) {
      const double lam = intensity(z);
      const double dt = lam > 0.0 ? rng.exponential() / lam
                                  : std::numeric_limits<double>::infinity();
      const double t_new = t + dt;
      const double t_stop = std::min(t_new, t_end);
      acc.add_hold(t, t_stop - t, z);
      while (gi < grid.size() && grid[gi] < t_new) {
        out.states.row(ei(gi)) = z.transpose();
        ++gi;
      }
      if (t_new >= t_end) break;
      const GeneratorTerm* term = select_jump(z, lam);
      if (term == nullptr) break;
      z += dir_vec(*term);
      t = t_new;
      if (++out.events >= max_events) sim_fail("jump cap exceeded in the fast subnetwork");
    }
    record_until(t_end, z);
    acc.finalize(res);
    return res;
  }

  // Flow, optionally punctuated by jumps.  The state is augmented with the
  // integrated jump intensity and (past T/2) the running moment integrals;
  // jump times invert the integrated intensity by bisection inside the
  // crossing substep.
  const bool has_jumps = !gen.jump_terms.empty();
  const Index ia = n + 1;               // offset of moment block
  const Index naug = n + 1 + n + n * n;  // z, cum intensity, int z, int zz^T

  auto faug = [&](double, const VectorXd& y) {
    const VectorXd z = y.head(n);
    VectorXd dy = VectorXd::Zero(naug);
    for (const auto& term : gen.drift_terms)
      dy.head(n) += rate(term.reaction, z) * dir_vec(term);
    dy(n) = has_jumps ? intensity(z) : 0.0;
    dy.segment(ia, n) = z;
    vec_into(dy, ia + n, MatrixXd(z * z.transpose()));
    return dy;
  };

  VectorXd y = VectorXd::Zero(naug);
  y.head(n) = z0;
  double t = 0.0;
  record_until(0.0, z0);
  double target_exp = has_jumps ? rng.exponential() : 0.0;
  const double h0 = t_end / 20000.0;
  bool accumulating = false;

  while (t < t_end) {
    if (!accumulating && t >= 0.5 * t_end * (1.0 - 1e-15)) {
      accumulating = true;
      y.segment(ia, n).setZero();
      y.tail(n * n).setZero();
    }
    double t_next = std::min(t + h0, t_end);
    if (!accumulating) t_next = std::min(t_next, 0.5 * t_end);
    if (gi < grid.size() && grid[gi] > t) t_next = std::min(t_next, grid[gi]);
    const double h = t_next - t;
    VectorXd y1 = rk4_step(faug, t, y, h);
    if (!y1.allFinite() || y1.head(n).lpNorm<Eigen::Infinity>() > 1e12)
      sim_fail("fast subnetwork state blow-up at t = " + format_double(t));

    if (has_jumps && y1(n) >= target_exp) {
      // bracket the crossing time inside [t, t+h]
      double lo = 0.0, hi = h;
      VectorXd ycross = y1;
      for (int it = 0; it < 60 && (hi - lo) > 1e-13 * std::max(1.0, h); ++it) {
        const double mid = 0.5 * (lo + hi);
        const VectorXd ym = rk4_step(faug, t, y, mid);
        if (ym(n) >= target_exp) {
          hi = mid;
          ycross = ym;
        } else {
          lo = mid;
        }
      }
      t += hi;
      y = ycross;
      VectorXd z = y.head(n);
      const double lam = intensity(z);
      const GeneratorTerm* term = lam > 0.0 ? select_jump(z, lam) : nullptr;
      if (term != nullptr) z += dir_vec(*term);
      y.head(n) = z;
      y(n) = 0.0;
      target_exp = rng.exponential();
      if (++out.events >= max_events) sim_fail("jump cap exceeded in the fast subnetwork");
      record_until(t, y.head(n));
      continue;
    }

    t = t_next;
    y = y1;
    record_until(t, y.head(n));
  }
  record_until(t_end, y.head(n));

  const double span = 0.5 * t_end;
  res.time_avg = y.segment(ia, n) / span;
  res.time_avg_second = unvec(y, ia + n, n) / span;
  return res;
}

}  // namespace msrn
