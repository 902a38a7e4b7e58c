#include "msrn/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "msrn/errors.hpp"
#include "msrn/rng.hpp"
#include "msrn/scales.hpp"

namespace msrn {

namespace {

Eigen::VectorXd to_eigen(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

Eigen::Index ei(std::size_t i) { return static_cast<Eigen::Index>(i); }

// Writes the fastest-level conditional-equilibrium means into the fast
// coordinates of `v`; the frozen slower coordinates must sit on the count
// lattice when the equilibrium is a finite distribution.
void apply_fast_means(const AveragingEngine& avg, Eigen::VectorXd& v) {
  const ConditionalEquilibrium eq = avg.fast_equilibrium(v);
  if (eq.kind == ConditionalEquilibrium::Kind::FirstMoments) {
    for (std::size_t j = 0; j < eq.dir_indices.size(); ++j)
      v(ei(eq.dir_indices[j])) = eq.moments[j];
    return;
  }
  Eigen::VectorXd z = avg.state_from_v(v);
  for (std::size_t j = 0; j < eq.discrete_species.size(); ++j) {
    double mean = 0.0;
    for (std::size_t q = 0; q < eq.states.size(); ++q)
      mean += eq.probabilities[q] * static_cast<double>(eq.states[q][j]);
    z(ei(eq.discrete_species[j])) = mean;
  }
  const Eigen::MatrixXd& T = avg.decomposition().T;
  for (auto l : avg.fast_dirs()) v(ei(l)) = T.row(ei(l)).dot(z);
}

// Species state with the intermediate and fastest coordinates of `v` replaced
// by their conditional-equilibrium means given the slower ones.  A finite
// fastest level needs its frozen discrete coordinates on the count lattice;
// an intermediate-level mean rarely lands there, so the conditional means are
// blended linearly between the neighbouring lattice values.
Eigen::VectorXd equilibrium_species(const AveragingEngine& avg, Eigen::VectorXd v) {
  if (!avg.mid_dirs().empty()) {
    const Eigen::VectorXd mm = avg.mid_moments(v);
    for (std::size_t j = 0; j < avg.mid_dirs().size(); ++j)
      v(ei(avg.mid_dirs()[j])) = mm(ei(j));
  }
  if (avg.has_fast_level()) {
    std::vector<std::pair<std::size_t, double>> off;  // direction, lattice value w
    if (avg.fastest_finite()) {
      const auto& dirs = avg.decomposition().directions;
      for (std::size_t l = 0; l < dirs.size(); ++l) {
        if (!dirs[l].dir.alpha.is_zero()) continue;
        if (std::find(avg.fast_dirs().begin(), avg.fast_dirs().end(), l) !=
            avg.fast_dirs().end())
          continue;
        const double w = v(ei(l)) * dirs[l].norm;
        if (std::abs(w - std::round(w)) > 1e-6) off.emplace_back(l, w);
      }
    }
    if (off.empty()) {
      apply_fast_means(avg, v);
    } else {
      if (off.size() > 4)
        throw PipelineError(PipelineError::Code::Unsupported,
                            "too many off-lattice frozen coordinates to blend");
      const auto& dirs = avg.decomposition().directions;
      Eigen::VectorXd acc = Eigen::VectorXd::Zero(v.size());
      double total_weight = 0.0;
      for (std::size_t corner = 0; corner < (std::size_t{1} << off.size()); ++corner) {
        Eigen::VectorXd vc = v;
        double weight = 1.0;
        for (std::size_t j = 0; j < off.size(); ++j) {
          const double lo = std::floor(off[j].second);
          const bool up = corner >> j & 1;
          weight *= up ? off[j].second - lo : 1.0 - (off[j].second - lo);
          vc(ei(off[j].first)) = (up ? lo + 1.0 : lo) / dirs[off[j].first].norm;
        }
        if (weight <= 0.0) continue;
        try {
          apply_fast_means(avg, vc);
        } catch (const PipelineError&) {
          continue;  // infeasible lattice corner (e.g. negative count)
        }
        acc += weight * vc;
        total_weight += weight;
      }
      if (total_weight <= 0.0)
        throw PipelineError(PipelineError::Code::Unsupported,
                            "no feasible lattice corner near the frozen coordinates");
      v = acc / total_weight;
    }
  }
  return avg.state_from_v(v);
}

// Maps grid rows of slow-block values to a normalized-species trajectory.
Trajectory slow_rows_to_species(const NetworkAnalysis& an, const std::vector<double>& grid,
                                const Eigen::MatrixXd& slow_rows, std::string method) {
  const AveragingEngine& avg = *an.avg;
  Trajectory out;
  out.times = grid;
  out.components = an.species_names();
  out.method = std::move(method);
  out.states.resize(ei(grid.size()), ei(out.components.size()));
  for (std::size_t g = 0; g < grid.size(); ++g) {
    const Eigen::VectorXd v = avg.full_v_from_slow(slow_rows.row(ei(g)).transpose());
    out.states.row(ei(g)) = equilibrium_species(avg, v).transpose();
  }
  return out;
}

// Slow block of the initial coordinates (directions are ordered slow-first).
Eigen::VectorXd initial_slow(const NetworkAnalysis& an) {
  return an.avg->initial_v().head(ei(an.dec->s0));
}

VectorField slow_field(const NetworkAnalysis& an) {
  const AveragingEngine* avg = an.avg.get();
  return [avg](double, const Eigen::VectorXd& vs) {
    return avg->F_bar(avg->full_v_from_slow(vs));
  };
}

std::uint64_t run_seed(std::uint64_t master, std::uint64_t index) {
  return Xoshiro256pp::for_stream(master, index).next();
}

}  // namespace

std::vector<std::string> NetworkAnalysis::species_names() const {
  std::vector<std::string> names;
  names.reserve(dec->net.species.size());
  for (const auto& sp : dec->net.species) names.push_back(sp.name);
  return names;
}

std::vector<std::int64_t> NetworkAnalysis::initial_counts() const {
  std::vector<std::int64_t> x0;
  x0.reserve(dec->net.species.size());
  for (const auto& sp : dec->net.species) x0.push_back(sp.initial_count);
  return x0;
}

NetworkAnalysis analyze_network(const ReactionNetwork& net, const ScalingSpec& scaling) {
  NetworkAnalysis an;
  an.gamma_input = scaling.gamma;
  try {
    an.dec = std::make_unique<MultiscaleDecomposition>(decompose(net, scaling));
  } catch (const PipelineError& e) {
    if (e.code() != PipelineError::Code::TimeNotNormalized) throw;
    ScalingSpec adjusted = scaling;
    adjusted.gamma = choose_gamma(net, scaling);
    an.dec = std::make_unique<MultiscaleDecomposition>(decompose(net, adjusted));
    an.gamma_adjusted = true;
  }
  an.gamma_used = an.dec->scaling.gamma;
  an.avg = std::make_unique<AveragingEngine>(*an.dec);
  an.cor = std::make_unique<CorrectionModel>(*an.avg);
  return an;
}

Trajectory ode_limit(const NetworkAnalysis& an, double t_end,
                     const std::vector<double>& grid) {
  Trajectory slow = ode_solve(slow_field(an), initial_slow(an), t_end, grid);
  Trajectory out = slow_rows_to_species(an, grid, slow.states, "ode");
  out.events = slow.events;
  return out;
}

namespace {

[[noreturn]] void pipe_fail(const std::string& msg) {
  throw PipelineError(PipelineError::Code::SimulationFailure, msg);
}

void check_pipe_grid(const std::vector<double>& grid, double t_end) {
  if (grid.empty()) pipe_fail("output grid is empty");
  if (grid.front() < 0.0 || grid.back() > t_end * (1.0 + 1e-12))
    pipe_fail("output grid leaves [0, t_end]");
  for (std::size_t i = 1; i < grid.size(); ++i)
    if (grid[i] <= grid[i - 1]) pipe_fail("output grid is not strictly increasing");
}

Eigen::VectorXd rk4(const VectorField& f, double t, const Eigen::VectorXd& y, double h) {
  const Eigen::VectorXd k1 = f(t, y);
  const Eigen::VectorXd k2 = f(t + 0.5 * h, y + (0.5 * h) * k1);
  const Eigen::VectorXd k3 = f(t + 0.5 * h, y + (0.5 * h) * k2);
  const Eigen::VectorXd k4 = f(t + h, y + h * k3);
  return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

std::size_t step_count(double t_end, double dt_req) {
  return static_cast<std::size_t>(std::ceil(t_end / dt_req - 1e-9));
}

// Coefficients of the fluctuation SDE frozen along the deterministic limit
// path, sampled once per Euler-Maruyama step and shared across runs.
struct LnaTable {
  double t_end = 0.0, dt = 0.0, rinv = 1.0;
  std::size_t nsteps = 0;
  std::vector<double> grid;
  Eigen::MatrixXd v0_rows;  // limit path at the grid times (grid x s0)
  std::vector<Eigen::MatrixXd> jac, sig;
  std::vector<Eigen::VectorXd> g01;
};

LnaTable make_lna_table(const NetworkAnalysis& an, double t_end,
                        const std::vector<double>& grid, double dt_req) {
  check_pipe_grid(grid, t_end);
  const AveragingEngine& avg = *an.avg;
  const CorrectionModel& cor = *an.cor;
  const VectorField field = slow_field(an);
  const auto s0 = ei(an.dec->s0);

  LnaTable tb;
  tb.t_end = t_end;
  tb.rinv = 1.0 / an.r();
  tb.grid = grid;
  tb.nsteps = step_count(t_end, dt_req > 0.0 ? dt_req : t_end / 2000.0);
  tb.dt = t_end / static_cast<double>(tb.nsteps);
  tb.jac.reserve(tb.nsteps);
  tb.sig.reserve(tb.nsteps);
  tb.g01.reserve(tb.nsteps);
  tb.v0_rows.resize(ei(grid.size()), s0);

  Eigen::VectorXd vs = initial_slow(an);
  std::size_t gi = 0;
  auto record_until = [&](double t_now) {
    while (gi < grid.size() && grid[gi] <= t_now + 1e-12 * t_end)
      tb.v0_rows.row(ei(gi++)) = vs.transpose();
  };
  record_until(0.0);
  for (std::size_t k = 0; k < tb.nsteps; ++k) {
    const Eigen::VectorXd v = avg.full_v_from_slow(vs);
    tb.jac.push_back(avg.F_bar_jacobian(v));
    tb.sig.push_back(cor.sigma(v));
    tb.g01.push_back(cor.G0(v) + cor.G1(v));
    vs = rk4(field, tb.dt * static_cast<double>(k), vs, tb.dt);
    if (!vs.allFinite())
      pipe_fail("limit path is non-finite at t = " +
                format_double(tb.dt * static_cast<double>(k + 1)));
    record_until(tb.dt * static_cast<double>(k + 1));
  }
  record_until(t_end);
  return tb;
}

Trajectory lna_from_table(const NetworkAnalysis& an, const LnaTable& tb,
                          std::uint64_t seed) {
  const auto s0 = ei(an.dec->s0);
  const double sqdt = std::sqrt(tb.dt);
  Xoshiro256pp rng(seed);

  Eigen::MatrixXd slow_rows(ei(tb.grid.size()), s0);
  Eigen::VectorXd u = Eigen::VectorXd::Zero(s0);
  Eigen::VectorXd dw(s0), unew(s0);
  std::size_t gi = 0;
  auto record_until = [&](double t_now) {
    while (gi < tb.grid.size() && tb.grid[gi] <= t_now + 1e-12 * tb.t_end) {
      slow_rows.row(ei(gi)) = tb.v0_rows.row(ei(gi)) + tb.rinv * u.transpose();
      ++gi;
    }
  };
  record_until(0.0);
  for (std::size_t k = 0; k < tb.nsteps && gi < tb.grid.size(); ++k) {
    for (Eigen::Index j = 0; j < s0; ++j) dw(j) = rng.normal() * sqdt;
    unew.noalias() = tb.sig[k] * dw;
    unew.noalias() += tb.dt * (tb.jac[k] * u + tb.g01[k]);
    u += unew;
    if (!u.allFinite())
      pipe_fail("non-finite state at t = " +
                format_double(tb.dt * static_cast<double>(k + 1)));
    record_until(tb.dt * static_cast<double>(k + 1));
  }
  record_until(tb.t_end);

  Trajectory out = slow_rows_to_species(an, tb.grid, slow_rows, "lna");
  out.seed = seed;
  out.events = tb.nsteps;
  return out;
}

}  // namespace

Trajectory lna_simulate(const NetworkAnalysis& an, double t_end, std::uint64_t seed,
                        const std::vector<double>& grid, const GaussianOptions& opts) {
  return lna_from_table(an, make_lna_table(an, t_end, grid, opts.dt), seed);
}

namespace {

// Index of the slow coordinate that coincides with the given species, for
// stopping rules on reduced models.
std::size_t slow_coordinate_of_species(const NetworkAnalysis& an, std::size_t species) {
  const auto& dec = *an.dec;
  for (std::size_t l = 0; l < dec.s0; ++l) {
    const RatVec& g = dec.directions[l].dir.generator;
    bool unit = true;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const bool want_one = i == species;
      if (g[i] != Rational(want_one ? 1 : 0)) unit = false;
    }
    if (unit) return l;
  }
  throw PipelineError(PipelineError::Code::Unsupported,
                      "species '" + an.network().species[species].name +
                          "' is not itself a slow coordinate; boundary rules on reduced "
                          "models need one");
}

}  // namespace

namespace {

// Langevin drift and noise factor of a one-dimensional slow block, sampled on
// a uniform lattice (linear interpolation; direct evaluation off the lattice).
struct Diff1DTable {
  double zhi = 0.0, inv_dx = 0.0, rinv = 1.0;
  std::vector<double> drift, noise;
  const AveragingEngine* avg = nullptr;
  const CorrectionModel* cor = nullptr;

  void direct(double z, double& f, double& s) const {
    const Eigen::VectorXd v = avg->full_v_from_slow(Eigen::VectorXd::Constant(1, z));
    f = avg->F_bar(v)(0) + rinv * (cor->G0(v) + cor->G1(v))(0);
    s = cor->sigma(v)(0, 0);
  }
  void eval(double z, double& f, double& s) const {
    if (!(z >= 0.0 && z <= zhi)) {
      direct(z, f, s);
      return;
    }
    const double p = z * inv_dx;
    auto i = static_cast<std::size_t>(p);
    if (i >= drift.size() - 1) i = drift.size() - 2;
    const double w = p - static_cast<double>(i);
    f = drift[i] + w * (drift[i + 1] - drift[i]);
    s = noise[i] + w * (noise[i + 1] - noise[i]);
  }
};

Diff1DTable make_diff1d_table(const NetworkAnalysis& an, double t_end, double stop_high) {
  Diff1DTable tb;
  tb.avg = an.avg.get();
  tb.cor = an.cor.get();
  tb.rinv = 1.0 / an.r();

  // Cover the range the limit path visits, the escape boundary, and a noise
  // margin; excursions beyond fall back to direct evaluation.
  const VectorField field = slow_field(an);
  Eigen::VectorXd vs = initial_slow(an);
  double zmax = vs(0);
  const double h = t_end / 512.0;
  for (int k = 0; k < 512; ++k) {
    vs = rk4(field, h * k, vs, h);
    if (!vs.allFinite()) pipe_fail("limit path is non-finite");
    zmax = std::max(zmax, vs(0));
  }
  if (std::isfinite(stop_high)) zmax = std::max(zmax, stop_high);
  tb.zhi = 1.3 * zmax + 0.5;

  const std::size_t nodes = 4097;
  tb.inv_dx = static_cast<double>(nodes - 1) / tb.zhi;
  tb.drift.resize(nodes);
  tb.noise.resize(nodes);
  for (std::size_t j = 0; j < nodes; ++j)
    tb.direct(static_cast<double>(j) / tb.inv_dx, tb.drift[j], tb.noise[j]);
  return tb;
}

// Euler-Maruyama on a one-dimensional slow block with tabulated coefficients;
// mirrors the generic integrator's stepping, recording and stopping rules.
Trajectory diffusion_1d_run(const NetworkAnalysis& an, const Diff1DTable& tb, double t_end,
                            std::uint64_t seed, const std::vector<double>& grid,
                            const DiffusionOptions& opts, const StoppingRule& stop) {
  check_pipe_grid(grid, t_end);
  const std::size_t nsteps = step_count(t_end, opts.dt > 0.0 ? opts.dt : t_end / 2000.0);
  const double dt = t_end / static_cast<double>(nsteps);
  const double sqdt = std::sqrt(dt);
  Xoshiro256pp rng(seed);

  Eigen::MatrixXd slow_rows(ei(grid.size()), 1);
  double z = initial_slow(an)(0);
  std::uint64_t clamps = 0;
  bool absorbed = false, escaped = false;
  double stop_time = std::numeric_limits<double>::quiet_NaN();
  std::size_t gi = 0;
  auto record_until = [&](double t_now) {
    while (gi < grid.size() && grid[gi] <= t_now + 1e-12 * t_end)
      slow_rows(ei(gi++), 0) = z;
  };
  record_until(0.0);

  std::uint64_t steps_done = 0;
  bool halted = false;
  for (std::size_t k = 0; k < nsteps && gi < grid.size(); ++k) {
    double f, s;
    tb.eval(z, f, s);
    z += dt * f + tb.rinv * s * (rng.normal() * sqdt);
    ++steps_done;
    if (!std::isfinite(z))
      pipe_fail("non-finite state at t = " + format_double(dt * static_cast<double>(k + 1)));
    if (z < 0.0) {
      z = 0.0;
      if (!stop.enabled()) ++clamps;  // reflecting; absorbing is caught below
    }
    record_until(dt * static_cast<double>(k + 1));
    if (stop.enabled()) {
      if (z <= stop.low)
        absorbed = true;
      else if (z >= stop.high)
        escaped = true;
      if (absorbed || escaped) {
        stop_time = dt * static_cast<double>(k + 1);
        halted = true;
        break;
      }
    }
  }

  std::vector<double> times = grid;
  if (halted && !opts.freeze_after_stop) {
    times.resize(gi);
    slow_rows.conservativeResize(ei(gi), Eigen::NoChange);
  } else {
    record_until(t_end);
  }

  Trajectory out = slow_rows_to_species(an, times, slow_rows, "diffusion");
  out.seed = seed;
  out.events = steps_done;
  out.absorbed = absorbed;
  out.escaped = escaped;
  out.stop_time = stop_time;
  out.boundary_clamps = clamps;
  return out;
}

// Stopping rule translated from a species index to a slow coordinate.
StoppingRule slow_stop(const NetworkAnalysis& an, const StoppingRule& stop) {
  StoppingRule s = stop;
  if (s.enabled())
    s.component = static_cast<int>(
        slow_coordinate_of_species(an, static_cast<std::size_t>(stop.component)));
  return s;
}

Trajectory diffusion_generic(const NetworkAnalysis& an, double t_end, std::uint64_t seed,
                             const std::vector<double>& grid, const DiffusionOptions& opts,
                             const StoppingRule& stop) {
  const AveragingEngine* avg = an.avg.get();
  const CorrectionModel* cor = an.cor.get();
  const double rinv = 1.0 / an.r();

  SdeSpec sde;
  sde.drift = [avg, cor, rinv](double, const Eigen::VectorXd& z, const Eigen::VectorXd&) {
    const Eigen::VectorXd v = avg->full_v_from_slow(z);
    return (avg->F_bar(v) + rinv * (cor->G0(v) + cor->G1(v))).eval();
  };
  sde.noise_factor = [avg, cor](double, const Eigen::VectorXd& z, const Eigen::VectorXd&) {
    return cor->sigma(avg->full_v_from_slow(z));
  };
  sde.noise_scale = rinv;

  SdeOptions so;
  so.dt = opts.dt;
  so.freeze_after_stop = opts.freeze_after_stop;
  if (stop.enabled()) {
    so.boundary = BoundaryPolicy::Absorb;
    so.stop = stop;
  } else {
    so.boundary = BoundaryPolicy::Reflect;
  }

  Trajectory raw = sde_simulate(sde, initial_slow(an), t_end, seed, grid, so);
  Trajectory out = slow_rows_to_species(an, raw.times, raw.states, "diffusion");
  out.seed = seed;
  out.events = raw.events;
  out.absorbed = raw.absorbed;
  out.escaped = raw.escaped;
  out.stop_time = raw.stop_time;
  out.boundary_clamps = raw.boundary_clamps;
  return out;
}

}  // namespace

Trajectory diffusion_simulate(const NetworkAnalysis& an, double t_end, std::uint64_t seed,
                              const std::vector<double>& grid,
                              const DiffusionOptions& opts) {
  const StoppingRule stop = slow_stop(an, opts.stop);
  if (an.dec->s0 == 1) {
    const Diff1DTable tb =
        make_diff1d_table(an, t_end, stop.enabled() ? stop.high : -1.0);
    return diffusion_1d_run(an, tb, t_end, seed, grid, opts, stop);
  }
  return diffusion_generic(an, t_end, seed, grid, opts, stop);
}

FastSimResult fast_limit_simulate(const NetworkAnalysis& an, double t_end,
                                  std::uint64_t seed, const std::vector<double>& grid) {
  const auto& dec = *an.dec;
  const int lvl = dec.level2.m.finite ? 2 : 1;
  const ScaleLevel& level = dec.level(lvl);
  if (!level.m.finite)
    throw PipelineError(PipelineError::Code::Unsupported,
                        "network has no fast level to simulate");
  const GeneratorDescription gen = limit_generator(level, dec.net);
  const AveragingEngine* avg = an.avg.get();
  const auto rate = [avg](std::size_t k, const Eigen::VectorXd& z) {
    return avg->limit_propensity(k, z);
  };
  const Eigen::VectorXd z0 = to_eigen(dec.initial_normalized_state());
  return fast_subnetwork_simulate(gen, rate, z0, t_end, seed, grid, an.species_names());
}

Eigen::MatrixXd lna_analytic_std(const NetworkAnalysis& an, double t_end,
                                 const std::vector<double>& grid) {
  const AveragingEngine* avg = an.avg.get();
  const CorrectionModel* cor = an.cor.get();
  const auto jac = [avg](const Eigen::VectorXd& v0s) {
    return avg->F_bar_jacobian(avg->full_v_from_slow(v0s));
  };
  const auto gb = [avg, cor](const Eigen::VectorXd& v0s) {
    return cor->Gbar(avg->full_v_from_slow(v0s));
  };
  const VariancePath vp =
      variance_ode(jac, gb, slow_field(an), initial_slow(an), t_end, grid);

  const auto s0 = ei(an.dec->s0);
  const Eigen::MatrixXd theta = an.dec->T.topRows(s0);  // s0 x species
  const double rinv = 1.0 / an.r();
  Eigen::MatrixXd out(ei(grid.size()), theta.cols());
  for (std::size_t g = 0; g < grid.size(); ++g) {
    const Eigen::MatrixXd cov = theta.transpose() * vp.sigma[g] * theta;
    for (Eigen::Index i = 0; i < theta.cols(); ++i)
      out(ei(g), i) = rinv * std::sqrt(std::max(0.0, cov(i, i)));
  }
  return out;
}

BilinearCorrector martingale_corrector(const NetworkAnalysis& an) {
  const auto& dec = *an.dec;
  if (dec.fast_level_count() != 1)
    throw PipelineError(PipelineError::Code::Unsupported,
                        "the corrector martingale harness supports exactly one fast level");
  BilinearCorrector bc;
  bc.coord_dirs = an.cor->first_corrector_dirs();

  // The weight matrix reads the slower coordinates only; their species
  // supports form the memo key.
  std::vector<std::size_t> key;
  for (std::size_t l = 0; l < dec.s0 + dec.nconst; ++l) {
    const RatVec& g = dec.directions[l].dir.generator;
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!g[i].is_zero()) key.push_back(i);
  }
  std::sort(key.begin(), key.end());
  key.erase(std::unique(key.begin(), key.end()), key.end());
  bc.key_species = std::move(key);

  const MultiscaleDecomposition* dp = an.dec.get();
  const CorrectionModel* cor = an.cor.get();
  bc.weights = [dp, cor](const Eigen::VectorXd& z) {
    std::vector<double> zv(z.data(), z.data() + z.size());
    return cor->first_corrector(to_eigen(dp->functionals_from_state(zv)));
  };
  bc.scale = std::pow(an.N(), -dec.level1.m.m.to_double());
  return bc;
}

MartingaleSample run_martingale(const NetworkAnalysis& an, double t_end,
                                std::uint64_t seed, std::uint64_t max_events) {
  return ssa_martingale(an.network(), an.scaling(), *an.dec, martingale_corrector(an),
                        an.r(), an.initial_counts(), t_end, seed, max_events);
}

Eigen::MatrixXd martingale_limit_variance(const NetworkAnalysis& an, double t_end) {
  const AveragingEngine* avg = an.avg.get();
  const CorrectionModel* cor = an.cor.get();
  const auto s0 = ei(an.dec->s0);
  const auto zero_jac = [s0](const Eigen::VectorXd&) {
    return Eigen::MatrixXd::Zero(s0, s0).eval();
  };
  const auto gb = [avg, cor](const Eigen::VectorXd& v0s) {
    return cor->Gbar(avg->full_v_from_slow(v0s));
  };
  const VariancePath vp = variance_ode(zero_jac, gb, slow_field(an), initial_slow(an),
                                       t_end, uniform_grid(t_end, 8));
  return vp.sigma.back();
}

std::vector<double> raw_unit_scale(const NetworkAnalysis& an) {
  std::vector<double> scale;
  scale.reserve(an.network().species.size());
  for (const auto& sp : an.network().species)
    scale.push_back(std::pow(an.N(), sp.alpha.to_double()));
  return scale;
}

StoppingRule count_stopping(const NetworkAnalysis& an, std::size_t species,
                            std::int64_t low_raw, std::int64_t high_raw) {
  const double zscale = std::pow(an.N(), -an.network().species[species].alpha.to_double());
  StoppingRule rule;
  rule.component = static_cast<int>(species);
  rule.low = (static_cast<double>(low_raw) + 0.5) * zscale;
  rule.high = (static_cast<double>(high_raw) - 0.5) * zscale;
  return rule;
}

TrajectorySampler ssa_sampler(const NetworkAnalysis& an, double t_end,
                              std::vector<double> grid, std::uint64_t master_seed,
                              SsaOptions opts) {
  const NetworkAnalysis* a = &an;
  return [a, t_end, grid = std::move(grid), master_seed, opts,
          x0 = an.initial_counts()](std::uint64_t i) {
    return ssa_simulate(a->network(), a->scaling(), x0, t_end, run_seed(master_seed, i),
                        grid, opts);
  };
}

TrajectorySampler ode_sampler(const NetworkAnalysis& an, double t_end,
                              std::vector<double> grid) {
  auto shared = std::make_shared<Trajectory>(ode_limit(an, t_end, grid));
  return [shared](std::uint64_t) { return *shared; };
}

TrajectorySampler lna_sampler(const NetworkAnalysis& an, double t_end,
                              std::vector<double> grid, std::uint64_t master_seed,
                              GaussianOptions opts) {
  const NetworkAnalysis* a = &an;
  auto tb = std::make_shared<const LnaTable>(make_lna_table(an, t_end, grid, opts.dt));
  return [a, tb, master_seed](std::uint64_t i) {
    return lna_from_table(*a, *tb, run_seed(master_seed, i));
  };
}

TrajectorySampler diffusion_sampler(const NetworkAnalysis& an, double t_end,
                                    std::vector<double> grid, std::uint64_t master_seed,
                                    DiffusionOptions opts) {
  const NetworkAnalysis* a = &an;
  const StoppingRule stop = slow_stop(an, opts.stop);
  if (an.dec->s0 == 1) {
    auto tb = std::make_shared<const Diff1DTable>(
        make_diff1d_table(an, t_end, stop.enabled() ? stop.high : -1.0));
    return [a, tb, t_end, grid = std::move(grid), master_seed, opts,
            stop](std::uint64_t i) {
      return diffusion_1d_run(*a, *tb, t_end, run_seed(master_seed, i), grid, opts, stop);
    };
  }
  return [a, t_end, grid = std::move(grid), master_seed, opts, stop](std::uint64_t i) {
    return diffusion_generic(*a, t_end, run_seed(master_seed, i), grid, opts, stop);
  };
}

}  // namespace msrn
