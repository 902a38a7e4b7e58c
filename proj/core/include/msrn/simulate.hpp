#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "msrn/network.hpp"
#include "msrn/subspaces.hpp"

namespace msrn {

// One sample path (or deterministic solution) on an output grid.  States are
// stored one grid point per row; `components` names the columns.  Exact-path
// methods (SSA, fast subnetwork) sample the right-continuous path at the grid
// times; grid-based methods record their own steps restricted to the grid.
struct Trajectory {
  std::vector<double> times;  // normalized time
  Eigen::MatrixXd states;     // times.size() x components.size()
  std::vector<std::string> components;
  std::string method;
  std::uint64_t seed = 0;
  std::uint64_t events = 0;  // jump events (SSA/PDMP) or integrator steps
  bool absorbed = false;     // hit the lower stopping boundary
  bool escaped = false;      // hit the upper stopping boundary
  double stop_time = std::numeric_limits<double>::quiet_NaN();
  std::uint64_t boundary_clamps = 0;  // reflections applied at zero
};

// Evenly spaced output grid 0 = t_0 < ... < t_n = t_end.
std::vector<double> uniform_grid(double t_end, std::size_t n);

// Stop a path when `component` first leaves [low, high]; `low`/`high` are in
// the recorded (normalized) units.  Disabled when component < 0; either bound
// alone may be disabled with -inf/+inf.
struct StoppingRule {
  int component = -1;
  double low = 0.0;
  double high = std::numeric_limits<double>::infinity();
  bool enabled() const { return component >= 0; }
};

// Direct: Gillespie direct method with a species-sharing dependency graph.
// NextReaction: per-reaction exponential clocks in an indexed binary heap,
// redrawn from the new rate whenever a firing changes a reaction's inputs.
// Both are statistically exact; they consume the seed stream differently, so
// paths are reproducible per (seed, method) rather than across methods.
enum class SsaMethod { Direct, NextReaction };

struct SsaOptions {
  std::uint64_t max_events = 100'000'000;  // exceeding this is an error
  SsaMethod method = SsaMethod::Direct;
  StoppingRule stop;              // on normalized species values
  bool freeze_after_stop = true;  // pad the remaining grid rows
};

// Statistically exact continuous-time Markov chain path, recorded in
// normalized coordinates z_i = N^{-alpha_i} x_i against normalized time
// t = N^{-gamma} t_raw.  Byte-identical output for identical seeds.
Trajectory ssa_simulate(const ReactionNetwork& net, const ScalingSpec& scaling,
                        const std::vector<std::int64_t>& x0, double t_end,
                        std::uint64_t seed, const std::vector<double>& grid,
                        const SsaOptions& opts = {});

// Per-path output of `ssa_martingale`: the compensated slow increments and
// their corrector-adjusted difference, all scaled by r_N.
//   m1 = r_N [ V(t) - V(0) - int F^N(X(s)) ds ]        (slow functionals)
//   m2 = r_N [ H(X(t)) - H(X(0)) - int A_N H(X(s)) ds ]
// Between jumps the integrands are constant, so both integrals are exact.
struct MartingaleSample {
  Eigen::VectorXd m1;
  Eigen::VectorXd m2;
  Eigen::VectorXd slow_end;  // V(t_end)
  double corrector_sup = 0;  // sup_s r_N |H(X(s))|_inf, size-effect monitor
  std::uint64_t events = 0;
};

// Corrector functional in the bilinear form the fluctuation expansion
// produces:  H(z) = scale * weights(z) * (theta_coords . z),  where the
// weight matrix depends on z only through the counts of `key_species`.  The
// engine memoizes weights per key and applies the generator by exact
// differencing over reaction jumps.
struct BilinearCorrector {
  std::vector<std::size_t> coord_dirs;   // direction indices (rows of dec.T)
  std::vector<std::size_t> key_species;  // raw-count arguments of `weights`
  std::function<Eigen::MatrixXd(const Eigen::VectorXd& z)> weights;  // s0 x |coord_dirs|
  double scale = 1.0;                    // carries the N^{-m} prefactor
};

MartingaleSample ssa_martingale(const ReactionNetwork& net, const ScalingSpec& scaling,
                                const MultiscaleDecomposition& dec,
                                const BilinearCorrector& corrector, double r_N,
                                const std::vector<std::int64_t>& x0, double t_end,
                                std::uint64_t seed, std::uint64_t max_events = 400'000'000);

using VectorField = std::function<Eigen::VectorXd(double, const Eigen::VectorXd&)>;

// Classical RK4 with step-doubling error control (relative 1e-8); linear
// first integrals of `f` are preserved to roundoff.  Throws on blow-up
// (|v|_inf > 1e12) or non-finite state.
Trajectory ode_solve(const VectorField& f, const Eigen::VectorXd& v0, double t_end,
                     const std::vector<double>& grid,
                     const std::vector<std::string>& components = {});

// Ito SDE with coefficients that may depend on a companion ODE state:
//   dX = drift(t, X, C) dt + noise_scale * factor(t, X, C) dW,   C' = companion(C).
// The companion is advanced by RK4 within each Euler-Maruyama step, so both
// are produced in a single pass on a shared grid.
struct SdeSpec {
  std::function<Eigen::VectorXd(double, const Eigen::VectorXd& state,
                                const Eigen::VectorXd& companion)>
      drift;
  std::function<Eigen::MatrixXd(double, const Eigen::VectorXd& state,
                                const Eigen::VectorXd& companion)>
      noise_factor;
  double noise_scale = 1.0;
  VectorField companion_field;     // empty -> no companion
  Eigen::VectorXd companion_init;  // V0(0) when companion_field is set
};

enum class BoundaryPolicy {
  None,     // leave the state wherever the increments put it
  Reflect,  // clamp negative components to zero, counting each clamp
  Absorb,   // clamp to zero and stop when the stopping component hits `low`
};

struct SdeOptions {
  double dt = 0.0;  // 0 -> t_end / 2000
  BoundaryPolicy boundary = BoundaryPolicy::None;
  StoppingRule stop;
  bool freeze_after_stop = true;
  bool record_companion = false;  // append companion columns to the output
};

// Euler-Maruyama path; coefficients are frozen at the start of each step.
// Aborts on non-finite states.  `components` names the state columns.
Trajectory sde_simulate(const SdeSpec& sde, const Eigen::VectorXd& x0, double t_end,
                        std::uint64_t seed, const std::vector<double>& grid,
                        const SdeOptions& opts = {},
                        const std::vector<std::string>& components = {});

// Second-moment companion of the linear-noise process: along the companion
// path V0, integrates  Sigma' = J(V0) Sigma + Sigma J(V0)^T + G(V0),
// Sigma(0) = 0, with the same RK4 controller as ode_solve.  Sigma(t) stays
// symmetric positive semidefinite.
struct VariancePath {
  std::vector<double> times;
  std::vector<Eigen::MatrixXd> sigma;  // one matrix per grid time
  std::vector<Eigen::VectorXd> companion;
};

VariancePath variance_ode(const std::function<Eigen::MatrixXd(const Eigen::VectorXd&)>& jacobian,
                          const std::function<Eigen::MatrixXd(const Eigen::VectorXd&)>& gbar,
                          const VectorField& companion_field, const Eigen::VectorXd& v0,
                          double t_end, const std::vector<double>& grid);

// Simulates the frozen-coordinate limit process of one time-scale level: a
// Markov jump process, an ODE flow, or a piecewise-deterministic mix of the
// two.  Jump times use the exact integrated-intensity inversion (the
// cumulative rate is integrated with the flow and the crossing bracketed by
// bisection); affine rates make the integration exact to RK4 tolerance.
// `rate(k, z)` supplies the limiting propensity of reaction k at state z.
struct FastSimResult {
  Trajectory traj;
  Eigen::VectorXd time_avg;         // (1/T) int_{T/2}^{T} z dt, componentwise
  Eigen::MatrixXd time_avg_second;  // same average of z z^T
};

FastSimResult fast_subnetwork_simulate(
    const GeneratorDescription& gen,
    const std::function<double(std::size_t, const Eigen::VectorXd&)>& rate,
    const Eigen::VectorXd& z0, double t_end, std::uint64_t seed,
    const std::vector<double>& grid, const std::vector<std::string>& components = {},
    std::uint64_t max_events = 50'000'000);

}  // namespace msrn
