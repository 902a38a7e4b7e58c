#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "msrn/averaging.hpp"
#include "msrn/ensemble.hpp"
#include "msrn/network.hpp"
#include "msrn/poisson.hpp"
#include "msrn/simulate.hpp"
#include "msrn/subspaces.hpp"

namespace msrn {

// Result of the full structural pipeline: scale classification, subspace
// decomposition, averaged slow dynamics, and the fluctuation correction
// model.  The engines hold pointers into `dec`, so everything lives behind
// stable heap storage and the struct is move-only.
struct NetworkAnalysis {
  std::unique_ptr<MultiscaleDecomposition> dec;
  std::unique_ptr<AveragingEngine> avg;
  std::unique_ptr<CorrectionModel> cor;
  bool gamma_adjusted = false;  // true when the time exponent was re-derived
  Rational gamma_input;
  Rational gamma_used;

  const ReactionNetwork& network() const { return dec->net; }
  const ScalingSpec& scaling() const { return dec->scaling; }
  double N() const { return static_cast<double>(dec->scaling.N); }
  // fluctuation scale r_N = N^p
  double r() const { return cor->r(N()); }
  std::vector<std::string> species_names() const;
  std::vector<std::int64_t> initial_counts() const;
};

// Runs classification, decomposition, averaging and correction.  When the
// given time exponent leaves residual drift on the slow level, the exponent
// is re-derived (gamma* = gamma - m0) and the pipeline reruns with it,
// recording the adjustment.
NetworkAnalysis analyze_network(const ReactionNetwork& net, const ScalingSpec& scaling);

// ---------------------------------------------------------------------------
// Simulation facades.  Every facade reports normalized species columns on the
// given grid, so outputs are directly comparable with ssa_simulate: slow
// species follow the reduced model's law; faster species are displayed at
// their conditional-equilibrium mean given the slow state (the reduced models
// carry no law for their fluctuations).

// Deterministic limit: integrates the averaged slow drift.
Trajectory ode_limit(const NetworkAnalysis& an, double t_end,
                     const std::vector<double>& grid);

struct GaussianOptions {
  double dt = 0.0;  // Euler-Maruyama step; 0 -> t_end / 2000
};

// Linear-noise path V0 + r_N^{-1} U: the fluctuation SDE
//   dU = [dF(V0) U + G0(V0) + G1(V0)] dt + sigma(V0) dW
// is integrated along the co-integrated limit path V0.
Trajectory lna_simulate(const NetworkAnalysis& an, double t_end, std::uint64_t seed,
                        const std::vector<double>& grid, const GaussianOptions& opts = {});

struct DiffusionOptions {
  double dt = 0.0;
  // Stopping on a normalized species value; the species must itself be a slow
  // coordinate.  When enabled the path absorbs at the boundary, otherwise
  // negative excursions reflect to zero (counted on the trajectory).
  StoppingRule stop;
  bool freeze_after_stop = true;
};

// Langevin model on the slow coordinates:
//   dZ = [F(Z) + r_N^{-1} (G0 + G1)(Z)] dt + r_N^{-1} sigma(Z) dW.
Trajectory diffusion_simulate(const NetworkAnalysis& an, double t_end, std::uint64_t seed,
                              const std::vector<double>& grid,
                              const DiffusionOptions& opts = {});

// Limit process of the fastest level with all slower coordinates frozen at
// their initial values; `time_avg` holds ergodic averages over [T/2, T].
FastSimResult fast_limit_simulate(const NetworkAnalysis& an, double t_end,
                                  std::uint64_t seed, const std::vector<double>& grid);

// Analytic one-standard-deviation band of the linear-noise approximation:
// grid x species matrix of r_N^{-1} sqrt((Theta^T Sigma Theta)_ii) along the
// limit path, directly comparable to the ensemble stddev of lna_simulate.
Eigen::MatrixXd lna_analytic_std(const NetworkAnalysis& an, double t_end,
                                 const std::vector<double>& grid);

// ---------------------------------------------------------------------------
// Martingale harness: the compensated slow increment m1 and the corrector
// compensation m2, both scaled by r_N, converge to a centered Gaussian with
// covariance  int_0^t Gbar(V0(s)) ds.

// Assembles the bilinear corrector H = N^{-m1} W(v) (theta . z) from the
// correction model; supported for networks with a single fast level.
BilinearCorrector martingale_corrector(const NetworkAnalysis& an);

MartingaleSample run_martingale(const NetworkAnalysis& an, double t_end,
                                std::uint64_t seed,
                                std::uint64_t max_events = 400'000'000);

// Covariance of the Gaussian limit at t_end (slow-block matrix).
Eigen::MatrixXd martingale_limit_variance(const NetworkAnalysis& an, double t_end);

// ---------------------------------------------------------------------------
// Ensemble plumbing.

// Raw-count display scale N^{alpha_i} per species (normalized scale is all
// ones).
std::vector<double> raw_unit_scale(const NetworkAnalysis& an);

// Count-exact stopping rule for SSA paths: absorbed when the species' raw
// count is <= low_raw, escaped when >= high_raw.  Bounds sit half a count
// away from the nearest integer, so the floating-point comparison is exact.
StoppingRule count_stopping(const NetworkAnalysis& an, std::size_t species,
                            std::int64_t low_raw, std::int64_t high_raw);

// Per-run samplers for run_ensemble / absorption_probability.  The analysis
// must outlive the sampler; run seeds derive from (master_seed, run index).
TrajectorySampler ssa_sampler(const NetworkAnalysis& an, double t_end,
                              std::vector<double> grid, std::uint64_t master_seed,
                              SsaOptions opts = {});
TrajectorySampler ode_sampler(const NetworkAnalysis& an, double t_end,
                              std::vector<double> grid);
TrajectorySampler lna_sampler(const NetworkAnalysis& an, double t_end,
                              std::vector<double> grid, std::uint64_t master_seed,
                              GaussianOptions opts = {});
TrajectorySampler diffusion_sampler(const NetworkAnalysis& an, double t_end,
                                    std::vector<double> grid, std::uint64_t master_seed,
                                    DiffusionOptions opts = {});

}  // namespace msrn
