#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "msrn/simulate.hpp"

namespace msrn {

// Per-grid-point ensemble statistics for one simulation method.  All matrices
// are grid-rows by component-columns; `se` is std/sqrt(runs).  Absorption
// counters are populated whenever any trajectory reports hitting a stopping
// boundary.
struct EnsembleSummary {
  std::string method;
  std::size_t runs = 0;    // trajectories accumulated
  std::size_t failed = 0;  // trajectories that raised SimulationFailure
  std::vector<double> times;
  std::vector<std::string> components;
  Eigen::MatrixXd mean;
  Eigen::MatrixXd stddev;
  Eigen::MatrixXd se;

  bool has_absorption = false;  // any run hit a stopping boundary
  std::size_t absorbed = 0;     // hit the lower boundary
  std::size_t escaped = 0;      // hit the upper boundary
  double absorbed_fraction = 0.0;
  double wilson_low = 0.0;
  double wilson_high = 1.0;
};

// Draws one trajectory for the run with the given index; the callee derives
// its RNG stream from (master seed, index) so results are schedule-independent.
using TrajectorySampler = std::function<Trajectory(std::uint64_t run_index)>;

// Decides whether a trajectory enters the mean/std statistics (absorption
// counters always see every run).  Used to average over surviving paths only.
using TrajectoryFilter = std::function<bool(const Trajectory&)>;

// Runs `runs` trajectories and accumulates single-pass mean/variance.
// Accumulation is blocked in fixed-size chunks merged in index order, so the
// summary is bit-identical for any worker count.  `unit_scale` multiplies each
// component column (raw-count display scale vs normalized).  Trajectories
// whose sampler throws PipelineError(SimulationFailure) are counted in
// `failed`; more than 1% failures aborts with the last failure message.
// `runs` in the result is the number of trajectories the statistics saw
// (excluded ones reduce it).
EnsembleSummary run_ensemble(const TrajectorySampler& sample, std::size_t runs,
                             const std::vector<double>& grid,
                             const std::vector<std::string>& components,
                             const std::vector<double>& unit_scale, std::string method_name,
                             int threads = 1, const TrajectoryFilter& include = {});

// Wilson 95% score interval for a binomial proportion.
struct WilsonInterval {
  double estimate = 0.0;
  double low = 0.0;
  double high = 1.0;
};
WilsonInterval wilson_interval(std::size_t successes, std::size_t trials);

// Fraction of runs absorbed at the lower stopping boundary before reaching
// the upper one.  Trajectories that end without hitting either boundary are
// censored: counted and reported, excluded from the estimate's denominator.
struct AbsorptionEstimate {
  std::size_t runs = 0;
  std::size_t absorbed = 0;
  std::size_t escaped = 0;
  std::size_t censored = 0;
  WilsonInterval ci;  // over decided (non-censored) runs
};
AbsorptionEstimate absorption_probability(const TrajectorySampler& sample, std::size_t runs,
                                          int threads = 1);

// Side-by-side view of several summaries on one grid.  `max_rel_dev(m, c)` is
// sup_t |mean_m - mean_base| / sup_t |mean_base| per component, measured
// against the baseline summary (the first one named "ssa", else the first),
// and zero for the baseline itself.  Throws std::invalid_argument when grids
// or component sets differ.
struct ComparisonTable {
  std::vector<double> times;
  std::vector<std::string> components;
  std::vector<EnsembleSummary> methods;
  std::size_t baseline = 0;
  Eigen::MatrixXd max_rel_dev;  // methods x components
};
ComparisonTable compare_report(const std::vector<EnsembleSummary>& summaries);

}  // namespace msrn
