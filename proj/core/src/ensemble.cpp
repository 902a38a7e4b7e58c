#include "msrn/ensemble.hpp"

#include <atomic>
#include <cmath>
#include <cstddef>
#include <exception>
#include <stdexcept>
#include <thread>
#include <utility>

#include "msrn/errors.hpp"

namespace msrn {

namespace {

// Fixed accumulation block: runs [first, first + count) reduced by Welford's
// update.  Blocks are merged in index order whatever the worker schedule, so
// the final summary never depends on thread count or completion order.
constexpr std::size_t kBlock = 64;

struct BlockStats {
  std::size_t n = 0;  // trajectories included in mean/M2
  Eigen::MatrixXd mean;
  Eigen::MatrixXd m2;
  std::size_t failed = 0;
  std::size_t absorbed = 0;
  std::size_t escaped = 0;
  std::size_t stopped = 0;  // absorbed + escaped, kept for has_absorption
  std::size_t censored = 0;
  std::string failure_msg;

  void init(Eigen::Index rows, Eigen::Index cols) {
    mean = Eigen::MatrixXd::Zero(rows, cols);
    m2 = Eigen::MatrixXd::Zero(rows, cols);
  }
  void add(const Eigen::MatrixXd& x) {
    ++n;
    const Eigen::MatrixXd delta = x - mean;
    mean += delta / static_cast<double>(n);
    m2 += delta.cwiseProduct(x - mean);
  }
  // Chan's pairwise merge; exact for either side empty.
  void merge(const BlockStats& o) {
    failed += o.failed;
    absorbed += o.absorbed;
    escaped += o.escaped;
    stopped += o.stopped;
    censored += o.censored;
    if (!o.failure_msg.empty()) failure_msg = o.failure_msg;
    if (o.n == 0) return;
    if (n == 0) {
      n = o.n;
      mean = o.mean;
      m2 = o.m2;
      return;
    }
    const double na = static_cast<double>(n), nb = static_cast<double>(o.n);
    const Eigen::MatrixXd delta = o.mean - mean;
    mean += delta * (nb / (na + nb));
    m2 += o.m2 + delta.cwiseProduct(delta) * (na * nb / (na + nb));
    n += o.n;
  }
};

// Runs the sampler for every index in [0, runs), reducing each fixed block of
// indices with `consume(block, index, trajectory)`.  SimulationFailure is
// counted per block; any other exception aborts the whole ensemble.
template <class Consume>
std::vector<BlockStats> run_blocks(const TrajectorySampler& sample, std::size_t runs,
                                   int threads, Eigen::Index rows, Eigen::Index cols,
                                   const Consume& consume) {
  const std::size_t nblocks = (runs + kBlock - 1) / kBlock;
  std::vector<BlockStats> blocks(nblocks);
  for (auto& b : blocks) b.init(rows, cols);

  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::atomic<bool> abort{false};

  auto worker = [&] {
    for (;;) {
      const std::size_t bi = next.fetch_add(1);
      if (bi >= nblocks || abort.load()) return;
      BlockStats& b = blocks[bi];
      const std::size_t hi = std::min(runs, (bi + 1) * kBlock);
      for (std::size_t i = bi * kBlock; i < hi; ++i) {
        try {
          Trajectory tr = sample(i);
          consume(b, i, tr);
        } catch (const PipelineError& e) {
          if (e.code() != PipelineError::Code::SimulationFailure) throw;
          ++b.failed;
          b.failure_msg = e.what();
        } catch (...) {
          if (!abort.exchange(true)) error = std::current_exception();
          return;
        }
      }
    }
  };

  const std::size_t want =
      std::min<std::size_t>(std::max(threads, 1), std::max<std::size_t>(nblocks, 1));
  if (want <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(want);
    for (std::size_t w = 0; w < want; ++w) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (error) std::rethrow_exception(error);
  return blocks;
}

BlockStats merge_all(std::vector<BlockStats>&& blocks, Eigen::Index rows, Eigen::Index cols) {
  BlockStats total;
  total.init(rows, cols);
  for (const auto& b : blocks) total.merge(b);
  return total;
}

}  // namespace

EnsembleSummary run_ensemble(const TrajectorySampler& sample, std::size_t runs,
                             const std::vector<double>& grid,
                             const std::vector<std::string>& components,
                             const std::vector<double>& unit_scale, std::string method_name,
                             int threads, const TrajectoryFilter& include) {
  if (runs == 0) throw std::invalid_argument("ensemble needs at least one run");
  if (unit_scale.size() != components.size())
    throw std::invalid_argument("unit_scale size does not match component count");
  const auto rows = static_cast<Eigen::Index>(grid.size());
  const auto cols = static_cast<Eigen::Index>(components.size());

  auto consume = [&](BlockStats& b, std::size_t, const Trajectory& tr) {
    if (tr.times.size() != grid.size() || tr.states.cols() != cols)
      throw std::invalid_argument("trajectory grid does not match the ensemble grid");
    if (tr.absorbed) ++b.absorbed;
    if (tr.escaped) ++b.escaped;
    if (tr.absorbed || tr.escaped) ++b.stopped;
    if (include && !include(tr)) return;
    Eigen::MatrixXd scaled = tr.states;
    for (Eigen::Index c = 0; c < cols; ++c) scaled.col(c) *= unit_scale[c];
    b.add(scaled);
  };
  BlockStats total =
      merge_all(run_blocks(sample, runs, threads, rows, cols, consume), rows, cols);

  if (100 * total.failed > runs)
    throw PipelineError(PipelineError::Code::SimulationFailure,
                        "ensemble aborted: " + std::to_string(total.failed) + " of " +
                            std::to_string(runs) + " trajectories failed (last: " +
                            total.failure_msg + ")");

  EnsembleSummary out;
  out.method = std::move(method_name);
  out.runs = total.n;
  out.failed = total.failed;
  out.times = grid;
  out.components = components;
  out.mean = total.mean;
  if (total.n > 1)
    out.stddev = (total.m2 / static_cast<double>(total.n - 1)).cwiseSqrt();
  else
    out.stddev = Eigen::MatrixXd::Zero(rows, cols);
  out.se = out.stddev / std::sqrt(static_cast<double>(std::max<std::size_t>(total.n, 1)));
  out.has_absorption = total.stopped > 0;
  out.absorbed = total.absorbed;
  out.escaped = total.escaped;
  if (out.has_absorption) {
    const std::size_t sampled = runs - total.failed;  // all runs that completed
    const WilsonInterval ci = wilson_interval(total.absorbed, sampled ? sampled : 1);
    out.absorbed_fraction = ci.estimate;
    out.wilson_low = ci.low;
    out.wilson_high = ci.high;
  }
  return out;
}

WilsonInterval wilson_interval(std::size_t successes, std::size_t trials) {
  WilsonInterval w;
  if (trials == 0) return w;
  const double z = 1.959963984540054;  // 97.5% normal quantile
  const double n = static_cast<double>(trials);
  const double p = static_cast<double>(successes) / n;
  const double z2n = z * z / n;
  const double center = (p + z2n / 2.0) / (1.0 + z2n);
  const double half =
      (z / (1.0 + z2n)) * std::sqrt(p * (1.0 - p) / n + z2n / (4.0 * n));
  w.estimate = p;
  w.low = std::max(0.0, center - half);
  w.high = std::min(1.0, center + half);
  return w;
}

AbsorptionEstimate absorption_probability(const TrajectorySampler& sample, std::size_t runs,
                                          int threads) {
  if (runs == 0) throw std::invalid_argument("absorption estimate needs at least one run");
  auto consume = [&](BlockStats& b, std::size_t, const Trajectory& tr) {
    if (tr.absorbed)
      ++b.absorbed;
    else if (tr.escaped)
      ++b.escaped;
    else
      ++b.censored;
  };
  BlockStats total = merge_all(run_blocks(sample, runs, threads, 0, 0, consume), 0, 0);
  if (total.failed > 0)
    throw PipelineError(PipelineError::Code::SimulationFailure,
                        "absorption estimate aborted: " + std::to_string(total.failed) +
                            " trajectories failed (last: " + total.failure_msg + ")");
  AbsorptionEstimate est;
  est.runs = runs;
  est.absorbed = total.absorbed;
  est.escaped = total.escaped;
  est.censored = total.censored;
  est.ci = wilson_interval(total.absorbed, total.absorbed + total.escaped);
  return est;
}

ComparisonTable compare_report(const std::vector<EnsembleSummary>& summaries) {
  if (summaries.empty()) throw std::invalid_argument("nothing to compare");
  const EnsembleSummary& first = summaries.front();
  for (const auto& s : summaries) {
    if (s.times != first.times)
      throw std::invalid_argument("method '" + s.method +
                                  "' was summarized on a different time grid");
    if (s.components != first.components)
      throw std::invalid_argument("method '" + s.method +
                                  "' reports different components");
  }
  ComparisonTable table;
  table.times = first.times;
  table.components = first.components;
  table.methods = summaries;
  table.baseline = 0;
  for (std::size_t m = 0; m < summaries.size(); ++m)
    if (summaries[m].method == "ssa") {
      table.baseline = m;
      break;
    }
  const Eigen::MatrixXd& base = summaries[table.baseline].mean;
  table.max_rel_dev =
      Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(summaries.size()), base.cols());
  for (std::size_t m = 0; m < summaries.size(); ++m) {
    if (m == table.baseline) continue;
    for (Eigen::Index c = 0; c < base.cols(); ++c) {
      const double num = (summaries[m].mean.col(c) - base.col(c)).cwiseAbs().maxCoeff();
      const double den = base.col(c).cwiseAbs().maxCoeff();
      table.max_rel_dev(static_cast<Eigen::Index>(m), c) =
          den > 0.0 ? num / den
                    : (num > 0.0 ? std::numeric_limits<double>::infinity() : 0.0);
    }
  }
  return table;
}

}  // namespace msrn
