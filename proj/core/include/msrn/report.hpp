#pragma once

#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "msrn/ensemble.hpp"
#include "msrn/pipeline.hpp"

namespace msrn {

// Human-readable structural report: exponent table, level classification,
// bases and projections, averaged drift / Jacobian / diffusion samples along
// the slow segment, the fluctuation exponent selection, and the correction
// term ledger.
std::string analysis_report(const NetworkAnalysis& an);

// ---------------------------------------------------------------------------
// CSV serialization.  All reals use the shortest round-trip decimal form.

// Header `t,<c1>,<c2>,...`, one row per grid time.
std::string trajectory_csv(const Trajectory& t);

// Header `t,mean_<c>,std_<c>,se_<c>,...` per component; when an analytic
// band is supplied (grid x components), `astd_<c>` columns follow.
std::string summary_csv(const EnsembleSummary& s,
                        const Eigen::MatrixXd* analytic_std = nullptr);

// Method-suffixed mean/std columns on the shared grid, then a comment footer
// with each method's max relative deviation from the baseline.
std::string comparison_csv(const ComparisonTable& t);

// `key,value` lines for an absorption estimate.
std::string absorption_csv(const AbsorptionEstimate& est);

// ---------------------------------------------------------------------------
// SVG line plots (self-contained: inline styling only).

struct PlotSeries {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
  std::vector<double> band;  // optional +/- half-width around y (same length)
};

std::string render_svg(const std::string& title, const std::string& x_label,
                       const std::string& y_label, const std::vector<PlotSeries>& series);

// Renders a CSV produced by the trajectory/summary/comparison writers,
// picking mean lines and std bands from the header names.
std::string render_csv_svg(const std::string& title, const std::string& csv_text);

// ---------------------------------------------------------------------------
// Artifacts.

// Hash of the content in git blob form: sha1("blob <size>\0" + content), hex.
std::string git_blob_hash(const std::string& content);

// Writes via a temporary file in the same directory plus an atomic rename.
// Throws std::runtime_error on I/O failure.
void write_file_atomic(const std::string& path, const std::string& content);

}  // namespace msrn
