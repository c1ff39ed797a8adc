// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "qeprop/latent.hpp"
#include "qeprop/trajectory.hpp"

namespace qeprop {

// Per-state metric rows of `traj` against the FP reference from the same
// seed. Row i describes states[i]; eps/correction norms belong to the step
// that produced it (zero for row 0).
std::vector<MetricSample> per_step_metrics(const TrajectoryRecord& fp,
                                           const TrajectoryRecord& traj);

// CSV serialization with the comment header (tool version, config
// fingerprint, column schema). 17 significant digits, LF endings.
std::string metrics_csv_text(const std::vector<MetricSample>& rows,
                             const std::string& config_fp);

void write_text_file(const std::string& path, const std::string& text);
std::string read_text_file(const std::string& path);

struct ChartSeries {
  std::string label;
  std::vector<double> y;
};

// Self-contained SVG line chart (one polyline per series, shared linear
// axes). Used for the optional delta-norm plots.
std::string svg_line_chart(const std::vector<ChartSeries>& series,
                           const std::string& title);

}  // namespace qeprop
