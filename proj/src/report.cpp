// SPDX-License-Identifier: Apache-2.0
#include "qeprop/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "qeprop/util.hpp"
#include "qeprop/version.hpp"

namespace qeprop {

std::vector<MetricSample> per_step_metrics(const TrajectoryRecord& fp,
                                           const TrajectoryRecord& traj) {
  if (fp.plan.steps != traj.plan.steps) {
    throw std::invalid_argument("per_step_metrics: plans differ");
  }
  if (fp.states.size() != traj.states.size()) {
    throw std::invalid_argument("per_step_metrics: trajectory lengths differ");
  }
  const int n = traj.plan.n();
  std::vector<MetricSample> rows;
  rows.reserve(static_cast<std::size_t>(n) + 1);
  for (int i = 0; i <= n; ++i) {
    MetricSample row;
    row.step_index = i;
    row.t = i == n ? 0 : traj.plan.steps[static_cast<std::size_t>(i)];
    const Latent& ref = fp.states[static_cast<std::size_t>(i)];
    const Latent& got = traj.states[static_cast<std::size_t>(i)];
    row.mse = mse(ref, got);
    row.psnr = psnr_or_inf(ref, got);
    row.delta_norm = l2_norm(got - ref);
    if (i > 0) {
      row.eps_norm = l2_norm(traj.injected_eps[static_cast<std::size_t>(i - 1)]);
      row.correction_norm =
          l2_norm(traj.corrections[static_cast<std::size_t>(i - 1)]);
    }
    rows.push_back(row);
  }
  return rows;
}

std::string metrics_csv_text(const std::vector<MetricSample>& rows,
                             const std::string& config_fp) {
  std::string out;
  out += "# ";
  out += kToolName;
  out += " ";
  out += kToolVersion;
  out += "\n# config ";
  out += config_fp;
  out += "\n# columns: step_index,t,mse,psnr,delta_norm,eps_norm,correction_norm\n";
  out += "step_index,t,mse,psnr,delta_norm,eps_norm,correction_norm\n";
  for (const MetricSample& r : rows) {
    out += std::to_string(r.step_index);
    out += ",";
    out += std::to_string(r.t);
    out += ",";
    out += fmt17(r.mse);
    out += ",";
    out += fmt17(r.psnr);
    out += ",";
    out += fmt17(r.delta_norm);
    out += ",";
    out += fmt17(r.eps_norm);
    out += ",";
    out += fmt17(r.correction_norm);
    out += "\n";
  }
  return out;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw std::runtime_error("short write: " + path);
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for reading: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

namespace {

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                          "#ff7f0e", "#8c564b"};

std::string fmt2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

}  // namespace

std::string svg_line_chart(const std::vector<ChartSeries>& series,
                           const std::string& title) {
  const double w = 720.0, h = 440.0;
  const double left = 60.0, right = 20.0, top = 40.0, bottom = 40.0;
  const double pw = w - left - right, ph = h - top - bottom;

  double ymax = 0.0;
  std::size_t nmax = 2;
  for (const ChartSeries& s : series) {
    nmax = std::max(nmax, s.y.size());
    for (double v : s.y) {
      if (std::isfinite(v)) ymax = std::max(ymax, v);
    }
  }
  if (ymax <= 0.0) ymax = 1.0;

  std::string svg;
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt2(w) +
         "\" height=\"" + fmt2(h) + "\" viewBox=\"0 0 " + fmt2(w) + " " +
         fmt2(h) + "\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg += "<text x=\"" + fmt2(w / 2) +
         "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "font-size=\"16\">" + title + "</text>\n";
  svg += "<line x1=\"" + fmt2(left) + "\" y1=\"" + fmt2(top) + "\" x2=\"" +
         fmt2(left) + "\" y2=\"" + fmt2(top + ph) +
         "\" stroke=\"black\"/>\n";
  svg += "<line x1=\"" + fmt2(left) + "\" y1=\"" + fmt2(top + ph) +
         "\" x2=\"" + fmt2(left + pw) + "\" y2=\"" + fmt2(top + ph) +
         "\" stroke=\"black\"/>\n";
  svg += "<text x=\"" + fmt2(left - 8) + "\" y=\"" + fmt2(top + 4) +
         "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" +
         fmt17(ymax) + "</text>\n";
  svg += "<text x=\"" + fmt2(left - 8) + "\" y=\"" + fmt2(top + ph) +
         "\" text-anchor=\"end\" font-family=\"sans-serif\" "
         "font-size=\"11\">0</text>\n";

  for (std::size_t si = 0; si < series.size(); ++si) {
    const ChartSeries& s = series[si];
    if (s.y.size() < 2) continue;
    const char* color = kPalette[si % (sizeof kPalette / sizeof *kPalette)];
    std::string pts;
    for (std::size_t i = 0; i < s.y.size(); ++i) {
      const double x = left + pw * static_cast<double>(i) /
                                  static_cast<double>(s.y.size() - 1);
      double v = s.y[i];
      if (!std::isfinite(v)) v = 0.0;
      const double y = top + ph * (1.0 - std::min(v, ymax) / ymax);
      if (i) pts += " ";
      pts += fmt2(x) + "," + fmt2(y);
    }
    svg += "<polyline fill=\"none\" stroke=\"" + std::string(color) +
           "\" stroke-width=\"1.5\" points=\"" + pts + "\"/>\n";
    svg += "<text x=\"" + fmt2(left + pw - 4) + "\" y=\"" +
           fmt2(top + 16 + 16 * static_cast<double>(si)) +
           "\" text-anchor=\"end\" font-family=\"sans-serif\" "
           "font-size=\"12\" fill=\"" + color + "\">" + s.label +
           "</text>\n";
  }
  svg += "</svg>\n";
  return svg;
}

}  // namespace qeprop
