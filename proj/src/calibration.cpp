// SPDX-License-Identifier: Apache-2.0
#include "qeprop/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "qeprop/util.hpp"

namespace qeprop {

int ScalingMatrix::row_of(int t) const {
  for (std::size_t i = 0; i < ts.size(); ++i) {
    if (ts[i] == t) return static_cast<int>(i);
  }
  throw std::out_of_range("ScalingMatrix: no row for timestep " +
                          std::to_string(t));
}

CalibrationCache collect_cache(const Denoiser& fp, const ErrorModel& model,
                               int n_samples, const StepPlan& plan,
                               const NoiseSchedule& s, std::uint64_t seed) {
  if (n_samples < 1) {
    throw std::invalid_argument("collect_cache: n_samples must be >= 1");
  }
  CalibrationCache cache;
  cache.ts = plan.steps;
  cache.channels = fp.channels();
  cache.height = fp.height();
  cache.width = fp.width();
  cache.pairs.assign(plan.steps.size(), {});
  for (auto& v : cache.pairs) v.reserve(static_cast<std::size_t>(n_samples));

  for (int sample = 0; sample < n_samples; ++sample) {
    const std::uint64_t sseed =
        derive_seed("calib", seed, static_cast<std::uint64_t>(sample));
    Rng start(derive_seed("xT", sseed));
    Latent x = normal_latent(start, cache.channels, cache.height, cache.width);
    for (std::size_t i = 0; i < plan.steps.size(); ++i) {
      const int t = plan.steps[i];
      ModelEval ev = apply_error_model(model, fp, x, t, s, sseed);
      const DdimCoeffs d = ddim_coeffs(s, t, plan.below(t));
      Latent next(cache.channels, cache.height, cache.width);
      for (std::size_t j = 0; j < next.size(); ++j) {
        next[j] = d.a * x[j] + d.B * ev.mu_tilde[j];
      }
      cache.pairs[i].push_back(std::move(ev));
      x = std::move(next);
    }
  }
  return cache;
}

RidgeStats ridge_stats(const CalibrationCache& cache, int row, int channel) {
  const int hw = cache.height * cache.width;
  RidgeStats st;
  for (const ModelEval& ev : cache.pairs[static_cast<std::size_t>(row)]) {
    const std::size_t base = static_cast<std::size_t>(channel) * hw;
    for (int i = 0; i < hw; ++i) {
      const double mt = ev.mu_tilde[base + static_cast<std::size_t>(i)];
      const double mu = ev.mu[base + static_cast<std::size_t>(i)];
      st.d += mt * mt;
      st.p += mu * mt;
      st.m += mu * mu;
    }
  }
  return st;
}

double ridge_objective(const RidgeStats& st, double lambda1, double k) {
  const double r = 1.0 - k;
  return r * r * st.d - 2.0 * r * st.p + st.m + (lambda1 + kRidgeGamma) * k * k;
}

double golden_section_min(const RidgeStats& st, double lambda1, double lo,
                          double hi, int iters) {
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = lo, b = hi;
  double c = b - inv_phi * (b - a);
  double d = a + inv_phi * (b - a);
  double fc = ridge_objective(st, lambda1, c);
  double fd = ridge_objective(st, lambda1, d);
  for (int i = 0; i < iters; ++i) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - inv_phi * (b - a);
      fc = ridge_objective(st, lambda1, c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + inv_phi * (b - a);
      fd = ridge_objective(st, lambda1, d);
    }
  }
  return (a + b) / 2.0;
}

double orthogonality_residual(const RidgeStats& st, double k) {
  return (st.d - st.p) - k * st.d;
}

double stationarity_residual(const RidgeStats& st, double lambda1, double k) {
  return (st.d - st.p) - k * (st.d + lambda1 + kRidgeGamma);
}

ScalingMatrix solve_k(const CalibrationCache& cache, double lambda1) {
  if (lambda1 < 0.0) {
    throw std::invalid_argument("solve_k: lambda1 must be >= 0");
  }
  ScalingMatrix k;
  k.ts = cache.ts;
  k.channels = cache.channels;
  k.lambda1 = lambda1;
  k.gamma = kRidgeGamma;
  k.values.assign(cache.ts.size() * static_cast<std::size_t>(cache.channels),
                  0.0);
  for (std::size_t r = 0; r < cache.ts.size(); ++r) {
    for (int c = 0; c < cache.channels; ++c) {
      const RidgeStats st = ridge_stats(cache, static_cast<int>(r), c);
      k.values[r * cache.channels + static_cast<std::size_t>(c)] =
          (st.d - st.p) / (st.d + lambda1 + kRidgeGamma);
    }
  }
  return k;
}

double lambda_empirical(const CalibrationCache& cache) {
  double sum_mt2 = 0.0, sum_mu = 0.0, sum_mu2 = 0.0;
  std::size_t count = 0;
  for (const auto& step_pairs : cache.pairs) {
    for (const ModelEval& ev : step_pairs) {
      for (std::size_t i = 0; i < ev.mu.size(); ++i) {
        sum_mt2 += ev.mu_tilde[i] * ev.mu_tilde[i];
        sum_mu += ev.mu[i];
        sum_mu2 += ev.mu[i] * ev.mu[i];
        ++count;
      }
    }
  }
  if (count == 0) throw std::domain_error("lambda_empirical: empty cache");
  const double n = static_cast<double>(count);
  const double mean_mt2 = sum_mt2 / n;
  const double var_mu = sum_mu2 / n - (sum_mu / n) * (sum_mu / n);
  if (var_mu <= 0.0) {
    throw std::domain_error("lambda_empirical: constant mu across the cache");
  }
  return 0.01 * mean_mt2 / var_mu;
}

namespace {

CalibrationCache slice_cache(const CalibrationCache& cache, int from, int to) {
  CalibrationCache out;
  out.ts = cache.ts;
  out.channels = cache.channels;
  out.height = cache.height;
  out.width = cache.width;
  out.pairs.resize(cache.pairs.size());
  for (std::size_t i = 0; i < cache.pairs.size(); ++i) {
    out.pairs[i].assign(cache.pairs[i].begin() + from,
                        cache.pairs[i].begin() + to);
  }
  return out;
}

double holdout_score(const CalibrationCache& holdout, const ScalingMatrix& k) {
  double score = 0.0;
  const int hw = holdout.height * holdout.width;
  for (std::size_t r = 0; r < holdout.ts.size(); ++r) {
    for (const ModelEval& ev : holdout.pairs[r]) {
      for (int c = 0; c < holdout.channels; ++c) {
        const double kc = k.at(static_cast<int>(r), c);
        const std::size_t base = static_cast<std::size_t>(c) * hw;
        for (int i = 0; i < hw; ++i) {
          const double resid = (1.0 - kc) * ev.mu_tilde[base + i] - ev.mu[base + i];
          score += resid * resid;
        }
      }
    }
  }
  return score;
}

}  // namespace

std::pair<double, std::vector<GridScore>> grid_search_lambda(
    const CalibrationCache& cache, std::span<const double> grid,
    double holdout_fraction) {
  if (grid.empty()) {
    throw std::invalid_argument("grid_search_lambda: empty grid");
  }
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) {
    throw std::invalid_argument(
        "grid_search_lambda: holdout_fraction must be in (0, 1)");
  }
  const int n = cache.samples();
  if (n < 2) {
    throw std::invalid_argument("grid_search_lambda: needs at least 2 samples");
  }
  int n_hold = static_cast<int>(static_cast<double>(n) * holdout_fraction);
  n_hold = std::max(1, std::min(n_hold, n - 1));
  const int n_fit = n - n_hold;

  const CalibrationCache fit = slice_cache(cache, 0, n_fit);
  const CalibrationCache hold = slice_cache(cache, n_fit, n);

  std::vector<double> candidates(grid.begin(), grid.end());
  std::sort(candidates.begin(), candidates.end());
  candidates.erase(std::unique(candidates.begin(), candidates.end()),
                   candidates.end());

  std::vector<GridScore> table;
  table.reserve(candidates.size());
  double best_lambda = candidates.front();
  double best_score = 0.0;
  bool first = true;
  for (double lam : candidates) {
    if (lam < 0.0) {
      throw std::invalid_argument("grid_search_lambda: negative lambda1");
    }
    const ScalingMatrix k = solve_k(fit, lam);
    const double score = holdout_score(hold, k);
    table.push_back({lam, score});
    // candidates are ascending, so <= keeps the larger lambda on ties
    if (first || score <= best_score) {
      best_score = score;
      best_lambda = lam;
      first = false;
    }
  }
  return {best_lambda, table};
}

Latent estimate_eps(const ScalingMatrix& k, const Latent& mu_q, int t) {
  const int row = k.row_of(t);
  if (mu_q.channels() != k.channels) {
    throw std::invalid_argument("estimate_eps: channel count mismatch");
  }
  Latent eps(mu_q.channels(), mu_q.height(), mu_q.width());
  const int hw = mu_q.height() * mu_q.width();
  for (int c = 0; c < mu_q.channels(); ++c) {
    const double kc = k.at(row, c);
    const std::size_t base = static_cast<std::size_t>(c) * hw;
    for (int i = 0; i < hw; ++i) {
      eps[base + static_cast<std::size_t>(i)] =
          kc * mu_q[base + static_cast<std::size_t>(i)];
    }
  }
  return eps;
}

void write_k_file(const ScalingMatrix& k, const std::string& path) {
  if (k.ts.empty() || k.channels <= 0) {
    throw std::invalid_argument("write_k_file: empty scaling matrix");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("write_k_file: cannot open " + path);
  out << "# scaling matrix, one row per planned timestep\n";
  out << "version = 1\n";
  out << "rows = " << k.ts.size() << "\n";
  out << "channels = " << k.channels << "\n";
  out << "lambda1 = " << fmt17(k.lambda1) << "\n";
  out << "gamma = " << fmt17(k.gamma) << "\n";
  out << "schedule_fp = " << k.schedule_fp << "\n";
  out << "plan_fp = " << k.plan_fp << "\n";
  for (std::size_t r = 0; r < k.ts.size(); ++r) {
    out << k.ts[r] << ":";
    for (int c = 0; c < k.channels; ++c) {
      out << " " << fmt17(k.at(static_cast<int>(r), c));
    }
    out << "\n";
  }
  if (!out) throw ConfigError("write_k_file: write failed for " + path);
}

ScalingMatrix read_k_file(const std::string& path,
                          const std::string& expect_schedule_fp,
                          const std::string& expect_plan_fp) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("read_k_file: cannot open " + path);

  ScalingMatrix k;
  int version = -1;
  std::size_t rows = 0;
  bool have_rows = false;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;

    const auto eq = line.find('=');
    const auto colon = line.find(':');
    if (eq != std::string::npos && (colon == std::string::npos || eq < colon)) {
      std::string key = line.substr(0, eq);
      std::string val = line.substr(eq + 1);
      auto trim = [](std::string& s) {
        const auto b = s.find_first_not_of(" \t");
        const auto e = s.find_last_not_of(" \t");
        s = (b == std::string::npos) ? "" : s.substr(b, e - b + 1);
      };
      trim(key);
      trim(val);
      try {
        if (key == "version") {
          version = std::stoi(val);
        } else if (key == "rows") {
          rows = static_cast<std::size_t>(std::stoul(val));
          have_rows = true;
        } else if (key == "channels") {
          k.channels = std::stoi(val);
        } else if (key == "lambda1") {
          k.lambda1 = std::stod(val);
        } else if (key == "gamma") {
          k.gamma = std::stod(val);
        } else if (key == "schedule_fp") {
          k.schedule_fp = val;
        } else if (key == "plan_fp") {
          k.plan_fp = val;
        } else {
          throw ConfigError("read_k_file: unknown header key '" + key + "'");
        }
      } catch (const ConfigError&) {
        throw;
      } catch (const std::exception&) {
        throw ConfigError("read_k_file: bad value for key '" + key + "'");
      }
      continue;
    }

    if (colon == std::string::npos) {
      throw ConfigError("read_k_file: unparseable line '" + line + "'");
    }
    int t = 0;
    try {
      t = std::stoi(line.substr(0, colon));
    } catch (const std::exception&) {
      throw ConfigError("read_k_file: bad timestep in '" + line + "'");
    }
    std::istringstream vals(line.substr(colon + 1));
    std::vector<double> row;
    double v = 0.0;
    while (vals >> v) row.push_back(v);
    if (k.channels <= 0 || static_cast<int>(row.size()) != k.channels) {
      throw ConfigError("read_k_file: row width mismatch at t=" +
                        std::to_string(t));
    }
    k.ts.push_back(t);
    k.values.insert(k.values.end(), row.begin(), row.end());
  }

  if (version != 1) throw ConfigError("read_k_file: unsupported version");
  if (!have_rows || k.ts.size() != rows) {
    throw ConfigError("read_k_file: row count mismatch");
  }
  if (!expect_schedule_fp.empty() && k.schedule_fp != expect_schedule_fp) {
    throw ConfigError("read_k_file: schedule fingerprint mismatch");
  }
  if (!expect_plan_fp.empty() && k.plan_fp != expect_plan_fp) {
    throw ConfigError("read_k_file: step plan fingerprint mismatch");
  }
  for (double v : k.values) {
    if (!std::isfinite(v)) throw ConfigError("read_k_file: non-finite entry");
  }
  return k;
}

}  // namespace qeprop
