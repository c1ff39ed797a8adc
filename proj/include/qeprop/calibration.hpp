// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "qeprop/denoiser.hpp"
#include "qeprop/latent.hpp"
#include "qeprop/quantizer.hpp"
#include "qeprop/schedule.hpp"

namespace qeprop {

// Paired (full-precision, quantized) denoiser outputs recorded along the
// quantized trajectories. pairs[step][sample] keeps plan order in the outer
// index and sample order in the inner one.
struct CalibrationCache {
  std::vector<int> ts;  // plan order
  std::vector<std::vector<ModelEval>> pairs;
  int channels = 0;
  int height = 0;
  int width = 0;

  int samples() const {
    return pairs.empty() ? 0 : static_cast<int>(pairs.front().size());
  }
};

// Per-timestep, per-channel compensation coefficients plus the ridge
// metadata they were solved with.
struct ScalingMatrix {
  std::vector<int> ts;  // plan order
  int channels = 0;
  std::vector<double> values;  // ts.size() x channels, row-major
  double lambda1 = 0.0;
  double gamma = 1e-8;
  std::string schedule_fp;
  std::string plan_fp;

  double at(int row, int c) const {
    return values[static_cast<std::size_t>(row) * channels + c];
  }
  int row_of(int t) const;  // throws on missing timestep
};

inline constexpr double kRidgeGamma = 1e-8;

// Runs the quantized sampler from n_samples seeded starts and records, at
// every planned step, the FP and quantized outputs evaluated on the same
// quantized-trajectory state.
CalibrationCache collect_cache(const Denoiser& fp, const ErrorModel& model,
                               int n_samples, const StepPlan& plan,
                               const NoiseSchedule& s, std::uint64_t seed);

// Closed-form ridge solution, pooled over spatial positions and samples:
//   K_{t,i} = sum(mu_tilde^2 - mu mu_tilde) / (sum(mu_tilde^2) + lambda1 + gamma)
ScalingMatrix solve_k(const CalibrationCache& cache, double lambda1);

// Empirical rule 0.01 * mean(mu_tilde^2) / var(mu), pooled over the cache.
double lambda_empirical(const CalibrationCache& cache);

struct GridScore {
  double lambda1 = 0.0;
  double holdout_score = 0.0;
};

// Splits samples deterministically (holdout = trailing fraction), fits on the
// rest, scores sum ||(1 - K) mu_tilde - mu||^2 on the holdout. Ties go to the
// larger lambda1.
std::pair<double, std::vector<GridScore>> grid_search_lambda(
    const CalibrationCache& cache, std::span<const double> grid,
    double holdout_fraction);

// eps_hat = K_t (.) mu_tilde with the channel coefficient broadcast over HxW.
Latent estimate_eps(const ScalingMatrix& k, const Latent& mu_q, int t);

// Sufficient statistics of one (timestep, channel) ridge problem, pooled over
// samples and spatial positions. Lets the verification suite minimize the
// scalar objective numerically without touching the closed form.
struct RidgeStats {
  double d = 0.0;  // sum mu_tilde^2
  double p = 0.0;  // sum mu * mu_tilde
  double m = 0.0;  // sum mu^2
};

RidgeStats ridge_stats(const CalibrationCache& cache, int row, int channel);

// sum((1 - k) mu_tilde - mu)^2 + (lambda1 + gamma) k^2
double ridge_objective(const RidgeStats& st, double lambda1, double k);

// Golden-section search over [lo, hi]; the objective is strictly convex.
double golden_section_min(const RidgeStats& st, double lambda1, double lo,
                          double hi, int iters = 200);

// sum[(1 - k) mu_tilde - mu] * mu_tilde, zero for plain least squares.
double orthogonality_residual(const RidgeStats& st, double k);

// Derivative condition of the objective actually minimized (includes the
// gamma guard); exactly zero at the closed form up to rounding.
double stationarity_residual(const RidgeStats& st, double lambda1, double k);

// Versioned structured-text round trip. Reading validates version and, when
// expected fingerprints are supplied, schedule/plan identity.
void write_k_file(const ScalingMatrix& k, const std::string& path);
ScalingMatrix read_k_file(const std::string& path,
                          const std::string& expect_schedule_fp = "",
                          const std::string& expect_plan_fp = "");

}  // namespace qeprop
