// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

namespace qeprop {

// Forward noise schedule. alpha holds the cumulative signal-retention
// products with the convention alpha[0] = 1, so coefficients stay well-formed
// on the final step of any plan.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;   // beta[i] = beta_{i+1}, size T
  std::vector<double> alpha;  // alpha[t], size T+1, strictly decreasing for t>=1

  double alpha_at(int t) const;
};

NoiseSchedule make_linear_beta(int T, double beta_start, double beta_end);

// The decreasing subsequence of timesteps actually executed. Each executed
// step t lands on the next smaller entry (or on 0 for the last one).
struct StepPlan {
  std::vector<int> steps;

  int n() const { return static_cast<int>(steps.size()); }
  bool contains(int t) const;
  int index_of(int t) const;  // throws if absent

  // Next smaller planned timestep; 0 when t is the last entry.
  int below(int t) const;
  // Next larger planned entry; throws when t is the first entry.
  int above(int t) const;
  bool has_above(int t) const;
};

StepPlan make_step_plan(const NoiseSchedule& s, int n_steps);

struct DdimCoeffs {
  double a = 0.0;  // sqrt(alpha_prev / alpha_t)
  double B = 0.0;  // sqrt(1 - alpha_prev) - sqrt(alpha_prev (1 - alpha_t)) / sqrt(alpha_t)
};

// t_prev is the landing timestep of the step; 0 is allowed (alpha[0] = 1).
DdimCoeffs ddim_coeffs(const NoiseSchedule& s, int t, int t_prev);

std::string schedule_fingerprint(const NoiseSchedule& s);
std::string plan_fingerprint(const StepPlan& plan);

}  // namespace qeprop
