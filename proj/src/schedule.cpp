// SPDX-License-Identifier: Apache-2.0
#include "qeprop/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "qeprop/util.hpp"

namespace qeprop {

double NoiseSchedule::alpha_at(int t) const {
  if (t < 0 || t > T) throw std::out_of_range("alpha_at: t out of range");
  return alpha[static_cast<std::size_t>(t)];
}

NoiseSchedule make_linear_beta(int T, double beta_start, double beta_end) {
  if (T < 2) throw std::invalid_argument("make_linear_beta: T must be >= 2");
  if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0)) {
    throw std::invalid_argument(
        "make_linear_beta: need 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.T = T;
  s.beta.resize(T);
  for (int i = 0; i < T; ++i) {
    const double f = T == 1 ? 0.0 : static_cast<double>(i) / (T - 1);
    s.beta[i] = beta_start + f * (beta_end - beta_start);
  }
  s.alpha.resize(T + 1);
  s.alpha[0] = 1.0;
  for (int t = 1; t <= T; ++t) s.alpha[t] = s.alpha[t - 1] * (1.0 - s.beta[t - 1]);
  return s;
}

bool StepPlan::contains(int t) const {
  return std::binary_search(steps.rbegin(), steps.rend(), t);
}

int StepPlan::index_of(int t) const {
  for (int i = 0; i < n(); ++i) {
    if (steps[i] == t) return i;
  }
  throw std::out_of_range("StepPlan: timestep not in plan");
}

int StepPlan::below(int t) const {
  const int i = index_of(t);
  return i + 1 < n() ? steps[i + 1] : 0;
}

int StepPlan::above(int t) const {
  const int i = index_of(t);
  if (i == 0) throw std::out_of_range("StepPlan: no entry above trajectory start");
  return steps[i - 1];
}

bool StepPlan::has_above(int t) const { return index_of(t) > 0; }

StepPlan make_step_plan(const NoiseSchedule& s, int n_steps) {
  if (n_steps < 1 || n_steps > s.T) {
    throw std::invalid_argument("make_step_plan: n_steps out of range");
  }
  const int stride = s.T / n_steps;
  StepPlan plan;
  plan.steps.resize(n_steps);
  for (int i = 0; i < n_steps; ++i) plan.steps[i] = s.T - i * stride;
  return plan;
}

DdimCoeffs ddim_coeffs(const NoiseSchedule& s, int t, int t_prev) {
  if (t_prev < 0 || t_prev >= t || t > s.T) {
    throw std::out_of_range("ddim_coeffs: need 0 <= t_prev < t <= T");
  }
  const double at = s.alpha_at(t);
  const double ap = s.alpha_at(t_prev);
  DdimCoeffs c;
  c.a = std::sqrt(ap / at);
  c.B = std::sqrt(1.0 - ap) - std::sqrt(ap * (1.0 - at)) / std::sqrt(at);
  return c;
}

std::string schedule_fingerprint(const NoiseSchedule& s) {
  std::uint64_t h = fnv1a64("schedule", 8);
  h = fnv1a64_append(h, static_cast<std::uint64_t>(s.T));
  for (double b : s.beta) h = fnv1a64_append(h, b);
  return hex16(h);
}

std::string plan_fingerprint(const StepPlan& plan) {
  std::uint64_t h = fnv1a64("plan", 4);
  for (int t : plan.steps) h = fnv1a64_append(h, static_cast<std::uint64_t>(t));
  return hex16(h);
}

}  // namespace qeprop
