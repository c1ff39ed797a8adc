// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <vector>

#include "qeprop/denoiser.hpp"
#include "qeprop/latent.hpp"
#include "qeprop/schedule.hpp"
#include "qeprop/trajectory.hpp"

namespace qeprop {

// Weight convention for the closed-form cumulative error. The two modes are
// exact reciprocals of each other; all correction paths default to recursion,
// which is what unrolling the one-step propagation actually produces.
enum class WeightMode { paper, recursion };

// One-step propagation delta_prev = A delta + B eps. A is the scalar
// a = sqrt(alpha_prev / alpha_t) by default, and the dense a I + B J when a
// Jacobian estimate is supplied.
struct PropagationCoeffs {
  int t = 0;
  int t_prev = 0;
  double a = 0.0;
  double B = 0.0;
  bool has_matrix = false;
  int dim = 0;
  std::vector<double> A;  // row-major dim x dim, filled when has_matrix

  Latent apply(const Latent& v) const;
};

PropagationCoeffs prop_coeffs(const NoiseSchedule& s, int t, int t_prev,
                              const JacobianEstimate* jacobian = nullptr);

// Closed-form weight multiplying B_k eps_k in delta at the state below t,
// telescoped over the executed steps from t up to k:
//   paper:     sqrt(alpha_below(k)) / sqrt(alpha_below(t))
//   recursion: sqrt(alpha_below(t)) / sqrt(alpha_below(k))
// k == t is the empty product and returns exactly 1 in both modes.
double telescoped_product(const NoiseSchedule& s, const StepPlan& plan, int t,
                          int k, WeightMode mode);

// Per-state error log of a paired (full-precision, quantized) run. One record
// per state; the record at plan entry t carries the eps injected by the step
// leaving t, and the final record (t = 0) carries a zero eps.
struct StepErrorRecord {
  int t = 0;
  Latent eps;
  Latent delta_measured;
  Latent delta_predicted;
};

// delta at state t as the weighted sum over injections at plan steps k > t.
// Summation runs serially in plan order (largest k first). delta at the
// start state is zero by construction.
Latent cumulative_error_closed_form(
    const std::vector<StepErrorRecord>& records, const NoiseSchedule& s,
    const StepPlan& plan, int t, WeightMode mode);

// x~_t - x_t at state t for two trajectories sharing plan and start state.
Latent measure_delta(const TrajectoryRecord& traj_fp,
                     const TrajectoryRecord& traj_q, int t);

// Builds the per-state record sequence from a paired run, filling
// delta_predicted from the closed form in the chosen mode.
std::vector<StepErrorRecord> make_step_error_records(
    const TrajectoryRecord& traj_fp, const TrajectoryRecord& traj_q,
    const NoiseSchedule& s, WeightMode mode);

// Truncated correction window at step t: the current eps plus, when a step
// above t exists and its cached eps is supplied, that one. In closed form
//   Delta_t = -B_t eps_t - (sqrt(alpha_t)/sqrt(alpha_below(t))) B_up eps_next
// where B_up belongs to the step above t. m >= 1; a window wider than the
// available cache truncates to what is cached.
Latent correction_term(const Latent& eps_t, const Latent* eps_next,
                       const NoiseSchedule& s, const StepPlan& plan, int t,
                       int m);

struct MConditionEntry {
  int m = 0;
  int t = 0;
  double window_sum = 0.0;  // sum of |B_k| over the plan window above t
  double b_t = 0.0;         // |B_t|
  bool holds = false;       // window_sum <= b_t
};

// Window condition rows for m in {1, 2, 3}: at each plan step t, the sum of
// |B_k| over the m previously executed steps against |B_t|. Needs only the
// schedule, so the schedule report can emit it without running anything.
std::vector<MConditionEntry> m_condition_table(const NoiseSchedule& s,
                                               const StepPlan& plan);

struct BoundReport {
  double sigma = 0.0;
  std::vector<int> ts;      // plan order
  std::vector<double> rho;  // a_t + |B_t| L_t per step
  std::vector<double> eta;  // noise residue, single-step window
  double bound_delta0 = 0.0;
  double measured_delta0 = 0.0;
  std::vector<bool> rho_lt_one;
  std::vector<MConditionEntry> m_condition;  // m in {1,2,3}, per step
};

// Unrolled norm bound sigma * sum_i (prod over later steps of rho) |B_i| for
// an arbitrary per-step rho sequence in plan order.
double bound_delta0_for_rho(const NoiseSchedule& s, const StepPlan& plan,
                            std::span<const double> rho, double sigma);

// jacobian_norms: per-step spectral norm estimates L_t in plan order; empty
// means L = 0 everywhere. records must include the t = 0 entry so the
// measured final error is available.
BoundReport bound_suite(const NoiseSchedule& s, const StepPlan& plan,
                        const std::vector<StepErrorRecord>& records,
                        std::span<const double> jacobian_norms);

}  // namespace qeprop
