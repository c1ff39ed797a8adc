// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "qeprop/calibration.hpp"
#include "qeprop/denoiser.hpp"
#include "qeprop/latent.hpp"
#include "qeprop/quantizer.hpp"
#include "qeprop/schedule.hpp"
#include "qeprop/trajectory.hpp"

namespace qeprop {

// How the correction window consumes the cached estimate of the previous
// step. `literal` keeps the two-entry window every step; `once` cancels each
// step's own injection exactly once, which is what tracks the full-precision
// trajectory (each step's correction already removed its own term, so
// re-subtracting it next step double-counts). The cache is maintained either
// way.
enum class WindowPolicy { once, literal };

// One DDIM update a x + B eps_hat with plan-neighbor coefficients.
Latent ddim_step(const Latent& x, const Latent& eps_hat,
                 const NoiseSchedule& s, int t, int t_prev);

// f(x, t) = -mu(x, t) / sqrt(1 - alpha_t); t must be >= 1.
Latent f_from_mu(const Latent& mu, const NoiseSchedule& s, int t);
Latent f_eval(const Denoiser& d, const Latent& x, int t,
              const NoiseSchedule& s);

// One DPM-Solver++ 2nd-order update from the two staged f evaluations:
// x + (dt/2)(f1 + f2), dt in normalized time (fraction of T).
Latent dpmpp2_step(const Latent& x, const Latent& f1, const Latent& f2,
                   double dt);

// First-order propagation matrices of the two-stage update:
//   A = dPhi/dx = I + (dt/2) (J1 + J2 (I + dt J1))
//   B = dPhi/df = (dt/2) (2 I + dt J1)
// J1 is the Jacobian of f at (x, t), J2 at the mid state and stage timestep.
// Uses the analytic scalar Jacobian when the denoiser has one, otherwise
// central finite differences (subject to the dimension cap).
struct DpmCoeffs {
  int t = 0;
  int t_stage = 0;
  double dt = 0.0;
  int dim = 0;
  std::vector<double> A;  // row-major dim x dim
  std::vector<double> B;  // row-major dim x dim
  double jf1 = 0.0;       // scalar J1 when the denoiser exposes one
  bool jf_scalar = false;

  Latent apply_A(const Latent& v) const;
  Latent apply_B(const Latent& v) const;
};

DpmCoeffs dpmpp_prop_coeffs(const Denoiser& d, const Latent& x, int t,
                            double dt, const NoiseSchedule& s);

// Temporal weight of window entry k for a correction applied at step t:
// the alpha ratio of the plan neighbors below k and t, damped by
// exp(-lambda_decay * frob_sum) with frob_sum the summed Frobenius norms of
// the f Jacobians across the window (0 when lambda_decay is 0).
double dpmpp_gamma(const NoiseSchedule& s, const StepPlan& plan, int t, int k,
                   double lambda_decay, double frob_sum);

// Everything one sampling run needs. `model` is ignored by the fp variant;
// `k` is consulted only by tcec (tcec_oracle corrects with the true eps).
struct SamplerSetup {
  const Denoiser* fp = nullptr;
  const ErrorModel* model = nullptr;
  const NoiseSchedule* s = nullptr;
  const StepPlan* plan = nullptr;
  const ScalingMatrix* k = nullptr;
  Solver solver = Solver::ddim;
  Variant variant = Variant::fp;
  WindowPolicy window_policy = WindowPolicy::once;
  double lambda_decay = 0.0;
};

TrajectoryRecord run_sampler(const SamplerSetup& setup, const Latent& x_T,
                             std::uint64_t seed);

TrajectoryRecord run_ddim(const Denoiser& fp, const ErrorModel& model,
                          const NoiseSchedule& s, const StepPlan& plan,
                          const Latent& x_T, std::uint64_t seed,
                          Variant variant);

// Corrected DDIM: at each step estimates eps_hat = K_t (.) mu_tilde, applies
// the correction window, and caches the estimate (ring buffer of depth 1).
TrajectoryRecord run_ddim_tcec(const Denoiser& fp, const ErrorModel& model,
                               const ScalingMatrix& k, const NoiseSchedule& s,
                               const StepPlan& plan, const Latent& x_T,
                               std::uint64_t seed,
                               WindowPolicy policy = WindowPolicy::once);

// Corrected DPM++ 2nd order; ring buffer of depth 2, gamma-weighted window.
TrajectoryRecord run_dpmpp_tcec(const Denoiser& fp, const ErrorModel& model,
                                const ScalingMatrix& k, const NoiseSchedule& s,
                                const StepPlan& plan, const Latent& x_T,
                                std::uint64_t seed, double lambda_decay = 0.0,
                                WindowPolicy policy = WindowPolicy::once);

struct LowRankFactors {
  int dim = 0;
  int r = 0;
  std::vector<double> u;   // dim x r
  std::vector<double> sv;  // r singular values, descending
  std::vector<double> vt;  // r x dim
  double recon_error = 0.0;  // Frobenius norm of the residual

  double reconstruct(int row, int col) const;
};

// Best rank-r approximation by dense SVD.
LowRankFactors jacobian_lowrank(const JacobianEstimate& j, int r);

}  // namespace qeprop
