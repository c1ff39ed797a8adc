// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "qeprop/latent.hpp"
#include "qeprop/schedule.hpp"

namespace qeprop {

// Noise-estimation model interface. Implementations are immutable after
// construction and predict() is pure, so instances are freely shareable.
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual Latent predict(const Latent& x, int t, const NoiseSchedule& s) const = 0;

  virtual int channels() const = 0;
  virtual int height() const = 0;
  virtual int width() const = 0;

  // Analytic Jacobian as a scalar multiple of the identity, when the model
  // has one (the analytic Gaussian does; others return false).
  virtual bool jacobian_scalar(int t, const NoiseSchedule& s, double* out) const {
    (void)t; (void)s; (void)out;
    return false;
  }
};

// MMSE noise predictor for data ~ N(mean, scale^2 I) under the forward
// process x_t = sqrt(alpha_t) x_0 + sqrt(1 - alpha_t) eps. Affine in x at
// fixed t, so first-order Taylor expansions of it are exact.
class AnalyticGaussian : public Denoiser {
 public:
  AnalyticGaussian(Latent mean, double scale);

  Latent predict(const Latent& x, int t, const NoiseSchedule& s) const override;
  bool jacobian_scalar(int t, const NoiseSchedule& s, double* out) const override;

  // c_t = sqrt(1 - alpha_t) / (alpha_t scale^2 + 1 - alpha_t)
  double c_t(const NoiseSchedule& s, int t) const;
  const Latent& mean() const { return mean_; }
  double scale() const { return scale_; }

  int channels() const override { return mean_.channels(); }
  int height() const override { return mean_.height(); }
  int width() const override { return mean_.width(); }

 private:
  Latent mean_;
  double scale_;
};

// Untrained two-hidden-layer tanh MLP with a sinusoidal timestep embedding
// and seeded weights. Exists to stress propagation under nonlinearity;
// output_scale = 0 turns it into the constant zero denoiser (J = 0).
class SeededMlp : public Denoiser {
 public:
  SeededMlp(int channels, int height, int width, int hidden_width,
            std::uint64_t seed, double output_scale);

  Latent predict(const Latent& x, int t, const NoiseSchedule& s) const override;

  static constexpr int kEmbedDim = 16;

  struct Weights {
    std::vector<double> w1, b1;  // hidden x (dim + embed), hidden
    std::vector<double> w2, b2;  // hidden x hidden, hidden
    std::vector<double> w3, b3;  // dim x hidden, dim
  };
  const Weights& weights() const { return weights_; }
  Weights& mutable_weights() { return weights_; }
  int dim() const { return dim_; }
  int hidden() const { return hidden_; }
  double output_scale() const { return output_scale_; }
  int channels() const override { return c_; }
  int height() const override { return h_; }
  int width() const override { return w_; }

  static void embed_timestep(int t, double* out16);

 private:
  int c_, h_, w_, dim_, hidden_;
  double output_scale_;
  Weights weights_;
};

struct JacobianEstimate {
  int dim = 0;
  std::vector<double> m;  // row-major dim x dim
  int t = 0;
  double fd_step = 0.0;

  double at(int r, int c) const { return m[static_cast<std::size_t>(r) * dim + c]; }
  double& at(int r, int c) { return m[static_cast<std::size_t>(r) * dim + c]; }
};

inline constexpr int kJacobianDimCap = 512;

// Central finite differences, column by column. h <= 0 selects the default
// step of 1e-4 relative to the latent RMS.
JacobianEstimate jacobian_fd(const Denoiser& d, const Latent& x, int t,
                             const NoiseSchedule& s, double h = 0.0,
                             int dim_cap = kJacobianDimCap);

// Spectral norm via power iteration on J^T J: fixed 100 iterations from a
// fixed-seed start vector.
double jacobian_norm(const JacobianEstimate& j);

}  // namespace qeprop
