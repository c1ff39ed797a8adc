// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <stdexcept>
#include <vector>

#include "qeprop/rng.hpp"

namespace qeprop {

// C x H x W tensor of doubles, row-major per channel. Plain value type.
class Latent {
 public:
  Latent() = default;
  Latent(int c, int h, int w, double fill = 0.0);

  int channels() const { return c_; }
  int height() const { return h_; }
  int width() const { return w_; }
  std::size_t size() const { return v_.size(); }

  double& at(int c, int h, int w) { return v_[index(c, h, w)]; }
  double at(int c, int h, int w) const { return v_[index(c, h, w)]; }
  double& operator[](std::size_t i) { return v_[i]; }
  double operator[](std::size_t i) const { return v_[i]; }
  double* data() { return v_.data(); }
  const double* data() const { return v_.data(); }
  const std::vector<double>& values() const { return v_; }

  bool same_shape(const Latent& o) const {
    return c_ == o.c_ && h_ == o.h_ && w_ == o.w_;
  }
  bool all_finite() const;

  Latent& operator+=(const Latent& o);
  Latent& operator-=(const Latent& o);
  Latent& operator*=(double k);

 private:
  std::size_t index(int c, int h, int w) const {
    return (static_cast<std::size_t>(c) * h_ + h) * w_ + w;
  }
  int c_ = 0, h_ = 0, w_ = 0;
  std::vector<double> v_;
};

Latent operator+(Latent a, const Latent& b);
Latent operator-(Latent a, const Latent& b);
Latent operator*(double k, Latent a);

// One row of the per-step metrics CSV.
struct MetricSample {
  int step_index = 0;
  int t = 0;
  double mse = 0.0;
  double psnr = 0.0;
  double delta_norm = 0.0;
  double eps_norm = 0.0;
  double correction_norm = 0.0;
};

// All reductions run serially left to right so results are bit-reproducible.
double l2_norm(const Latent& x);
double mse(const Latent& a, const Latent& b);

// 10*log10(R^2 / mse) with R = max - min of the reference's own values.
// Throws std::domain_error when mse == 0; callers conventionally report +inf.
double psnr(const Latent& reference, const Latent& test);

// psnr with the +inf sentinel applied, as used by the reporting layer.
double psnr_or_inf(const Latent& reference, const Latent& test);

Latent normal_latent(Rng& rng, int c, int h, int w, double stddev = 1.0);

}  // namespace qeprop
