// SPDX-License-Identifier: Apache-2.0
#include "qeprop/denoiser.hpp"

#include <cmath>
#include <stdexcept>

#include "qeprop/rng.hpp"

namespace qeprop {

AnalyticGaussian::AnalyticGaussian(Latent mean, double scale)
    : mean_(std::move(mean)), scale_(scale) {
  if (!(scale > 0.0)) {
    throw std::invalid_argument("AnalyticGaussian: scale must be positive");
  }
}

double AnalyticGaussian::c_t(const NoiseSchedule& s, int t) const {
  const double at = s.alpha_at(t);
  return std::sqrt(1.0 - at) / (at * scale_ * scale_ + 1.0 - at);
}

Latent AnalyticGaussian::predict(const Latent& x, int t, const NoiseSchedule& s) const {
  if (!x.same_shape(mean_)) {
    throw std::invalid_argument("AnalyticGaussian: latent shape mismatch");
  }
  if (t < 1 || t > s.T) throw std::out_of_range("predict: t out of range");
  const double ct = c_t(s, t);
  const double sq = std::sqrt(s.alpha_at(t));
  Latent out(x.channels(), x.height(), x.width());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = ct * (x[i] - sq * mean_[i]);
  return out;
}

bool AnalyticGaussian::jacobian_scalar(int t, const NoiseSchedule& s, double* out) const {
  *out = c_t(s, t);
  return true;
}

SeededMlp::SeededMlp(int channels, int height, int width, int hidden_width,
                     std::uint64_t seed, double output_scale)
    : c_(channels), h_(height), w_(width),
      dim_(channels * height * width), hidden_(hidden_width),
      output_scale_(output_scale) {
  if (hidden_width < 1) throw std::invalid_argument("SeededMlp: width must be >= 1");
  Rng rng(seed);
  const int in_dim = dim_ + kEmbedDim;
  auto init = [&rng](std::vector<double>& v, std::size_t count, int fan_in) {
    v.resize(count);
    const double sd = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& x : v) x = sd * rng.normal();
  };
  init(weights_.w1, static_cast<std::size_t>(hidden_) * in_dim, in_dim);
  init(weights_.b1, hidden_, in_dim);
  init(weights_.w2, static_cast<std::size_t>(hidden_) * hidden_, hidden_);
  init(weights_.b2, hidden_, hidden_);
  init(weights_.w3, static_cast<std::size_t>(dim_) * hidden_, hidden_);
  init(weights_.b3, dim_, hidden_);
}

void SeededMlp::embed_timestep(int t, double* out16) {
  const int half = kEmbedDim / 2;
  for (int j = 0; j < half; ++j) {
    const double freq = std::exp(-std::log(10000.0) * j / half);
    out16[2 * j] = std::sin(t * freq);
    out16[2 * j + 1] = std::cos(t * freq);
  }
}

Latent SeededMlp::predict(const Latent& x, int t, const NoiseSchedule& s) const {
  if (static_cast<int>(x.size()) != dim_) {
    throw std::invalid_argument("SeededMlp: latent shape mismatch");
  }
  if (t < 1 || t > s.T) throw std::out_of_range("predict: t out of range");

  const int in_dim = dim_ + kEmbedDim;
  std::vector<double> z(in_dim);
  for (int i = 0; i < dim_; ++i) z[i] = x[i];
  embed_timestep(t, z.data() + dim_);

  std::vector<double> h1(hidden_), h2(hidden_);
  for (int r = 0; r < hidden_; ++r) {
    double acc = weights_.b1[r];
    const double* row = &weights_.w1[static_cast<std::size_t>(r) * in_dim];
    for (int c = 0; c < in_dim; ++c) acc += row[c] * z[c];
    h1[r] = std::tanh(acc);
  }
  for (int r = 0; r < hidden_; ++r) {
    double acc = weights_.b2[r];
    const double* row = &weights_.w2[static_cast<std::size_t>(r) * hidden_];
    for (int c = 0; c < hidden_; ++c) acc += row[c] * h1[c];
    h2[r] = std::tanh(acc);
  }
  Latent out(x.channels(), x.height(), x.width());
  for (int r = 0; r < dim_; ++r) {
    double acc = weights_.b3[r];
    const double* row = &weights_.w3[static_cast<std::size_t>(r) * hidden_];
    for (int c = 0; c < hidden_; ++c) acc += row[c] * h2[c];
    out[r] = output_scale_ * acc;
  }
  return out;
}

JacobianEstimate jacobian_fd(const Denoiser& d, const Latent& x, int t,
                             const NoiseSchedule& s, double h, int dim_cap) {
  const int dim = static_cast<int>(x.size());
  if (dim > dim_cap) {
    throw std::invalid_argument("jacobian_fd: dimension exceeds cap");
  }
  if (h <= 0.0) {
    double rms = l2_norm(x) / std::sqrt(static_cast<double>(dim));
    if (rms == 0.0) rms = 1.0;
    h = 1e-4 * rms;
  }
  JacobianEstimate j;
  j.dim = dim;
  j.t = t;
  j.fd_step = h;
  j.m.assign(static_cast<std::size_t>(dim) * dim, 0.0);
  Latent xp = x, xm = x;
  for (int col = 0; col < dim; ++col) {
    xp[col] = x[col] + h;
    xm[col] = x[col] - h;
    const Latent fp = d.predict(xp, t, s);
    const Latent fm = d.predict(xm, t, s);
    for (int row = 0; row < dim; ++row) {
      j.at(row, col) = (fp[row] - fm[row]) / (2.0 * h);
    }
    xp[col] = x[col];
    xm[col] = x[col];
  }
  return j;
}

double jacobian_norm(const JacobianEstimate& j) {
  const int n = j.dim;
  if (n == 0) return 0.0;
  Rng rng(0x5eedf00d);
  std::vector<double> v(n), av(n), atav(n);
  for (auto& x : v) x = rng.normal();
  auto norm_of = [](const std::vector<double>& u) {
    double acc = 0.0;
    for (double x : u) acc += x * x;
    return std::sqrt(acc);
  };
  {
    const double nv = norm_of(v);
    if (nv == 0.0) return 0.0;
    for (auto& x : v) x /= nv;
  }
  double sigma = 0.0;
  for (int it = 0; it < 100; ++it) {
    for (int r = 0; r < n; ++r) {
      double acc = 0.0;
      for (int c = 0; c < n; ++c) acc += j.at(r, c) * v[c];
      av[r] = acc;
    }
    for (int c = 0; c < n; ++c) {
      double acc = 0.0;
      for (int r = 0; r < n; ++r) acc += j.at(r, c) * av[r];
      atav[c] = acc;
    }
    const double nn = norm_of(atav);
    if (nn == 0.0) return 0.0;
    for (int c = 0; c < n; ++c) v[c] = atav[c] / nn;
    sigma = norm_of(av);
  }
  // One more multiply with the converged vector gives ||J v|| = sigma_max.
  for (int r = 0; r < n; ++r) {
    double acc = 0.0;
    for (int c = 0; c < n; ++c) acc += j.at(r, c) * v[c];
    av[r] = acc;
  }
  sigma = norm_of(av);
  return sigma;
}

}  // namespace qeprop
