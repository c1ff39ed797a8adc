// SPDX-License-Identifier: Apache-2.0
#include "qeprop/latent.hpp"

#include <cmath>
#include <limits>

namespace qeprop {

Latent::Latent(int c, int h, int w, double fill)
    : c_(c), h_(h), w_(w), v_(static_cast<std::size_t>(c) * h * w, fill) {
  if (c <= 0 || h <= 0 || w <= 0) {
    throw std::invalid_argument("Latent: dimensions must be positive");
  }
}

bool Latent::all_finite() const {
  for (double x : v_) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

Latent& Latent::operator+=(const Latent& o) {
  if (!same_shape(o)) throw std::invalid_argument("Latent: shape mismatch");
  for (std::size_t i = 0; i < v_.size(); ++i) v_[i] += o.v_[i];
  return *this;
}

Latent& Latent::operator-=(const Latent& o) {
  if (!same_shape(o)) throw std::invalid_argument("Latent: shape mismatch");
  for (std::size_t i = 0; i < v_.size(); ++i) v_[i] -= o.v_[i];
  return *this;
}

Latent& Latent::operator*=(double k) {
  for (double& x : v_) x *= k;
  return *this;
}

Latent operator+(Latent a, const Latent& b) { return a += b; }
Latent operator-(Latent a, const Latent& b) { return a -= b; }
Latent operator*(double k, Latent a) { return a *= k; }

double l2_norm(const Latent& x) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * x[i];
  return std::sqrt(acc);
}

double mse(const Latent& a, const Latent& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("mse: shape mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

double psnr(const Latent& reference, const Latent& test) {
  const double m = mse(reference, test);
  if (m == 0.0) throw std::domain_error("psnr: identical inputs");
  double lo = reference[0], hi = reference[0];
  for (std::size_t i = 1; i < reference.size(); ++i) {
    lo = std::min(lo, reference[i]);
    hi = std::max(hi, reference[i]);
  }
  const double range = hi - lo;
  return 10.0 * std::log10(range * range / m);
}

double psnr_or_inf(const Latent& reference, const Latent& test) {
  const double m = mse(reference, test);
  if (m == 0.0) return std::numeric_limits<double>::infinity();
  return psnr(reference, test);
}

Latent normal_latent(Rng& rng, int c, int h, int w, double stddev) {
  Latent out(c, h, w);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = stddev * rng.normal();
  return out;
}

}  // namespace qeprop
