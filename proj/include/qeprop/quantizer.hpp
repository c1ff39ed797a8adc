// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <vector>

#include "qeprop/denoiser.hpp"
#include "qeprop/latent.hpp"
#include "qeprop/schedule.hpp"

namespace qeprop {

enum class Granularity { per_tensor, per_channel, per_group };

struct QuantConfig {
  int weight_bits = 8;
  int act_bits = 8;
  Granularity granularity = Granularity::per_tensor;
  int group_size = 16;
  bool symmetric = true;
};

// Uniform quantize-dequantize. `slice` is the contiguous run covered by one
// scale: the channel length for per_channel, the group size for per_group;
// ignored for per_tensor. All-zero slices pass through unchanged (scale 0).
std::vector<double> fake_quant(std::span<const double> values, int bits,
                               Granularity g, bool symmetric,
                               std::size_t slice = 0);

// Denoiser wrapper applying weight fake-quant once (cached at construction)
// and activation fake-quant at each layer boundary. The analytic denoiser has
// no layers, so only its output is quantized. Activations are quantized
// per-tensor; the configured granularity applies to weight matrices, where
// per_channel means one scale per output row and per_group splits each row's
// inputs into contiguous groups.
class QuantizedDenoiser : public Denoiser {
 public:
  QuantizedDenoiser(std::shared_ptr<const Denoiser> inner, QuantConfig q);

  Latent predict(const Latent& x, int t, const NoiseSchedule& s) const override;

  int channels() const override { return inner_->channels(); }
  int height() const override { return inner_->height(); }
  int width() const override { return inner_->width(); }

 private:
  std::shared_ptr<const Denoiser> inner_;
  QuantConfig q_;
  const SeededMlp* mlp_ = nullptr;      // non-owning view into inner_
  SeededMlp::Weights quant_weights_;    // used only when mlp_ != nullptr
};

std::shared_ptr<QuantizedDenoiser> quantize_denoiser(
    std::shared_ptr<const Denoiser> spec, const QuantConfig& q);

// Per-channel K* rows keyed by planned timestep, for the scaled_output model.
struct KStarTable {
  std::vector<int> ts;         // plan order
  int channels = 0;
  std::vector<double> values;  // ts.size() x channels, row-major

  std::span<const double> row(int t) const;
};

// Synthetic per-step error sources producing mu_tilde = mu + eps_t.
struct ErrorModel {
  enum class Kind { zero, gaussian, scaled_output, fake_quant };
  Kind kind = Kind::zero;

  std::map<int, double> sigma_t;  // gaussian: per planned timestep
  KStarTable kstar;               // scaled_output
  std::shared_ptr<const Denoiser> quantized;  // fake_quant: paired evaluation
};

// eps_t for the zero / gaussian / scaled_output kinds. mu_q is the quantized
// model's output at (x_t, t); for scaled_output this is the value K* scales.
// The fake_quant kind has no synthetic draw (its error is the measured
// difference of paired evaluations) and is rejected here.
Latent inject_error(const ErrorModel& model, const Latent& mu_q, int t,
                    std::uint64_t rng_seed);

// Solves mu_tilde = mu + kstar (.) mu_tilde per channel, polishing the
// division result until the doubles stop changing so the identity holds
// bitwise.
Latent scaled_output_mu_tilde(const Latent& mu, std::span<const double> kstar);

// One evaluation of the quantized model against the full-precision one.
struct ModelEval {
  Latent mu;        // full-precision output at (x, t)
  Latent mu_tilde;  // quantized output, mu + eps
  Latent eps;       // per-step error
};

// Evaluates mu = fp(x, t) and applies the error model. For scaled_output the
// definition eps = K* (.) mu_tilde is a fixed point in mu_tilde; it is
// iterated until the doubles stop changing so the identity holds bitwise.
ModelEval apply_error_model(const ErrorModel& model, const Denoiser& fp,
                            const Latent& x, int t, const NoiseSchedule& s,
                            std::uint64_t rng_seed);

}  // namespace qeprop
