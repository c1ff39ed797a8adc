// SPDX-License-Identifier: Apache-2.0
#include "qeprop/quantizer.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "qeprop/rng.hpp"
#include "qeprop/util.hpp"

namespace qeprop {

namespace {

// Quantize one contiguous run with a single scale. round() implements
// round-half-away-from-zero, which keeps results identical across platforms.
void quant_slice(const double* in, double* out, std::size_t n, int bits,
                 bool symmetric) {
  if (symmetric) {
    double amax = 0.0;
    for (std::size_t i = 0; i < n; ++i) amax = std::max(amax, std::fabs(in[i]));
    if (amax == 0.0) {
      std::memcpy(out, in, n * sizeof(double));
      return;
    }
    const double qmax = static_cast<double>((1 << (bits - 1)) - 1);
    const double scale = amax / qmax;
    for (std::size_t i = 0; i < n; ++i) {
      double q = std::round(in[i] / scale);
      q = std::min(std::max(q, -qmax - 1.0), qmax);
      out[i] = q * scale;
    }
  } else {
    double lo = in[0], hi = in[0];
    for (std::size_t i = 1; i < n; ++i) {
      lo = std::min(lo, in[i]);
      hi = std::max(hi, in[i]);
    }
    if (hi == lo) {
      std::memcpy(out, in, n * sizeof(double));
      return;
    }
    const double levels = static_cast<double>((1 << bits) - 1);
    const double scale = (hi - lo) / levels;
    const double zp = std::round(-lo / scale);
    for (std::size_t i = 0; i < n; ++i) {
      double q = std::round(in[i] / scale + zp);
      q = std::min(std::max(q, 0.0), levels);
      out[i] = (q - zp) * scale;
    }
  }
}

}  // namespace

std::vector<double> fake_quant(std::span<const double> values, int bits,
                               Granularity g, bool symmetric,
                               std::size_t slice) {
  if (values.empty()) throw std::invalid_argument("fake_quant: empty input");
  if (bits < 2 || bits > 16) {
    throw std::invalid_argument("fake_quant: bits must be in [2, 16]");
  }
  std::size_t run = values.size();
  if (g != Granularity::per_tensor) {
    if (slice == 0 || values.size() % slice != 0) {
      throw std::invalid_argument("fake_quant: slice must divide input length");
    }
    run = slice;
  }
  std::vector<double> out(values.size());
  for (std::size_t off = 0; off < values.size(); off += run) {
    quant_slice(values.data() + off, out.data() + off, run, bits, symmetric);
  }
  return out;
}

QuantizedDenoiser::QuantizedDenoiser(std::shared_ptr<const Denoiser> inner,
                                     QuantConfig q)
    : inner_(std::move(inner)), q_(q) {
  mlp_ = dynamic_cast<const SeededMlp*>(inner_.get());
  if (mlp_ != nullptr) {
    const auto& w = mlp_->weights();
    auto quant_matrix = [this](const std::vector<double>& m, int rows) {
      const std::size_t cols = m.size() / rows;
      std::size_t slice = cols;  // per_channel: one scale per output row
      if (q_.granularity == Granularity::per_tensor) {
        return fake_quant(m, q_.weight_bits, Granularity::per_tensor,
                          q_.symmetric);
      }
      if (q_.granularity == Granularity::per_group) {
        if (q_.group_size <= 0 || cols % q_.group_size != 0) {
          throw std::invalid_argument(
              "quantize_denoiser: group_size must divide the weight row length");
        }
        slice = static_cast<std::size_t>(q_.group_size);
      }
      return fake_quant(m, q_.weight_bits, Granularity::per_group, q_.symmetric,
                        slice);
    };
    quant_weights_.w1 = quant_matrix(w.w1, mlp_->hidden());
    quant_weights_.b1 = w.b1;
    quant_weights_.w2 = quant_matrix(w.w2, mlp_->hidden());
    quant_weights_.b2 = w.b2;
    quant_weights_.w3 = quant_matrix(w.w3, mlp_->dim());
    quant_weights_.b3 = w.b3;
  }
}

Latent QuantizedDenoiser::predict(const Latent& x, int t,
                                  const NoiseSchedule& s) const {
  if (mlp_ == nullptr) {
    Latent out = inner_->predict(x, t, s);
    auto q = fake_quant(std::span<const double>(out.data(), out.size()),
                        q_.act_bits, Granularity::per_tensor, q_.symmetric);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = q[i];
    return out;
  }

  const int dim = mlp_->dim();
  const int hidden = mlp_->hidden();
  const int in_dim = dim + SeededMlp::kEmbedDim;
  std::vector<double> z(in_dim);
  for (int i = 0; i < dim; ++i) z[i] = x[i];
  SeededMlp::embed_timestep(t, z.data() + dim);

  auto act = [this](std::vector<double>& v) {
    auto q = fake_quant(v, q_.act_bits, Granularity::per_tensor, q_.symmetric);
    v = std::move(q);
  };

  std::vector<double> h1(hidden), h2(hidden), o(dim);
  for (int r = 0; r < hidden; ++r) {
    double acc = quant_weights_.b1[r];
    const double* row = &quant_weights_.w1[static_cast<std::size_t>(r) * in_dim];
    for (int c = 0; c < in_dim; ++c) acc += row[c] * z[c];
    h1[r] = std::tanh(acc);
  }
  act(h1);
  for (int r = 0; r < hidden; ++r) {
    double acc = quant_weights_.b2[r];
    const double* row = &quant_weights_.w2[static_cast<std::size_t>(r) * hidden];
    for (int c = 0; c < hidden; ++c) acc += row[c] * h1[c];
    h2[r] = std::tanh(acc);
  }
  act(h2);
  for (int r = 0; r < dim; ++r) {
    double acc = quant_weights_.b3[r];
    const double* row = &quant_weights_.w3[static_cast<std::size_t>(r) * hidden];
    for (int c = 0; c < hidden; ++c) acc += row[c] * h2[c];
    o[r] = mlp_->output_scale() * acc;
  }
  act(o);
  Latent out(x.channels(), x.height(), x.width());
  for (int i = 0; i < dim; ++i) out[i] = o[i];
  return out;
}

std::shared_ptr<QuantizedDenoiser> quantize_denoiser(
    std::shared_ptr<const Denoiser> spec, const QuantConfig& q) {
  return std::make_shared<QuantizedDenoiser>(std::move(spec), q);
}

std::span<const double> KStarTable::row(int t) const {
  for (std::size_t i = 0; i < ts.size(); ++i) {
    if (ts[i] == t) {
      return {values.data() + i * channels, static_cast<std::size_t>(channels)};
    }
  }
  throw std::out_of_range("KStarTable: no row for timestep");
}

namespace {

std::uint64_t step_stream_seed(std::uint64_t seed, int t) {
  std::uint64_t h = fnv1a64("eps", 3);
  h = fnv1a64_append(h, seed);
  h = fnv1a64_append(h, static_cast<std::uint64_t>(t));
  return h;
}

}  // namespace

Latent inject_error(const ErrorModel& model, const Latent& mu_q, int t,
                    std::uint64_t rng_seed) {
  switch (model.kind) {
    case ErrorModel::Kind::zero:
      return Latent(mu_q.channels(), mu_q.height(), mu_q.width());
    case ErrorModel::Kind::gaussian: {
      const auto it = model.sigma_t.find(t);
      if (it == model.sigma_t.end()) {
        throw std::out_of_range("inject_error: no sigma for timestep");
      }
      if (it->second < 0.0) {
        throw std::invalid_argument("inject_error: negative sigma");
      }
      Rng rng(step_stream_seed(rng_seed, t));
      return normal_latent(rng, mu_q.channels(), mu_q.height(), mu_q.width(),
                           it->second);
    }
    case ErrorModel::Kind::scaled_output: {
      const auto k = model.kstar.row(t);
      if (static_cast<int>(k.size()) != mu_q.channels()) {
        throw std::invalid_argument("inject_error: K* channel count mismatch");
      }
      Latent eps(mu_q.channels(), mu_q.height(), mu_q.width());
      for (int c = 0; c < mu_q.channels(); ++c) {
        for (int h = 0; h < mu_q.height(); ++h) {
          for (int w = 0; w < mu_q.width(); ++w) {
            eps.at(c, h, w) = k[c] * mu_q.at(c, h, w);
          }
        }
      }
      return eps;
    }
    case ErrorModel::Kind::fake_quant:
      throw std::invalid_argument(
          "inject_error: fake_quant errors come from paired evaluation");
  }
  throw std::logic_error("inject_error: unknown kind");
}

Latent scaled_output_mu_tilde(const Latent& mu, std::span<const double> kstar) {
  if (static_cast<int>(kstar.size()) != mu.channels()) {
    throw std::invalid_argument("scaled_output_mu_tilde: channel mismatch");
  }
  const int hw = mu.height() * mu.width();
  Latent mt = mu;
  for (int c = 0; c < mu.channels(); ++c) {
    for (int i = 0; i < hw; ++i) {
      mt[static_cast<std::size_t>(c) * hw + i] /= (1.0 - kstar[c]);
    }
  }
  // Polish the fixed point mu_tilde = mu + K* (.) mu_tilde until it is
  // bitwise stable, so eps == K* (.) mu_tilde holds exactly rather than to
  // rounding.
  for (int it = 0; it < 64; ++it) {
    bool changed = false;
    for (int c = 0; c < mu.channels(); ++c) {
      for (int i = 0; i < hw; ++i) {
        const std::size_t idx = static_cast<std::size_t>(c) * hw + i;
        const double next = mu[idx] + kstar[c] * mt[idx];
        if (next != mt[idx]) {
          mt[idx] = next;
          changed = true;
        }
      }
    }
    if (!changed) break;
  }
  return mt;
}

ModelEval apply_error_model(const ErrorModel& model, const Denoiser& fp,
                            const Latent& x, int t, const NoiseSchedule& s,
                            std::uint64_t rng_seed) {
  ModelEval ev;
  ev.mu = fp.predict(x, t, s);
  switch (model.kind) {
    case ErrorModel::Kind::zero:
      ev.mu_tilde = ev.mu;
      ev.eps = Latent(x.channels(), x.height(), x.width());
      return ev;
    case ErrorModel::Kind::gaussian:
      ev.eps = inject_error(model, ev.mu, t, rng_seed);
      ev.mu_tilde = ev.mu + ev.eps;
      return ev;
    case ErrorModel::Kind::scaled_output: {
      const Latent mt = scaled_output_mu_tilde(ev.mu, model.kstar.row(t));
      ev.eps = inject_error(model, mt, t, rng_seed);
      ev.mu_tilde = ev.mu + ev.eps;
      return ev;
    }
    case ErrorModel::Kind::fake_quant: {
      if (!model.quantized) {
        throw std::invalid_argument("apply_error_model: missing quantized model");
      }
      ev.mu_tilde = model.quantized->predict(x, t, s);
      ev.eps = ev.mu_tilde - ev.mu;
      return ev;
    }
  }
  throw std::logic_error("apply_error_model: unknown kind");
}

}  // namespace qeprop
