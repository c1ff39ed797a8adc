// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"

#include <cmath>
#include <memory>
#include <span>
#include <stdexcept>
#include <vector>

#include "qeprop/denoiser.hpp"
#include "qeprop/latent.hpp"
#include "qeprop/quantizer.hpp"
#include "qeprop/rng.hpp"
#include "qeprop/schedule.hpp"

using namespace qeprop;

TEST_CASE("symmetric fake_quant at 2 bits") {
  const std::vector<double> v = {0.0, 0.5, 1.0};
  const auto q = fake_quant(v, 2, Granularity::per_tensor, true);
  REQUIRE(q.size() == 3);
  // scale = 1, round-half-away puts 0.5 on 1
  CHECK(q[0] == 0.0);
  CHECK(q[1] == 1.0);
  CHECK(q[2] == 1.0);

  // scale is exactly 1 here, so requantizing reproduces the output bitwise
  const auto q2 = fake_quant(q, 2, Granularity::per_tensor, true);
  CHECK(q2 == q);
}

TEST_CASE("fake_quant error stays within half a step") {
  Rng rng(31);
  std::vector<double> v(256);
  double amax = 0.0;
  for (auto& x : v) {
    x = rng.normal();
    amax = std::max(amax, std::fabs(x));
  }
  const int bits = 8;
  const double qmax = (1 << (bits - 1)) - 1;
  const double half_step = 0.5 * amax / qmax;
  const auto q = fake_quant(v, bits, Granularity::per_tensor, true);
  double worst = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    worst = std::max(worst, std::fabs(q[i] - v[i]));
  }
  CHECK(worst <= half_step * (1.0 + 1e-12));

  // near-idempotent: a second pass only moves values at rounding level
  const auto q2 = fake_quant(q, bits, Granularity::per_tensor, true);
  for (std::size_t i = 0; i < v.size(); ++i) {
    CHECK(std::fabs(q2[i] - q[i]) <= 1e-12 * std::max(1.0, std::fabs(q[i])));
  }
}

TEST_CASE("sliced granularities scale each run independently") {
  const std::vector<double> v = {0.0, 0.5, 1.0, 0.0, 0.0, 5.0, 10.0, 0.0};
  const auto q = fake_quant(v, 2, Granularity::per_group, true, 4);
  CHECK(q[0] == 0.0);
  CHECK(q[1] == 1.0);
  CHECK(q[2] == 1.0);
  CHECK(q[3] == 0.0);
  CHECK(q[4] == 0.0);
  CHECK(q[5] == 10.0);
  CHECK(q[6] == 10.0);
  CHECK(q[7] == 0.0);

  // one shared scale drowns the small slice instead
  const auto qt = fake_quant(v, 2, Granularity::per_tensor, true);
  CHECK(qt[1] == 0.0);
  CHECK(qt[2] == 0.0);

  // an all-zero slice passes through even when others are live
  const std::vector<double> vz = {0.0, 0.0, 1.0, 2.0};
  const auto qz = fake_quant(vz, 4, Granularity::per_channel, true, 2);
  CHECK(qz[0] == 0.0);
  CHECK(qz[1] == 0.0);
}

TEST_CASE("fake_quant input validation") {
  const std::vector<double> v = {1.0, 2.0, 3.0, 4.0};
  CHECK_THROWS_AS(fake_quant(std::vector<double>{}, 8, Granularity::per_tensor, true),
                  std::invalid_argument);
  CHECK_THROWS_AS(fake_quant(v, 1, Granularity::per_tensor, true), std::invalid_argument);
  CHECK_THROWS_AS(fake_quant(v, 17, Granularity::per_tensor, true), std::invalid_argument);
  CHECK_THROWS_AS(fake_quant(v, 8, Granularity::per_group, true, 0), std::invalid_argument);
  CHECK_THROWS_AS(fake_quant(v, 8, Granularity::per_group, true, 3), std::invalid_argument);
}

TEST_CASE("asymmetric fake_quant keeps range endpoints") {
  const std::vector<double> v = {0.0, 0.5, 1.0};
  const auto q = fake_quant(v, 2, Granularity::per_tensor, false);
  CHECK(q[0] == 0.0);
  CHECK(q[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(q[2] == doctest::Approx(1.0).epsilon(1e-15));

  const std::vector<double> flat = {3.0, 3.0, 3.0};
  const auto qf = fake_quant(flat, 4, Granularity::per_tensor, false);
  CHECK(qf == flat);
}

TEST_CASE("quantized analytic denoiser quantizes only its output") {
  const NoiseSchedule s = make_linear_beta(1000, 1e-4, 0.02);
  Latent mean(2, 2, 2);
  Rng rng(5);
  for (std::size_t i = 0; i < mean.size(); ++i) mean[i] = rng.normal();
  auto inner = std::make_shared<AnalyticGaussian>(mean, 1.0);
  QuantConfig q;
  q.act_bits = 6;
  auto qd = quantize_denoiser(inner, q);

  Latent x(2, 2, 2);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.normal();
  const Latent raw = inner->predict(x, 400, s);
  const auto expect =
      fake_quant(std::span<const double>(raw.data(), raw.size()), 6,
                 Granularity::per_tensor, true);
  const Latent got = qd->predict(x, 400, s);
  for (std::size_t i = 0; i < raw.size(); ++i) CHECK(got[i] == expect[i]);
  CHECK(qd->channels() == 2);
}

TEST_CASE("quantized mlp is deterministic and converges with bit width") {
  const NoiseSchedule s = make_linear_beta(1000, 1e-4, 0.02);
  auto mlp = std::make_shared<SeededMlp>(1, 2, 2, 16, 77, 1.0);
  Latent x(1, 2, 2);
  Rng rng(6);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.normal();
  const Latent fp = mlp->predict(x, 250, s);

  QuantConfig low;
  low.weight_bits = 4;
  low.act_bits = 4;
  QuantConfig high;
  high.weight_bits = 16;
  high.act_bits = 16;

  auto qlow = quantize_denoiser(mlp, low);
  auto qhigh = quantize_denoiser(mlp, high);
  const Latent ylow = qlow->predict(x, 250, s);
  const Latent ylow2 = qlow->predict(x, 250, s);
  const Latent yhigh = qhigh->predict(x, 250, s);

  double err_low = 0.0, err_high = 0.0;
  bool repeatable = true;
  for (std::size_t i = 0; i < x.size(); ++i) {
    err_low = std::max(err_low, std::fabs(ylow[i] - fp[i]));
    err_high = std::max(err_high, std::fabs(yhigh[i] - fp[i]));
    repeatable = repeatable && ylow[i] == ylow2[i];
  }
  CHECK(repeatable);
  CHECK(err_high < err_low);
  CHECK(err_low > 0.0);

  // per-group weight handling demands a divisible row length
  QuantConfig bad;
  bad.granularity = Granularity::per_group;
  bad.group_size = 7;  // in_dim = 4 + 16 = 20, not divisible
  CHECK_THROWS_AS(quantize_denoiser(mlp, bad), std::invalid_argument);

  QuantConfig grouped;
  grouped.granularity = Granularity::per_group;
  grouped.group_size = 4;
  auto qg = quantize_denoiser(mlp, grouped);
  CHECK(qg->predict(x, 250, s).all_finite());
}

TEST_CASE("kstar table lookup") {
  KStarTable k;
  k.ts = {10, 5};
  k.channels = 2;
  k.values = {0.1, -0.2, 0.3, 0.4};
  const auto r = k.row(5);
  REQUIRE(r.size() == 2);
  CHECK(r[0] == 0.3);
  CHECK(r[1] == 0.4);
  CHECK_THROWS_AS(k.row(7), std::out_of_range);
}

TEST_CASE("inject_error kinds") {
  Latent mu(2, 2, 2);
  Rng rng(8);
  for (std::size_t i = 0; i < mu.size(); ++i) mu[i] = rng.normal();

  ErrorModel zero;
  const Latent ez = inject_error(zero, mu, 10, 1);
  for (std::size_t i = 0; i < mu.size(); ++i) CHECK(ez[i] == 0.0);

  ErrorModel g;
  g.kind = ErrorModel::Kind::gaussian;
  g.sigma_t[10] = 0.5;
  g.sigma_t[20] = 0.0;
  g.sigma_t[30] = -1.0;
  const Latent e1 = inject_error(g, mu, 10, 42);
  const Latent e2 = inject_error(g, mu, 10, 42);
  const Latent e3 = inject_error(g, mu, 10, 43);
  bool same = true, differ = false;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    same = same && e1[i] == e2[i];
    differ = differ || e1[i] != e3[i];
  }
  CHECK(same);
  CHECK(differ);
  const Latent e0 = inject_error(g, mu, 20, 42);
  for (std::size_t i = 0; i < mu.size(); ++i) CHECK(e0[i] == 0.0);
  CHECK_THROWS_AS(inject_error(g, mu, 11, 42), std::out_of_range);
  CHECK_THROWS_AS(inject_error(g, mu, 30, 42), std::invalid_argument);

  ErrorModel fq;
  fq.kind = ErrorModel::Kind::fake_quant;
  CHECK_THROWS_AS(inject_error(fq, mu, 10, 42), std::invalid_argument);
}

TEST_CASE("scaled_output error is exactly K* times the perturbed output") {
  const NoiseSchedule s = make_linear_beta(1000, 1e-4, 0.02);
  Latent mean(4, 3, 3);
  Rng rng(9);
  for (std::size_t i = 0; i < mean.size(); ++i) mean[i] = rng.normal();
  const AnalyticGaussian fp(mean, 1.0);

  ErrorModel m;
  m.kind = ErrorModel::Kind::scaled_output;
  m.kstar.ts = {600};
  m.kstar.channels = 4;
  m.kstar.values = {0.10, -0.05, 0.08, 0.12};

  Latent x(4, 3, 3);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.normal();
  const ModelEval ev = apply_error_model(m, fp, x, 600, s, 0);

  const int hw = 9;
  for (int c = 0; c < 4; ++c) {
    const double k = m.kstar.values[static_cast<std::size_t>(c)];
    for (int i = 0; i < hw; ++i) {
      const std::size_t idx = static_cast<std::size_t>(c) * hw + i;
      CHECK(ev.eps[idx] == k * ev.mu_tilde[idx]);
      CHECK(ev.mu_tilde[idx] == ev.mu[idx] + ev.eps[idx]);
    }
  }

  // channel mismatch is rejected
  std::vector<double> two = {0.1, 0.2};
  CHECK_THROWS_AS(scaled_output_mu_tilde(ev.mu, two), std::invalid_argument);
}

TEST_CASE("apply_error_model covers the remaining kinds") {
  const NoiseSchedule s = make_linear_beta(1000, 1e-4, 0.02);
  Latent mean(1, 2, 2);
  auto fp = std::make_shared<AnalyticGaussian>(mean, 1.0);

  Latent x(1, 2, 2);
  Rng rng(10);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.normal();

  ErrorModel zero;
  const ModelEval evz = apply_error_model(zero, *fp, x, 100, s, 0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(evz.eps[i] == 0.0);
    CHECK(evz.mu_tilde[i] == evz.mu[i]);
  }

  ErrorModel fq;
  fq.kind = ErrorModel::Kind::fake_quant;
  CHECK_THROWS_AS(apply_error_model(fq, *fp, x, 100, s, 0), std::invalid_argument);
  QuantConfig q;
  q.act_bits = 5;
  fq.quantized = quantize_denoiser(fp, q);
  const ModelEval evq = apply_error_model(fq, *fp, x, 100, s, 0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(evq.mu_tilde[i] == evq.mu[i] + evq.eps[i]);
  }
}
