// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <cmath>
#include <stdexcept>

#include "qeprop/denoiser.hpp"
#include "qeprop/latent.hpp"
#include "qeprop/rng.hpp"
#include "qeprop/schedule.hpp"

using namespace qeprop;

namespace {

// predict = sin(x) elementwise, so the Jacobian is diag(cos(x)).
class SinDenoiser : public Denoiser {
 public:
  SinDenoiser(int c, int h, int w) : c_(c), h_(h), w_(w) {}
  Latent predict(const Latent& x, int, const NoiseSchedule&) const override {
    Latent out(x.channels(), x.height(), x.width());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::sin(x[i]);
    return out;
  }
  int channels() const override { return c_; }
  int height() const override { return h_; }
  int width() const override { return w_; }

 private:
  int c_, h_, w_;
};

}  // namespace

TEST_CASE("analytic gaussian matches the MMSE regression of eps on x_t") {
  const NoiseSchedule s = make_linear_beta(1000, 1e-4, 0.02);
  const int t = 500;
  const double mu0 = 0.7;
  const double scale = 1.3;
  Latent mean(1, 1, 1);
  mean[0] = mu0;
  const AnalyticGaussian d(mean, scale);

  const double at = s.alpha_at(t);
  const double sq = std::sqrt(at);
  const double root = std::sqrt(1.0 - at);

  // Simulate the forward process and regress eps on x_t. The conditional
  // mean is linear, so OLS recovers c_t and -c_t sqrt(alpha) mu0.
  Rng rng(20240915ULL);
  const int n = 100000;
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x0 = mu0 + scale * rng.normal();
    const double eps = rng.normal();
    const double xt = sq * x0 + root * eps;
    sx += xt;
    sy += eps;
    sxx += xt * xt;
    sxy += xt * eps;
  }
  const double mx = sx / n, my = sy / n;
  const double slope = (sxy / n - mx * my) / (sxx / n - mx * mx);
  const double intercept = my - slope * mx;

  const double ct = d.c_t(s, t);
  CHECK(std::fabs(slope - ct) < 1e-2);
  CHECK(std::fabs(intercept - (-ct * sq * mu0)) < 1e-2);

  // predict() evaluates the same conditional mean.
  Latent x(1, 1, 1);
  x[0] = 0.42;
  const Latent out = d.predict(x, t, s);
  CHECK(out[0] == doctest::Approx(ct * (0.42 - sq * mu0)).epsilon(1e-15));
}

TEST_CASE("analytic gaussian is affine in x at fixed t") {
  const NoiseSchedule s = make_linear_beta(1000, 1e-4, 0.02);
  Latent mean(2, 3, 3);
  Rng rng(7);
  for (std::size_t i = 0; i < mean.size(); ++i) mean[i] = rng.normal();
  const AnalyticGaussian d(mean, 0.8);

  Latent x(2, 3, 3), y(2, 3, 3);
  for (std::size_t i = 0; i < x.size(); ++i) {
    x[i] = rng.normal();
    y[i] = rng.normal();
  }
  const int t = 640;
  const Latent fx = d.predict(x, t, s);
  const Latent fy = d.predict(y, t, s);
  const double ct = d.c_t(s, t);
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(fx[i] - fy[i] == doctest::Approx(ct * (x[i] - y[i])).epsilon(1e-12));
  }

  double js = 0.0;
  CHECK(d.jacobian_scalar(t, s, &js));
  CHECK(js == ct);
}

TEST_CASE("analytic gaussian input validation") {
  const NoiseSchedule s = make_linear_beta(100, 1e-4, 0.02);
  Latent mean(1, 2, 2);
  const AnalyticGaussian d(mean, 1.0);
  Latent wrong(1, 2, 3);
  CHECK_THROWS_AS(d.predict(wrong, 10, s), std::invalid_argument);
  Latent ok(1, 2, 2);
  CHECK_THROWS_AS(d.predict(ok, 0, s), std::out_of_range);
  CHECK_THROWS_AS(d.predict(ok, 101, s), std::out_of_range);
  CHECK_THROWS_AS(AnalyticGaussian(mean, 0.0), std::invalid_argument);
  CHECK(d.channels() == 1);
  CHECK(d.height() == 2);
  CHECK(d.width() == 2);
}

TEST_CASE("seeded mlp is deterministic and respects output_scale") {
  const NoiseSchedule s = make_linear_beta(1000, 1e-4, 0.02);
  const SeededMlp a(2, 2, 2, 32, 99, 1.0);
  const SeededMlp b(2, 2, 2, 32, 99, 1.0);
  const SeededMlp other(2, 2, 2, 32, 100, 1.0);
  const SeededMlp zero(2, 2, 2, 32, 99, 0.0);

  Latent x(2, 2, 2);
  Rng rng(11);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.normal();

  const Latent ya = a.predict(x, 300, s);
  const Latent yb = b.predict(x, 300, s);
  const Latent yo = other.predict(x, 300, s);
  const Latent yz = zero.predict(x, 300, s);
  bool identical = true, differs = false, all_zero = true;
  for (std::size_t i = 0; i < x.size(); ++i) {
    identical = identical && ya[i] == yb[i];
    differs = differs || ya[i] != yo[i];
    all_zero = all_zero && yz[i] == 0.0;
  }
  CHECK(identical);
  CHECK(differs);
  CHECK(all_zero);
  CHECK(a.dim() == 8);
  CHECK_THROWS_AS(SeededMlp(1, 1, 1, 0, 5, 1.0), std::invalid_argument);
}

TEST_CASE("finite-difference jacobian recovers an analytic diagonal") {
  const NoiseSchedule s = make_linear_beta(100, 1e-4, 0.02);
  const SinDenoiser d(1, 2, 2);
  Latent x(1, 2, 2);
  x[0] = 0.3;
  x[1] = -0.9;
  x[2] = 1.7;
  x[3] = 0.05;

  const JacobianEstimate j = jacobian_fd(d, x, 50, s, 1e-5);
  REQUIRE(j.dim == 4);
  CHECK(j.fd_step == 1e-5);
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) {
      if (r == c) {
        CHECK(std::fabs(j.at(r, c) - std::cos(x[r])) < 1e-9);
      } else {
        CHECK(j.at(r, c) == 0.0);
      }
    }
  }
}

TEST_CASE("central differences converge at second order") {
  const NoiseSchedule s = make_linear_beta(100, 1e-4, 0.02);
  const SinDenoiser d(1, 1, 1);
  Latent x(1, 1, 1);
  x[0] = 0.3;

  const double j_coarse = jacobian_fd(d, x, 50, s, 1e-3).at(0, 0);
  const double j_fine = jacobian_fd(d, x, 50, s, 1e-4).at(0, 0);
  const double ref = std::cos(0.3);
  const double e_coarse = std::fabs(j_coarse - ref);
  const double e_fine = std::fabs(j_fine - ref);
  const double ratio = e_coarse / e_fine;
  CHECK(ratio > 80.0);
  CHECK(ratio < 120.0);
}

TEST_CASE("jacobian dimension cap and default step") {
  const NoiseSchedule s = make_linear_beta(100, 1e-4, 0.02);
  Latent big_mean(1, 32, 17);  // 544 > 512
  const AnalyticGaussian big(big_mean, 1.0);
  Latent bx(1, 32, 17);
  CHECK_THROWS_AS(jacobian_fd(big, bx, 10, s), std::invalid_argument);

  const SinDenoiser d(1, 1, 2);
  Latent zero(1, 1, 2);
  const JacobianEstimate j = jacobian_fd(d, zero, 10, s);
  CHECK(j.fd_step == 1e-4);  // zero latent falls back to unit rms
}

TEST_CASE("power-iteration spectral norm matches SVD") {
  const int n = 6;
  JacobianEstimate j;
  j.dim = n;
  j.m.resize(static_cast<std::size_t>(n) * n);
  Rng rng(4242);
  Eigen::MatrixXd m(n, n);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      const double v = rng.normal();
      j.at(r, c) = v;
      m(r, c) = v;
    }
  }
  Eigen::BDCSVD<Eigen::MatrixXd> svd(m);
  const double expect = svd.singularValues()(0);
  CHECK(jacobian_norm(j) == doctest::Approx(expect).epsilon(1e-8));
}
