// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "qeprop/calibration.hpp"
#include "qeprop/denoiser.hpp"
#include "qeprop/latent.hpp"
#include "qeprop/quantizer.hpp"
#include "qeprop/rng.hpp"
#include "qeprop/schedule.hpp"
#include "qeprop/solvers.hpp"
#include "qeprop/util.hpp"

using namespace qeprop;

namespace {

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Latent scalar_latent(double v) {
  Latent x(1, 1, 1);
  x[0] = v;
  return x;
}

ErrorModel gaussian_model(const StepPlan& plan, double sigma) {
  ErrorModel m;
  m.kind = ErrorModel::Kind::gaussian;
  for (int t : plan.steps) m.sigma_t[t] = sigma;
  return m;
}

ScalingMatrix kstar_matrix(const StepPlan& plan, const NoiseSchedule& s,
                           const std::vector<double>& kstar) {
  ScalingMatrix k;
  k.ts = plan.steps;
  k.channels = static_cast<int>(kstar.size());
  for (int i = 0; i < plan.n(); ++i) {
    for (double v : kstar) k.values.push_back(v);
  }
  k.schedule_fp = schedule_fingerprint(s);
  k.plan_fp = plan_fingerprint(plan);
  return k;
}

}  // namespace

TEST_CASE("ddim step value and validation") {
  const NoiseSchedule s = make_linear_beta(1000, 1e-4, 0.02);
  const Latent one = scalar_latent(1.0);
  const Latent out = ddim_step(one, one, s, 1000, 980);
  CHECK(out[0] == doctest::Approx(0.99999453948534778).epsilon(1e-14));

  const DdimCoeffs d = ddim_coeffs(s, 1000, 980);
  CHECK(out[0] == d.a + d.B);

  Latent wrong(1, 1, 2);
  CHECK_THROWS_AS(ddim_step(one, wrong, s, 1000, 980), std::invalid_argument);
  CHECK_THROWS_AS(ddim_step(one, one, s, 980, 1000), std::out_of_range);
}

TEST_CASE("f parameterization") {
  const NoiseSchedule s = make_linear_beta(1000, 1e-4, 0.02);
  Latent mu(1, 1, 2);
  mu[0] = 0.4;
  mu[1] = -1.1;
  const Latent f = f_from_mu(mu, s, 300);
  const double root = std::sqrt(1.0 - s.alpha_at(300));
  CHECK(f[0] == -0.4 / root);
  CHECK(f[1] == -(-1.1) / root);
  CHECK_THROWS_AS(f_from_mu(mu, s, 0), std::invalid_argument);

  Latent mean(1, 1, 2);
  const AnalyticGaussian d(mean, 1.0);
  Latent x(1, 1, 2);
  x[0] = 0.2;
  x[1] = 0.9;
  const Latent fe = f_eval(d, x, 300, s);
  const Latent fm = f_from_mu(d.predict(x, 300, s), s, 300);
  CHECK(fe[0] == fm[0]);
  CHECK(fe[1] == fm[1]);
}

TEST_CASE("one dpm++ step from unit state") {
  const NoiseSchedule s = make_linear_beta(1000, 1e-4, 0.02);
  const StepPlan plan = make_step_plan(s, 20);
  const AnalyticGaussian d(Latent(1, 1, 1), 1.0);

  // manual two-stage evaluation
  const Latent x = scalar_latent(1.0);
  const double dt = 50.0 / 1000.0;
  const Latent f1 = f_eval(d, x, 1000, s);
  Latent mid = x;
  mid[0] += dt * f1[0];
  const Latent f2 = f_eval(d, mid, 950, s);
  const Latent next = dpmpp2_step(x, f1, f2, dt);
  CHECK(next[0] == doctest::Approx(0.95125).epsilon(1e-12));

  // the sampler's first state reproduces the manual step bitwise
  SamplerSetup setup;
  setup.fp = &d;
  setup.s = &s;
  setup.plan = &plan;
  setup.solver = Solver::dpmpp2;
  setup.variant = Variant::fp;
  const TrajectoryRecord rec = run_sampler(setup, x, 0);
  CHECK(rec.states[1][0] == next[0]);

  Latent bad(1, 1, 2);
  CHECK_THROWS_AS(dpmpp2_step(x, f1, bad, dt), std::invalid_argument);
}

TEST_CASE("dpm++ propagation matrices are exact for an affine model") {
  const NoiseSchedule s = make_linear_beta(1000, 1e-4, 0.02);
  Latent mean(1, 2, 2);
  Rng rng(55);
  for (std::size_t i = 0; i < mean.size(); ++i) mean[i] = rng.normal();
  const AnalyticGaussian d(mean, 0.9);

  Latent x(1, 2, 2);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.normal();
  const int t = 500;
  const double dt = 0.05;
  const DpmCoeffs c = dpmpp_prop_coeffs(d, x, t, dt, s);
  CHECK(c.t_stage == 450);
  CHECK(c.jf_scalar);
  const double jf_expect =
      -AnalyticGaussian(mean, 0.9).c_t(s, t) / std::sqrt(1.0 - s.alpha_at(t));
  CHECK(c.jf1 == doctest::Approx(jf_expect).epsilon(1e-15));

  auto phi = [&](const Latent& y) {
    const Latent f1 = f_eval(d, y, t, s);
    Latent mid = y;
    for (std::size_t i = 0; i < mid.size(); ++i) mid[i] += dt * f1[i];
    const Latent f2 = f_eval(d, mid, c.t_stage, s);
    return dpmpp2_step(y, f1, f2, dt);
  };

  Latent dv(1, 2, 2);
  for (std::size_t i = 0; i < dv.size(); ++i) dv[i] = rng.normal();
  const Latent lhs = phi(x + dv) - phi(x);
  const Latent rhs = c.apply_A(dv);
  for (std::size_t i = 0; i < dv.size(); ++i) {
    CHECK(lhs[i] == doctest::Approx(rhs[i]).epsilon(1e-12));
  }

  CHECK_THROWS_AS(dpmpp_prop_coeffs(d, x, 0, dt, s), std::invalid_argument);
  CHECK_THROWS_AS(dpmpp_prop_coeffs(d, x, t, 0.0, s), std::invalid_argument);
}

TEST_CASE("dpm++ matrices collapse to identity forms at zero jacobian") {
  const NoiseSchedule s = make_linear_beta(1000, 1e-4, 0.02);
  const SeededMlp zero(1, 2, 2, 8, 3, 0.0);
  Latent x(1, 2, 2);
  x[0] = 0.5;
  const double dt = 0.05;
  const DpmCoeffs c = dpmpp_prop_coeffs(zero, x, 500, dt, s);
  CHECK(!c.jf_scalar);
  for (int r = 0; r < c.dim; ++r) {
    for (int col = 0; col < c.dim; ++col) {
      const std::size_t idx = static_cast<std::size_t>(r) * c.dim + col;
      CHECK(c.A[idx] == (r == col ? 1.0 : 0.0));
      CHECK(c.B[idx] == (r == col ? dt : 0.0));
    }
  }

  Latent v(1, 2, 2);
  v[0] = 2.0;
  v[3] = -1.0;
  const Latent av = c.apply_A(v);
  const Latent bv = c.apply_B(v);
  for (std::size_t i = 0; i < v.size(); ++i) {
    CHECK(av[i] == v[i]);
    CHECK(bv[i] == dt * v[i]);
  }
  Latent wrong(1, 1, 2);
  CHECK_THROWS_AS(c.apply_A(wrong), std::invalid_argument);
}

TEST_CASE("dpmpp_gamma weights") {
  const NoiseSchedule s = make_linear_beta(1000, 1e-4, 0.02);
  const StepPlan plan = make_step_plan(s, 20);
  CHECK(dpmpp_gamma(s, plan, 900, 900, 0.0, 0.0) == 1.0);

  const double g = dpmpp_gamma(s, plan, 900, 950, 0.0, 0.0);
  const double expect = std::sqrt(s.alpha_at(plan.below(950))) /
                        std::sqrt(s.alpha_at(plan.below(900)));
  CHECK(g == expect);

  const double damped = dpmpp_gamma(s, plan, 900, 950, 0.5, 2.0);
  CHECK(damped == doctest::Approx(expect * std::exp(-1.0)).epsilon(1e-15));
  CHECK(damped < g);
}

TEST_CASE("quant variant with a zero error model matches fp bitwise") {
  const NoiseSchedule s = make_linear_beta(1000, 1e-4, 0.02);
  const StepPlan plan = make_step_plan(s, 25);
  Latent mean(2, 3, 3);
  Rng rng(17);
  for (std::size_t i = 0; i < mean.size(); ++i) mean[i] = rng.normal();
  const AnalyticGaussian d(mean, 1.0);
  ErrorModel none;

  const Latent xT = normal_latent(rng, 2, 3, 3);
  const TrajectoryRecord fp = run_ddim(d, none, s, plan, xT, 4, Variant::fp);
  const TrajectoryRecord q = run_ddim(d, none, s, plan, xT, 4, Variant::quant);

  REQUIRE(fp.states.size() == static_cast<std::size_t>(plan.n()) + 1);
  REQUIRE(fp.injected_eps.size() == static_cast<std::size_t>(plan.n()));
  for (std::size_t i = 0; i < fp.states.size(); ++i) {
    for (std::size_t j = 0; j < xT.size(); ++j) {
      CHECK(fp.states[i][j] == q.states[i][j]);
    }
  }
  for (const auto& e : fp.injected_eps) CHECK(l2_norm(e) == 0.0);
  for (const auto& c : fp.corrections) CHECK(l2_norm(c) == 0.0);
}

TEST_CASE("tcec with a zero scaling matrix reduces to the quant run") {
  const NoiseSchedule s = make_linear_beta(1000, 1e-4, 0.02);
  const StepPlan plan = make_step_plan(s, 25);
  Latent mean(2, 2, 2);
  Rng rng(18);
  for (std::size_t i = 0; i < mean.size(); ++i) mean[i] = rng.normal();
  const AnalyticGaussian d(mean, 1.0);
  const ErrorModel g = gaussian_model(plan, 0.01);

  ScalingMatrix zero = kstar_matrix(plan, s, {0.0, 0.0});
  const Latent xT = normal_latent(rng, 2, 2, 2);
  const TrajectoryRecord q = run_ddim(d, g, s, plan, xT, 7, Variant::quant);
  const TrajectoryRecord tc = run_ddim_tcec(d, g, zero, s, plan, xT, 7);

  for (std::size_t i = 0; i < q.states.size(); ++i) {
    for (std::size_t j = 0; j < xT.size(); ++j) {
      CHECK(tc.states[i][j] == q.states[i][j]);
    }
  }
}

TEST_CASE("sampler setup validation") {
  const NoiseSchedule s = make_linear_beta(1000, 1e-4, 0.02);
  const StepPlan plan = make_step_plan(s, 10);
  Latent mean(1, 1, 2);
  const AnalyticGaussian d(mean, 1.0);
  const ErrorModel g = gaussian_model(plan, 0.01);
  Latent x2(1, 1, 2);
  x2[0] = 0.5;

  SamplerSetup setup;
  CHECK_THROWS_AS(run_sampler(setup, x2, 0), std::invalid_argument);

  setup.fp = &d;
  setup.s = &s;
  setup.plan = &plan;
  setup.variant = Variant::quant;
  CHECK_THROWS_AS(run_sampler(setup, x2, 0), std::invalid_argument);

  setup.model = &g;
  setup.variant = Variant::tcec;
  CHECK_THROWS_AS(run_sampler(setup, x2, 0), ConfigError);

  ScalingMatrix k = kstar_matrix(plan, s, {0.0});
  k.plan_fp = "0000000000000000";
  setup.k = &k;
  CHECK_THROWS_AS(run_sampler(setup, x2, 0), ConfigError);

  k.plan_fp = plan_fingerprint(plan);
  k.schedule_fp = "0000000000000000";
  CHECK_THROWS_AS(run_sampler(setup, x2, 0), ConfigError);

  // an empty schedule fingerprint skips that check
  k.schedule_fp.clear();
  const TrajectoryRecord ok = run_sampler(setup, x2, 0);
  CHECK(ok.states.size() == static_cast<std::size_t>(plan.n()) + 1);

  CHECK_THROWS_AS(
      run_dpmpp_tcec(d, g, k, s, plan, x2, 0, -0.5), std::invalid_argument);
}

TEST_CASE("oracle correction tracks full precision far better than quant") {
  const NoiseSchedule s = make_linear_beta(1000, 1e-4, 0.02);
  const StepPlan plan = make_step_plan(s, 50);
  Latent mean(2, 4, 4);
  Rng mrng(19);
  for (std::size_t i = 0; i < mean.size(); ++i) mean[i] = mrng.normal();
  const AnalyticGaussian d(mean, 1.0);
  const ErrorModel g = gaussian_model(plan, 0.01);

  std::vector<double> ratios;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(derive_seed("xT", seed));
    const Latent xT = normal_latent(rng, 2, 4, 4);
    const TrajectoryRecord fp = run_ddim(d, g, s, plan, xT, seed, Variant::fp);
    const TrajectoryRecord q = run_ddim(d, g, s, plan, xT, seed, Variant::quant);
    const TrajectoryRecord tc =
        run_ddim(d, g, s, plan, xT, seed, Variant::tcec_oracle);

    const double mq = mse(fp.states.back(), q.states.back());
    const double mt = mse(fp.states.back(), tc.states.back());
    CHECK(mt < mq);
    ratios.push_back(mt / mq);
  }
  CHECK(median_of(ratios) <= 0.5);
}

TEST_CASE("tcec with the planted scaling matrix cancels scaled-output error") {
  const NoiseSchedule s = make_linear_beta(1000, 1e-4, 0.02);
  const StepPlan plan = make_step_plan(s, 50);
  Latent mean(2, 3, 3);
  Rng mrng(20);
  for (std::size_t i = 0; i < mean.size(); ++i) mean[i] = mrng.normal();
  const AnalyticGaussian d(mean, 1.0);

  const std::vector<double> kstar = {0.10, -0.05};
  ErrorModel m;
  m.kind = ErrorModel::Kind::scaled_output;
  m.kstar.ts = plan.steps;
  m.kstar.channels = 2;
  for (int i = 0; i < plan.n(); ++i) {
    m.kstar.values.push_back(kstar[0]);
    m.kstar.values.push_back(kstar[1]);
  }
  const ScalingMatrix k = kstar_matrix(plan, s, kstar);

  Rng rng(derive_seed("xT", 3));
  const Latent xT = normal_latent(rng, 2, 3, 3);
  const TrajectoryRecord fp = run_ddim(d, m, s, plan, xT, 3, Variant::fp);
  const TrajectoryRecord q = run_ddim(d, m, s, plan, xT, 3, Variant::quant);
  const TrajectoryRecord tc = run_ddim_tcec(d, m, k, s, plan, xT, 3);

  CHECK(mse(fp.states.back(), q.states.back()) > 1e-8);
  CHECK(mse(fp.states.back(), tc.states.back()) < 1e-24);
}

TEST_CASE("literal window policy over-corrects") {
  const NoiseSchedule s = make_linear_beta(1000, 1e-4, 0.02);
  const StepPlan plan = make_step_plan(s, 40);
  Latent mean(1, 3, 3);
  Rng mrng(21);
  for (std::size_t i = 0; i < mean.size(); ++i) mean[i] = mrng.normal();
  const AnalyticGaussian d(mean, 1.0);
  const ErrorModel g = gaussian_model(plan, 0.01);

  SamplerSetup base;
  base.fp = &d;
  base.model = &g;
  base.s = &s;
  base.plan = &plan;
  base.variant = Variant::tcec_oracle;

  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(derive_seed("xT", seed));
    const Latent xT = normal_latent(rng, 1, 3, 3);
    const TrajectoryRecord fp = run_ddim(d, g, s, plan, xT, seed, Variant::fp);

    SamplerSetup once = base;
    once.window_policy = WindowPolicy::once;
    SamplerSetup literal = base;
    literal.window_policy = WindowPolicy::literal;
    const TrajectoryRecord a = run_sampler(once, xT, seed);
    const TrajectoryRecord b = run_sampler(literal, xT, seed);

    const double m_once = mse(fp.states.back(), a.states.back());
    const double m_lit = mse(fp.states.back(), b.states.back());
    CHECK(m_once < m_lit);
  }
}

TEST_CASE("dpm++ corrected run improves on the uncorrected one") {
  const NoiseSchedule s = make_linear_beta(1000, 1e-4, 0.02);
  const StepPlan plan = make_step_plan(s, 20);
  Latent mean(2, 4, 4);
  Rng mrng(22);
  for (std::size_t i = 0; i < mean.size(); ++i) mean[i] = mrng.normal();
  const AnalyticGaussian d(mean, 1.0);

  const std::vector<double> kstar = {0.10, -0.05};
  ErrorModel m;
  m.kind = ErrorModel::Kind::scaled_output;
  m.kstar.ts = plan.steps;
  m.kstar.channels = 2;
  for (int i = 0; i < plan.n(); ++i) {
    m.kstar.values.push_back(kstar[0]);
    m.kstar.values.push_back(kstar[1]);
  }
  const ScalingMatrix k = kstar_matrix(plan, s, kstar);

  SamplerSetup fp_setup;
  fp_setup.fp = &d;
  fp_setup.s = &s;
  fp_setup.plan = &plan;
  fp_setup.solver = Solver::dpmpp2;
  fp_setup.variant = Variant::fp;

  SamplerSetup q_setup = fp_setup;
  q_setup.model = &m;
  q_setup.variant = Variant::quant;

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(derive_seed("xT", seed));
    const Latent xT = normal_latent(rng, 2, 4, 4);
    const TrajectoryRecord fp = run_sampler(fp_setup, xT, seed);
    const TrajectoryRecord q = run_sampler(q_setup, xT, seed);
    const TrajectoryRecord tc = run_dpmpp_tcec(d, m, k, s, plan, xT, seed);

    const double mq = mse(fp.states.back(), q.states.back());
    const double mt = mse(fp.states.back(), tc.states.back());
    CHECK(mq > 0.0);
    CHECK(mt < mq);
  }
}

TEST_CASE("non-finite states abort with step context") {
  const NoiseSchedule s = make_linear_beta(1000, 1e-4, 0.02);
  const StepPlan plan = make_step_plan(s, 10);
  SeededMlp d(1, 1, 2, 8, 30, 1.0);
  d.mutable_weights().b3[0] = std::numeric_limits<double>::infinity();
  ErrorModel none;

  Latent xT(1, 1, 2);
  xT[0] = 0.3;
  xT[1] = -0.4;
  CHECK_THROWS_AS(run_ddim(d, none, s, plan, xT, 0, Variant::fp), NumericalAbort);
  try {
    run_ddim(d, none, s, plan, xT, 0, Variant::fp);
  } catch (const NumericalAbort& e) {
    CHECK(e.step_index == 0);
    CHECK(e.t == plan.steps[0]);
  }
}

TEST_CASE("low-rank jacobian factorization") {
  JacobianEstimate twoi;
  twoi.dim = 5;
  twoi.m.assign(25, 0.0);
  for (int i = 0; i < 5; ++i) twoi.at(i, i) = 2.0;

  const LowRankFactors r1 = jacobian_lowrank(twoi, 1);
  CHECK(r1.sv[0] == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(r1.recon_error == doctest::Approx(4.0).epsilon(1e-12));

  const LowRankFactors full = jacobian_lowrank(twoi, 5);
  CHECK(full.recon_error <= 1e-12);
  for (int a = 0; a < 5; ++a) {
    for (int b = 0; b < 5; ++b) {
      CHECK(std::fabs(full.reconstruct(a, b) - (a == b ? 2.0 : 0.0)) <= 1e-12);
    }
  }

  JacobianEstimate ones;
  ones.dim = 3;
  ones.m.assign(9, 1.0);
  const LowRankFactors lr = jacobian_lowrank(ones, 1);
  CHECK(lr.sv[0] == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(lr.recon_error <= 1e-12);
  CHECK(std::fabs(lr.reconstruct(1, 2) - 1.0) <= 1e-12);

  CHECK_THROWS_AS(jacobian_lowrank(twoi, 0), std::invalid_argument);
  CHECK_THROWS_AS(jacobian_lowrank(twoi, 6), std::invalid_argument);
  JacobianEstimate empty;
  CHECK_THROWS_AS(jacobian_lowrank(empty, 1), std::invalid_argument);
}
