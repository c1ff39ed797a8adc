// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"

#include <cmath>
#include <stdexcept>

#include "qeprop/schedule.hpp"

using namespace qeprop;

TEST_CASE("linear beta schedule endpoints and monotonicity") {
  const NoiseSchedule s = make_linear_beta(1000, 1e-4, 0.02);
  REQUIRE(s.T == 1000);
  REQUIRE(static_cast<int>(s.beta.size()) == 1000);
  REQUIRE(static_cast<int>(s.alpha.size()) == 1001);

  CHECK(s.beta.front() == 1e-4);
  CHECK(s.beta.back() == doctest::Approx(0.02).epsilon(1e-15));
  CHECK(s.alpha[0] == 1.0);
  for (int t = 1; t <= s.T; ++t) {
    CHECK(s.alpha[t] < s.alpha[t - 1]);
    CHECK(s.alpha[t] > 0.0);
  }

  // alpha[2] recomputed from the two betas directly
  const double expect = (1.0 - s.beta[0]) * (1.0 - s.beta[1]);
  CHECK(s.alpha_at(2) == doctest::Approx(expect).epsilon(1e-16));
}

TEST_CASE("schedule constructor rejects bad parameters") {
  CHECK_THROWS_AS(make_linear_beta(1, 1e-4, 0.02), std::invalid_argument);
  CHECK_THROWS_AS(make_linear_beta(100, 0.0, 0.02), std::invalid_argument);
  CHECK_THROWS_AS(make_linear_beta(100, 0.03, 0.02), std::invalid_argument);
  CHECK_THROWS_AS(make_linear_beta(100, 1e-4, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(make_linear_beta(100, -0.1, 0.02), std::invalid_argument);
}

TEST_CASE("alpha_at range checks") {
  const NoiseSchedule s = make_linear_beta(10, 0.01, 0.02);
  CHECK(s.alpha_at(0) == 1.0);
  CHECK(s.alpha_at(10) > 0.0);
  CHECK_THROWS_AS(s.alpha_at(-1), std::out_of_range);
  CHECK_THROWS_AS(s.alpha_at(11), std::out_of_range);
}

TEST_CASE("step plan layout for 50 of 1000") {
  const NoiseSchedule s = make_linear_beta(1000, 1e-4, 0.02);
  const StepPlan plan = make_step_plan(s, 50);
  REQUIRE(plan.n() == 50);
  CHECK(plan.steps.front() == 1000);
  CHECK(plan.steps.back() == 20);
  for (int i = 0; i < 50; ++i) CHECK(plan.steps[i] == 1000 - 20 * i);

  CHECK(plan.contains(1000));
  CHECK(plan.contains(20));
  CHECK(!plan.contains(19));
  CHECK(plan.index_of(960) == 2);
  CHECK_THROWS_AS(plan.index_of(961), std::out_of_range);

  CHECK(plan.below(1000) == 980);
  CHECK(plan.below(20) == 0);
  CHECK(plan.above(980) == 1000);
  CHECK(!plan.has_above(1000));
  CHECK(plan.has_above(980));
  CHECK_THROWS_AS(plan.above(1000), std::out_of_range);
}

TEST_CASE("step plan with non-divisible counts stays positive and decreasing") {
  const NoiseSchedule s = make_linear_beta(10, 0.01, 0.02);
  const StepPlan plan = make_step_plan(s, 3);
  REQUIRE(plan.n() == 3);
  CHECK(plan.steps[0] == 10);
  CHECK(plan.steps[1] == 7);
  CHECK(plan.steps[2] == 4);
  CHECK_THROWS_AS(make_step_plan(s, 0), std::invalid_argument);
  CHECK_THROWS_AS(make_step_plan(s, 11), std::invalid_argument);
}

TEST_CASE("ddim coefficients against direct evaluation") {
  // constant beta = 0.1 gives alpha_t = 0.9^t
  const NoiseSchedule s = make_linear_beta(6, 0.1, 0.1);
  const DdimCoeffs c = ddim_coeffs(s, 2, 1);
  CHECK(c.a == doctest::Approx(1.0540925533894598).epsilon(1e-14));
  CHECK(c.B == doctest::Approx(-0.1432405257195028).epsilon(1e-14));

  // landing on t_prev = 0 uses alpha = 1
  const DdimCoeffs c0 = ddim_coeffs(s, 1, 0);
  CHECK(c0.a == doctest::Approx(1.0 / std::sqrt(0.9)).epsilon(1e-14));
  CHECK(c0.B == doctest::Approx(-std::sqrt(0.1) / std::sqrt(0.9)).epsilon(1e-14));

  CHECK_THROWS_AS(ddim_coeffs(s, 1, 1), std::out_of_range);
  CHECK_THROWS_AS(ddim_coeffs(s, 0, 1), std::out_of_range);
  CHECK_THROWS_AS(ddim_coeffs(s, 7, 1), std::out_of_range);
}

TEST_CASE("constant-alpha schedule has zero B on every step") {
  NoiseSchedule s;
  s.T = 5;
  s.beta.assign(5, 0.0);
  s.alpha.assign(6, 1.0);
  StepPlan plan;
  plan.steps = {5, 4, 3, 2, 1};
  for (int t : plan.steps) {
    const DdimCoeffs c = ddim_coeffs(s, t, plan.below(t));
    CHECK(c.a == 1.0);
    CHECK(c.B == 0.0);
  }
}

TEST_CASE("fingerprints are stable and sensitive") {
  const NoiseSchedule s1 = make_linear_beta(1000, 1e-4, 0.02);
  const NoiseSchedule s2 = make_linear_beta(1000, 1e-4, 0.02);
  const NoiseSchedule s3 = make_linear_beta(1000, 1e-4, 0.021);
  CHECK(schedule_fingerprint(s1) == schedule_fingerprint(s2));
  CHECK(schedule_fingerprint(s1) != schedule_fingerprint(s3));
  CHECK(schedule_fingerprint(s1).size() == 16);

  const StepPlan p1 = make_step_plan(s1, 50);
  const StepPlan p2 = make_step_plan(s1, 50);
  const StepPlan p3 = make_step_plan(s1, 25);
  CHECK(plan_fingerprint(p1) == plan_fingerprint(p2));
  CHECK(plan_fingerprint(p1) != plan_fingerprint(p3));
}
