// SPDX-License-Identifier: Apache-2.0
#include "qeprop/propagation.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace qeprop {

Latent PropagationCoeffs::apply(const Latent& v) const {
  if (!has_matrix) {
    Latent out = v;
    out *= a;
    return out;
  }
  if (static_cast<int>(v.size()) != dim) {
    throw std::invalid_argument("PropagationCoeffs: vector does not match matrix dim");
  }
  Latent out(v.channels(), v.height(), v.width());
  for (int r = 0; r < dim; ++r) {
    const double* row = A.data() + static_cast<std::size_t>(r) * dim;
    double acc = 0.0;
    for (int c = 0; c < dim; ++c) acc += row[c] * v[static_cast<std::size_t>(c)];
    out[static_cast<std::size_t>(r)] = acc;
  }
  return out;
}

PropagationCoeffs prop_coeffs(const NoiseSchedule& s, int t, int t_prev,
                              const JacobianEstimate* jacobian) {
  const DdimCoeffs d = ddim_coeffs(s, t, t_prev);
  PropagationCoeffs c;
  c.t = t;
  c.t_prev = t_prev;
  c.a = d.a;
  c.B = d.B;
  if (jacobian != nullptr) {
    c.has_matrix = true;
    c.dim = jacobian->dim;
    c.A.assign(static_cast<std::size_t>(c.dim) * c.dim, 0.0);
    for (int r = 0; r < c.dim; ++r) {
      for (int col = 0; col < c.dim; ++col) {
        c.A[static_cast<std::size_t>(r) * c.dim + col] =
            (r == col ? d.a : 0.0) + d.B * jacobian->at(r, col);
      }
    }
  }
  return c;
}

double telescoped_product(const NoiseSchedule& s, const StepPlan& plan, int t,
                          int k, WeightMode mode) {
  if (!plan.contains(t) || !plan.contains(k)) {
    throw std::out_of_range("telescoped_product: t and k must be plan entries");
  }
  if (t > k) throw std::invalid_argument("telescoped_product: needs t <= k");
  if (t == k) return 1.0;
  const double num = std::sqrt(s.alpha_at(plan.below(k)));
  const double den = std::sqrt(s.alpha_at(plan.below(t)));
  return mode == WeightMode::paper ? num / den : den / num;
}

namespace {

const StepErrorRecord* find_record(const std::vector<StepErrorRecord>& records,
                                   int t) {
  for (const auto& r : records) {
    if (r.t == t) return &r;
  }
  return nullptr;
}

}  // namespace

Latent cumulative_error_closed_form(
    const std::vector<StepErrorRecord>& records, const NoiseSchedule& s,
    const StepPlan& plan, int t, WeightMode mode) {
  if (records.empty()) {
    throw std::invalid_argument("cumulative_error_closed_form: no records");
  }
  if (t != 0 && !plan.contains(t)) {
    throw std::out_of_range("cumulative_error_closed_form: t not a state");
  }
  const Latent& ref = records.front().eps;
  Latent delta(ref.channels(), ref.height(), ref.width());
  if (t == plan.steps.front()) return delta;

  // Injections at steps k > t reach state t weighted by the telescoped
  // product starting at the step that lands on t.
  const int t_src = (t == 0) ? plan.steps.back() : plan.above(t);
  for (int i = 0; i < plan.n() && plan.steps[i] >= t_src; ++i) {
    const int k = plan.steps[i];
    const StepErrorRecord* rec = find_record(records, k);
    if (rec == nullptr) {
      throw std::invalid_argument(
          "cumulative_error_closed_form: missing eps record for t=" +
          std::to_string(k));
    }
    const double w = telescoped_product(s, plan, t_src, k, mode);
    const double bk = ddim_coeffs(s, k, plan.below(k)).B;
    const double coef = w * bk;
    for (std::size_t j = 0; j < delta.size(); ++j) delta[j] += coef * rec->eps[j];
  }
  return delta;
}

Latent measure_delta(const TrajectoryRecord& traj_fp,
                     const TrajectoryRecord& traj_q, int t) {
  if (traj_fp.plan.steps != traj_q.plan.steps) {
    throw std::invalid_argument("measure_delta: step plans differ");
  }
  return traj_q.state_at(t) - traj_fp.state_at(t);
}

std::vector<StepErrorRecord> make_step_error_records(
    const TrajectoryRecord& traj_fp, const TrajectoryRecord& traj_q,
    const NoiseSchedule& s, WeightMode mode) {
  const StepPlan& plan = traj_fp.plan;
  const int n = plan.n();
  std::vector<StepErrorRecord> records;
  records.reserve(static_cast<std::size_t>(n) + 1);
  for (int i = 0; i <= n; ++i) {
    StepErrorRecord r;
    if (i < n) {
      r.t = plan.steps[static_cast<std::size_t>(i)];
      r.eps = traj_q.injected_eps[static_cast<std::size_t>(i)];
    } else {
      r.t = 0;
      const Latent& x0 = traj_q.states.front();
      r.eps = Latent(x0.channels(), x0.height(), x0.width());
    }
    r.delta_measured = measure_delta(traj_fp, traj_q, r.t);
    records.push_back(std::move(r));
  }
  for (auto& r : records) {
    r.delta_predicted = cumulative_error_closed_form(records, s, plan, r.t, mode);
  }
  return records;
}

Latent correction_term(const Latent& eps_t, const Latent* eps_next,
                       const NoiseSchedule& s, const StepPlan& plan, int t,
                       int m) {
  if (m < 1) throw std::invalid_argument("correction_term: m must be >= 1");
  if (!plan.contains(t)) {
    throw std::out_of_range("correction_term: t must be a plan entry");
  }
  Latent delta(eps_t.channels(), eps_t.height(), eps_t.width());
  const DdimCoeffs dt = ddim_coeffs(s, t, plan.below(t));
  for (std::size_t j = 0; j < delta.size(); ++j) delta[j] = -dt.B * eps_t[j];

  if (eps_next != nullptr && plan.has_above(t)) {
    if (!eps_next->same_shape(eps_t)) {
      throw std::invalid_argument("correction_term: eps shapes differ");
    }
    const int up = plan.above(t);
    const DdimCoeffs du = ddim_coeffs(s, up, t);
    const double w =
        std::sqrt(s.alpha_at(t)) / std::sqrt(s.alpha_at(plan.below(t)));
    for (std::size_t j = 0; j < delta.size(); ++j) {
      delta[j] -= w * du.B * (*eps_next)[j];
    }
  }
  return delta;
}

double bound_delta0_for_rho(const NoiseSchedule& s, const StepPlan& plan,
                            std::span<const double> rho, double sigma) {
  const int n = plan.n();
  if (static_cast<int>(rho.size()) != n) {
    throw std::invalid_argument("bound_delta0_for_rho: rho size mismatch");
  }
  std::vector<double> suffix(static_cast<std::size_t>(n) + 1, 1.0);
  for (int i = n - 1; i >= 0; --i) {
    suffix[static_cast<std::size_t>(i)] =
        suffix[static_cast<std::size_t>(i) + 1] * rho[static_cast<std::size_t>(i)];
  }
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    const int t = plan.steps[static_cast<std::size_t>(i)];
    const double b = ddim_coeffs(s, t, plan.below(t)).B;
    acc += suffix[static_cast<std::size_t>(i) + 1] * std::fabs(b);
  }
  return sigma * acc;
}

BoundReport bound_suite(const NoiseSchedule& s, const StepPlan& plan,
                        const std::vector<StepErrorRecord>& records,
                        std::span<const double> jacobian_norms) {
  const int n = plan.n();
  if (records.empty() || n == 0) {
    throw std::invalid_argument("bound_suite: empty trajectory");
  }
  if (!jacobian_norms.empty() &&
      static_cast<int>(jacobian_norms.size()) != n) {
    throw std::invalid_argument("bound_suite: jacobian_norms size mismatch");
  }

  BoundReport rep;
  rep.ts = plan.steps;

  std::vector<double> a(static_cast<std::size_t>(n));
  std::vector<double> abs_b(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int t = plan.steps[static_cast<std::size_t>(i)];
    const DdimCoeffs d = ddim_coeffs(s, t, plan.below(t));
    a[static_cast<std::size_t>(i)] = d.a;
    abs_b[static_cast<std::size_t>(i)] = std::fabs(d.B);
  }

  for (int i = 0; i < n; ++i) {
    const int t = plan.steps[static_cast<std::size_t>(i)];
    const StepErrorRecord* rec = find_record(records, t);
    if (rec == nullptr) {
      throw std::invalid_argument("bound_suite: missing record for t=" +
                                  std::to_string(t));
    }
    rep.sigma = std::max(rep.sigma, l2_norm(rec->eps));
  }

  rep.rho.resize(static_cast<std::size_t>(n));
  rep.rho_lt_one.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const double L =
        jacobian_norms.empty() ? 0.0 : jacobian_norms[static_cast<std::size_t>(i)];
    rep.rho[static_cast<std::size_t>(i)] =
        a[static_cast<std::size_t>(i)] + abs_b[static_cast<std::size_t>(i)] * L;
    rep.rho_lt_one[static_cast<std::size_t>(i)] =
        rep.rho[static_cast<std::size_t>(i)] < 1.0;
  }

  rep.eta.assign(static_cast<std::size_t>(n), 0.0);
  for (int i = 1; i < n; ++i) {
    const int t = plan.steps[static_cast<std::size_t>(i)];
    rep.eta[static_cast<std::size_t>(i)] =
        std::sqrt(s.alpha_at(t)) / std::sqrt(s.alpha_at(plan.below(t))) *
        abs_b[static_cast<std::size_t>(i) - 1] * rep.sigma;
  }

  rep.bound_delta0 = bound_delta0_for_rho(s, plan, rep.rho, rep.sigma);

  const StepErrorRecord* final_rec = find_record(records, 0);
  if (final_rec == nullptr) {
    throw std::invalid_argument("bound_suite: missing t=0 record");
  }
  rep.measured_delta0 = l2_norm(final_rec->delta_measured);

  rep.m_condition = m_condition_table(s, plan);
  return rep;
}

std::vector<MConditionEntry> m_condition_table(const NoiseSchedule& s,
                                               const StepPlan& plan) {
  const int n = plan.n();
  std::vector<double> abs_b(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int t = plan.steps[static_cast<std::size_t>(i)];
    abs_b[static_cast<std::size_t>(i)] = std::fabs(ddim_coeffs(s, t, plan.below(t)).B);
  }
  std::vector<MConditionEntry> table;
  table.reserve(static_cast<std::size_t>(3 * n));
  for (int m = 1; m <= 3; ++m) {
    for (int i = 0; i < n; ++i) {
      MConditionEntry e;
      e.m = m;
      e.t = plan.steps[static_cast<std::size_t>(i)];
      double sum = 0.0;
      for (int w = 1; w <= m && i - w >= 0; ++w) {
        sum += abs_b[static_cast<std::size_t>(i - w)];
      }
      e.window_sum = sum;
      e.b_t = abs_b[static_cast<std::size_t>(i)];
      e.holds = sum <= e.b_t;
      table.push_back(e);
    }
  }
  return table;
}

}  // namespace qeprop
