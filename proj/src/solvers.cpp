// SPDX-License-Identifier: Apache-2.0
#include "qeprop/solvers.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <deque>
#include <map>
#include <stdexcept>
#include <utility>

#include "qeprop/propagation.hpp"
#include "qeprop/util.hpp"

namespace qeprop {

Latent ddim_step(const Latent& x, const Latent& eps_hat,
                 const NoiseSchedule& s, int t, int t_prev) {
  if (!x.same_shape(eps_hat)) {
    throw std::invalid_argument("ddim_step: shape mismatch");
  }
  const DdimCoeffs d = ddim_coeffs(s, t, t_prev);
  Latent out(x.channels(), x.height(), x.width());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = d.a * x[i] + d.B * eps_hat[i];
  }
  return out;
}

Latent f_from_mu(const Latent& mu, const NoiseSchedule& s, int t) {
  if (t < 1) throw std::invalid_argument("f_from_mu: t must be >= 1");
  const double root = std::sqrt(1.0 - s.alpha_at(t));
  Latent f(mu.channels(), mu.height(), mu.width());
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = -mu[i] / root;
  return f;
}

Latent f_eval(const Denoiser& d, const Latent& x, int t,
              const NoiseSchedule& s) {
  return f_from_mu(d.predict(x, t, s), s, t);
}

Latent dpmpp2_step(const Latent& x, const Latent& f1, const Latent& f2,
                   double dt) {
  if (!x.same_shape(f1) || !x.same_shape(f2)) {
    throw std::invalid_argument("dpmpp2_step: shape mismatch");
  }
  Latent out(x.channels(), x.height(), x.width());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = x[i] + dt / 2.0 * (f1[i] + f2[i]);
  }
  return out;
}

namespace {

Latent dense_apply(const std::vector<double>& m, int dim, const Latent& v) {
  if (static_cast<int>(v.size()) != dim) {
    throw std::invalid_argument("DpmCoeffs: vector does not match matrix dim");
  }
  Latent out(v.channels(), v.height(), v.width());
  for (int r = 0; r < dim; ++r) {
    const double* row = m.data() + static_cast<std::size_t>(r) * dim;
    double acc = 0.0;
    for (int c = 0; c < dim; ++c) acc += row[c] * v[static_cast<std::size_t>(c)];
    out[static_cast<std::size_t>(r)] = acc;
  }
  return out;
}

// Dense Jacobian of f at (x, t): the analytic scalar route when available,
// otherwise finite differences on mu scaled by -1/sqrt(1 - alpha_t).
std::vector<double> dense_jacobian_f(const Denoiser& d, const Latent& x, int t,
                                     const NoiseSchedule& s, int dim) {
  const double root = std::sqrt(1.0 - s.alpha_at(t));
  std::vector<double> m(static_cast<std::size_t>(dim) * dim, 0.0);
  double cmu = 0.0;
  if (d.jacobian_scalar(t, s, &cmu)) {
    const double jf = -cmu / root;
    for (int i = 0; i < dim; ++i) {
      m[static_cast<std::size_t>(i) * dim + i] = jf;
    }
    return m;
  }
  const JacobianEstimate je = jacobian_fd(d, x, t, s);
  for (int r = 0; r < dim; ++r) {
    for (int c = 0; c < dim; ++c) {
      m[static_cast<std::size_t>(r) * dim + c] = -je.at(r, c) / root;
    }
  }
  return m;
}

}  // namespace

Latent DpmCoeffs::apply_A(const Latent& v) const { return dense_apply(A, dim, v); }
Latent DpmCoeffs::apply_B(const Latent& v) const { return dense_apply(B, dim, v); }

DpmCoeffs dpmpp_prop_coeffs(const Denoiser& d, const Latent& x, int t,
                            double dt, const NoiseSchedule& s) {
  if (t < 1) throw std::invalid_argument("dpmpp_prop_coeffs: t must be >= 1");
  if (!(dt > 0.0)) throw std::invalid_argument("dpmpp_prop_coeffs: dt must be > 0");
  const int dim = static_cast<int>(x.size());
  if (dim > kJacobianDimCap) {
    throw std::invalid_argument("dpmpp_prop_coeffs: dimension exceeds Jacobian cap");
  }

  DpmCoeffs c;
  c.t = t;
  c.dt = dt;
  const int t_prev = t - static_cast<int>(std::llround(dt * s.T));
  c.t_stage = std::max(t_prev, 1);
  c.dim = dim;

  double cmu = 0.0;
  c.jf_scalar = d.jacobian_scalar(t, s, &cmu);
  if (c.jf_scalar) c.jf1 = -cmu / std::sqrt(1.0 - s.alpha_at(t));

  const std::vector<double> j1 = dense_jacobian_f(d, x, t, s, dim);
  const Latent f1 = f_eval(d, x, t, s);
  Latent mid(x.channels(), x.height(), x.width());
  for (std::size_t i = 0; i < mid.size(); ++i) mid[i] = x[i] + dt * f1[i];
  const std::vector<double> j2 = dense_jacobian_f(d, mid, c.t_stage, s, dim);

  // p = j2 * j1
  std::vector<double> p(static_cast<std::size_t>(dim) * dim, 0.0);
  for (int r = 0; r < dim; ++r) {
    for (int k = 0; k < dim; ++k) {
      const double v = j2[static_cast<std::size_t>(r) * dim + k];
      if (v == 0.0) continue;
      const double* j1row = j1.data() + static_cast<std::size_t>(k) * dim;
      double* prow = p.data() + static_cast<std::size_t>(r) * dim;
      for (int col = 0; col < dim; ++col) prow[col] += v * j1row[col];
    }
  }

  c.A.resize(static_cast<std::size_t>(dim) * dim);
  c.B.resize(static_cast<std::size_t>(dim) * dim);
  for (int r = 0; r < dim; ++r) {
    for (int col = 0; col < dim; ++col) {
      const std::size_t idx = static_cast<std::size_t>(r) * dim + col;
      const double eye = (r == col) ? 1.0 : 0.0;
      c.A[idx] = eye + dt / 2.0 * (j1[idx] + j2[idx] + dt * p[idx]);
      c.B[idx] = dt / 2.0 * (2.0 * eye + dt * j1[idx]);
    }
  }
  return c;
}

double dpmpp_gamma(const NoiseSchedule& s, const StepPlan& plan, int t, int k,
                   double lambda_decay, double frob_sum) {
  const double ratio = std::sqrt(s.alpha_at(plan.below(k))) /
                       std::sqrt(s.alpha_at(plan.below(t)));
  return ratio * std::exp(-lambda_decay * frob_sum);
}

namespace {

struct StageEval {
  Latent f;       // full-precision value
  Latent f_used;  // value entering the update
  Latent eps_f;   // f_used - f
};

StageEval stage_f(const ErrorModel* model, const Denoiser& fp, const Latent& x,
                  int eval_t, int key_t, int stage, const NoiseSchedule& s,
                  std::uint64_t seed, bool pure) {
  StageEval ev;
  const Latent mu = fp.predict(x, eval_t, s);
  const double root = std::sqrt(1.0 - s.alpha_at(eval_t));
  ev.f = f_from_mu(mu, s, eval_t);
  if (pure || model == nullptr || model->kind == ErrorModel::Kind::zero) {
    ev.f_used = ev.f;
    ev.eps_f = Latent(x.channels(), x.height(), x.width());
    return ev;
  }
  switch (model->kind) {
    case ErrorModel::Kind::gaussian: {
      const auto it = model->sigma_t.find(key_t);
      if (it == model->sigma_t.end()) {
        throw std::out_of_range("run_sampler: no sigma for timestep");
      }
      if (it->second < 0.0) {
        throw std::invalid_argument("run_sampler: negative sigma");
      }
      Rng rng(derive_seed("eps-f", seed,
                          static_cast<std::uint64_t>(key_t) * 4 +
                              static_cast<std::uint64_t>(stage)));
      const Latent eps_mu =
          normal_latent(rng, x.channels(), x.height(), x.width(), it->second);
      ev.eps_f = Latent(x.channels(), x.height(), x.width());
      for (std::size_t i = 0; i < ev.eps_f.size(); ++i) {
        ev.eps_f[i] = -eps_mu[i] / root;
      }
      ev.f_used = ev.f + ev.eps_f;
      return ev;
    }
    case ErrorModel::Kind::scaled_output: {
      const Latent mt = scaled_output_mu_tilde(mu, model->kstar.row(key_t));
      ev.f_used = f_from_mu(mt, s, eval_t);
      ev.eps_f = ev.f_used - ev.f;
      return ev;
    }
    case ErrorModel::Kind::fake_quant: {
      if (!model->quantized) {
        throw std::invalid_argument("run_sampler: missing quantized model");
      }
      const Latent mq = model->quantized->predict(x, eval_t, s);
      ev.f_used = f_from_mu(mq, s, eval_t);
      ev.eps_f = ev.f_used - ev.f;
      return ev;
    }
    case ErrorModel::Kind::zero:
      break;
  }
  throw std::logic_error("run_sampler: unknown error model kind");
}

ModelEval pure_eval(const Denoiser& fp, const Latent& x, int t,
                    const NoiseSchedule& s) {
  ModelEval ev;
  ev.mu = fp.predict(x, t, s);
  ev.mu_tilde = ev.mu;
  ev.eps = Latent(x.channels(), x.height(), x.width());
  return ev;
}

// Scalar J of f at plan entry t, 0 when the denoiser has no scalar Jacobian.
double jf_scalar_at(const Denoiser& d, const NoiseSchedule& s, int t) {
  double cmu = 0.0;
  if (!d.jacobian_scalar(t, s, &cmu)) return 0.0;
  return -cmu / std::sqrt(1.0 - s.alpha_at(t));
}

}  // namespace

TrajectoryRecord run_sampler(const SamplerSetup& setup, const Latent& x_T,
                             std::uint64_t seed) {
  if (setup.fp == nullptr || setup.s == nullptr || setup.plan == nullptr) {
    throw std::invalid_argument("run_sampler: incomplete setup");
  }
  const NoiseSchedule& s = *setup.s;
  const StepPlan& plan = *setup.plan;
  const bool pure = setup.variant == Variant::fp;
  const bool corrected = setup.variant == Variant::tcec ||
                         setup.variant == Variant::tcec_oracle;
  if (!pure && setup.model == nullptr) {
    throw std::invalid_argument("run_sampler: error model required");
  }
  if (setup.variant == Variant::tcec) {
    if (setup.k == nullptr) {
      throw ConfigError("run_sampler: tcec variant requires a scaling matrix");
    }
    if (setup.k->plan_fp != plan_fingerprint(plan)) {
      throw ConfigError("run_sampler: scaling matrix does not match the step plan");
    }
    if (!setup.k->schedule_fp.empty() &&
        setup.k->schedule_fp != schedule_fingerprint(s)) {
      throw ConfigError("run_sampler: scaling matrix does not match the schedule");
    }
  }

  TrajectoryRecord rec;
  rec.plan = plan;
  rec.seed = seed;
  rec.variant = setup.variant;
  rec.solver = setup.solver;
  const int n = plan.n();
  rec.states.reserve(static_cast<std::size_t>(n) + 1);
  rec.denoiser_outputs.reserve(static_cast<std::size_t>(n));
  rec.injected_eps.reserve(static_cast<std::size_t>(n));
  rec.corrections.reserve(static_cast<std::size_t>(n));
  rec.states.push_back(x_T);

  Latent x = x_T;
  std::deque<std::pair<int, Latent>> ring;  // cached eps, newest first
  const std::size_t ring_depth = setup.solver == Solver::ddim ? 1 : 2;
  std::map<int, double> frob_cache;

  // Summed Frobenius norms of the f Jacobians over the plan entries in
  // [t, k]; only evaluated when lambda_decay is nonzero.
  auto frob_sum = [&](int t, int k) {
    if (setup.lambda_decay == 0.0) return 0.0;
    double sum = 0.0;
    for (int idx = plan.index_of(k); idx <= plan.index_of(t); ++idx) {
      const int tj = plan.steps[static_cast<std::size_t>(idx)];
      auto it = frob_cache.find(tj);
      if (it == frob_cache.end()) {
        double frob = 0.0;
        double cmu = 0.0;
        if (setup.fp->jacobian_scalar(tj, s, &cmu)) {
          const double jf = -cmu / std::sqrt(1.0 - s.alpha_at(tj));
          frob = std::fabs(jf) * std::sqrt(static_cast<double>(x.size()));
        } else {
          const JacobianEstimate je = jacobian_fd(*setup.fp, x, tj, s);
          const double root = std::sqrt(1.0 - s.alpha_at(tj));
          double acc = 0.0;
          for (double v : je.m) acc += (v / root) * (v / root);
          frob = std::sqrt(acc);
        }
        it = frob_cache.emplace(tj, frob).first;
      }
      sum += it->second;
    }
    return sum;
  };

  for (int i = 0; i < n; ++i) {
    const int t = plan.steps[static_cast<std::size_t>(i)];
    const int tp = plan.below(t);
    Latent next;
    Latent corr(x.channels(), x.height(), x.width());
    Latent out_rec, eps_rec;

    if (setup.solver == Solver::ddim) {
      ModelEval ev = pure ? pure_eval(*setup.fp, x, t, s)
                          : apply_error_model(*setup.model, *setup.fp, x, t, s,
                                              seed);
      next = ddim_step(x, ev.mu_tilde, s, t, tp);
      if (corrected) {
        Latent eps_src = setup.variant == Variant::tcec
                             ? estimate_eps(*setup.k, ev.mu_tilde, t)
                             : ev.eps;
        const Latent* prev = nullptr;
        if (setup.window_policy == WindowPolicy::literal && !ring.empty()) {
          prev = &ring.front().second;
        }
        corr = correction_term(eps_src, prev, s, plan, t, 1);
        next += corr;
        ring.emplace_front(t, std::move(eps_src));
        while (ring.size() > ring_depth) ring.pop_back();
      }
      out_rec = std::move(ev.mu_tilde);
      eps_rec = std::move(ev.eps);
    } else {
      const int t2 = std::max(tp, 1);
      const double dt = static_cast<double>(t - tp) / static_cast<double>(s.T);
      StageEval e1 = stage_f(setup.model, *setup.fp, x, t, t, 0, s, seed, pure);
      Latent mid(x.channels(), x.height(), x.width());
      for (std::size_t j = 0; j < mid.size(); ++j) {
        mid[j] = x[j] + dt * e1.f_used[j];
      }
      StageEval e2 =
          stage_f(setup.model, *setup.fp, mid, t2, t, 1, s, seed, pure);
      next = dpmpp2_step(x, e1.f_used, e2.f_used, dt);

      if (corrected) {
        Latent eps_src = setup.variant == Variant::tcec
                             ? estimate_eps(*setup.k, e1.f_used, t)
                             : e1.eps_f;
        // Scalar B_k = (dt_k/2)(2 + dt_k J_k); J = 0 when no scalar form.
        auto b_scalar = [&](int k) {
          const int kp = plan.below(k);
          const double dtk =
              static_cast<double>(k - kp) / static_cast<double>(s.T);
          return dtk / 2.0 * (2.0 + dtk * jf_scalar_at(*setup.fp, s, k));
        };
        const double g_t = dpmpp_gamma(s, plan, t, t, setup.lambda_decay,
                                       frob_sum(t, t));
        const double bt = b_scalar(t);
        for (std::size_t j = 0; j < corr.size(); ++j) {
          corr[j] = -g_t * bt * eps_src[j];
        }
        if (setup.window_policy == WindowPolicy::literal) {
          for (const auto& cached : ring) {
            const double g = dpmpp_gamma(s, plan, t, cached.first,
                                         setup.lambda_decay,
                                         frob_sum(t, cached.first));
            const double bk = b_scalar(cached.first);
            for (std::size_t j = 0; j < corr.size(); ++j) {
              corr[j] -= g * bk * cached.second[j];
            }
          }
        }
        next += corr;
        ring.emplace_front(t, std::move(eps_src));
        while (ring.size() > ring_depth) ring.pop_back();
      }
      out_rec = std::move(e1.f_used);
      eps_rec = std::move(e1.eps_f);
    }

    if (!next.all_finite()) {
      throw NumericalAbort("run_sampler: non-finite state value", i, t);
    }
    rec.denoiser_outputs.push_back(std::move(out_rec));
    rec.injected_eps.push_back(std::move(eps_rec));
    rec.corrections.push_back(std::move(corr));
    x = std::move(next);
    rec.states.push_back(x);
  }
  return rec;
}

TrajectoryRecord run_ddim(const Denoiser& fp, const ErrorModel& model,
                          const NoiseSchedule& s, const StepPlan& plan,
                          const Latent& x_T, std::uint64_t seed,
                          Variant variant) {
  SamplerSetup setup;
  setup.fp = &fp;
  setup.model = &model;
  setup.s = &s;
  setup.plan = &plan;
  setup.solver = Solver::ddim;
  setup.variant = variant;
  return run_sampler(setup, x_T, seed);
}

TrajectoryRecord run_ddim_tcec(const Denoiser& fp, const ErrorModel& model,
                               const ScalingMatrix& k, const NoiseSchedule& s,
                               const StepPlan& plan, const Latent& x_T,
                               std::uint64_t seed, WindowPolicy policy) {
  SamplerSetup setup;
  setup.fp = &fp;
  setup.model = &model;
  setup.s = &s;
  setup.plan = &plan;
  setup.k = &k;
  setup.solver = Solver::ddim;
  setup.variant = Variant::tcec;
  setup.window_policy = policy;
  return run_sampler(setup, x_T, seed);
}

TrajectoryRecord run_dpmpp_tcec(const Denoiser& fp, const ErrorModel& model,
                                const ScalingMatrix& k, const NoiseSchedule& s,
                                const StepPlan& plan, const Latent& x_T,
                                std::uint64_t seed, double lambda_decay,
                                WindowPolicy policy) {
  if (lambda_decay < 0.0) {
    throw std::invalid_argument("run_dpmpp_tcec: lambda_decay must be >= 0");
  }
  SamplerSetup setup;
  setup.fp = &fp;
  setup.model = &model;
  setup.s = &s;
  setup.plan = &plan;
  setup.k = &k;
  setup.solver = Solver::dpmpp2;
  setup.variant = Variant::tcec;
  setup.window_policy = policy;
  setup.lambda_decay = lambda_decay;
  return run_sampler(setup, x_T, seed);
}

double LowRankFactors::reconstruct(int row, int col) const {
  double acc = 0.0;
  for (int q = 0; q < r; ++q) {
    acc += u[static_cast<std::size_t>(row) * r + q] * sv[static_cast<std::size_t>(q)] *
           vt[static_cast<std::size_t>(q) * dim + col];
  }
  return acc;
}

LowRankFactors jacobian_lowrank(const JacobianEstimate& j, int r) {
  if (j.dim < 1) throw std::invalid_argument("jacobian_lowrank: empty matrix");
  if (r < 1 || r > j.dim) {
    throw std::invalid_argument("jacobian_lowrank: rank out of range");
  }
  Eigen::MatrixXd m(j.dim, j.dim);
  for (int a = 0; a < j.dim; ++a) {
    for (int b = 0; b < j.dim; ++b) m(a, b) = j.at(a, b);
  }
  Eigen::BDCSVD<Eigen::MatrixXd> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);

  LowRankFactors f;
  f.dim = j.dim;
  f.r = r;
  f.u.resize(static_cast<std::size_t>(j.dim) * r);
  f.sv.resize(static_cast<std::size_t>(r));
  f.vt.resize(static_cast<std::size_t>(r) * j.dim);
  for (int q = 0; q < r; ++q) {
    f.sv[static_cast<std::size_t>(q)] = svd.singularValues()(q);
    for (int a = 0; a < j.dim; ++a) {
      f.u[static_cast<std::size_t>(a) * r + q] = svd.matrixU()(a, q);
      f.vt[static_cast<std::size_t>(q) * j.dim + a] = svd.matrixV()(a, q);
    }
  }
  double acc = 0.0;
  for (int a = 0; a < j.dim; ++a) {
    for (int b = 0; b < j.dim; ++b) {
      const double resid = m(a, b) - f.reconstruct(a, b);
      acc += resid * resid;
    }
  }
  f.recon_error = std::sqrt(acc);
  return f;
}

}  // namespace qeprop
