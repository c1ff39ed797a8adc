// SPDX-License-Identifier: Apache-2.0
#include "qeprop/commands.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <thread>
#include <vector>

#include "json.hpp"

#include "qeprop/calibration.hpp"
#include "qeprop/propagation.hpp"
#include "qeprop/report.hpp"
#include "qeprop/solvers.hpp"
#include "qeprop/util.hpp"
#include "qeprop/version.hpp"

namespace qeprop {

namespace {

using json = nlohmann::ordered_json;

// Everything the sampling commands share, built once from the config.
struct Pipeline {
  NoiseSchedule s;
  StepPlan plan;
  std::shared_ptr<Denoiser> fp;
  ErrorModel model;
  Solver solver = Solver::ddim;
  WindowPolicy policy = WindowPolicy::once;
};

Pipeline build_pipeline(const ExperimentConfig& cfg) {
  Pipeline p;
  p.s = make_schedule(cfg);
  p.plan = make_plan(cfg, p.s);
  p.fp = make_denoiser(cfg);
  p.model = make_error_model(cfg, p.fp, p.plan);
  p.solver = parse_solver(cfg.solver);
  p.policy = parse_window_policy(cfg.window_policy);
  return p;
}

std::string resolve_out_dir(const ExperimentConfig& cfg, const CliOptions& opt) {
  return opt.out_dir.empty() ? cfg.out_dir : opt.out_dir;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create output directory '" + dir + "'");
}

Latent seeded_start(const ExperimentConfig& cfg, std::uint64_t seed) {
  Rng rng(derive_seed("xT", seed));
  return normal_latent(rng, cfg.channels, cfg.height, cfg.width, 1.0);
}

// Per-step Jacobian spectral-norm estimates in plan order: the analytic
// scalar when available, else power iteration on a finite-difference
// Jacobian at a seeded probe state.
std::vector<double> probe_jacobian_norms(const Denoiser& d,
                                         const NoiseSchedule& s,
                                         const StepPlan& plan,
                                         const ExperimentConfig& cfg) {
  std::vector<double> out(static_cast<std::size_t>(plan.n()), 0.0);
  Rng rng(derive_seed("probe", 7));
  const Latent probe = normal_latent(rng, cfg.channels, cfg.height, cfg.width, 1.0);
  for (int i = 0; i < plan.n(); ++i) {
    const int t = plan.steps[static_cast<std::size_t>(i)];
    double c = 0.0;
    if (d.jacobian_scalar(t, s, &c)) {
      out[static_cast<std::size_t>(i)] = std::fabs(c);
    } else {
      out[static_cast<std::size_t>(i)] = jacobian_norm(jacobian_fd(d, probe, t, s));
    }
  }
  return out;
}

double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double acc = 0.0;
  for (double x : v) acc += x;
  return acc / static_cast<double>(v.size());
}

json bound_report_json(const BoundReport& rep) {
  json j;
  j["sigma"] = rep.sigma;
  j["bound_delta0"] = rep.bound_delta0;
  j["measured_delta0"] = rep.measured_delta0;
  j["bound_holds"] = rep.measured_delta0 <= rep.bound_delta0;
  bool all_lt = true, any_lt = false;
  for (bool b : rep.rho_lt_one) {
    all_lt = all_lt && b;
    any_lt = any_lt || b;
  }
  j["rho_lt_one_all"] = all_lt;
  j["rho_lt_one_any"] = any_lt;
  j["ts"] = rep.ts;
  j["rho"] = rep.rho;
  j["eta"] = rep.eta;
  json mc = json::array();
  for (const MConditionEntry& e : rep.m_condition) {
    json row;
    row["m"] = e.m;
    row["t"] = e.t;
    row["window_sum"] = e.window_sum;
    row["b_t"] = e.b_t;
    row["holds"] = e.holds;
    mc.push_back(row);
  }
  j["m_condition"] = mc;
  return j;
}

// Deterministic λ1 selection per the config, with optional CLI override.
std::pair<double, std::string> choose_lambda(const ExperimentConfig& cfg,
                                             const CliOptions& opt,
                                             const CalibrationCache& cache) {
  const std::string mode = opt.lambda.empty() ? cfg.lambda_mode : opt.lambda;
  if (mode == "empirical") return {lambda_empirical(cache), "empirical"};
  if (mode == "grid") {
    const auto [best, scores] = grid_search_lambda(
        cache, std::span<const double>(cfg.lambda_grid), cfg.holdout);
    (void)scores;
    return {best, "grid"};
  }
  char* end = nullptr;
  const double x = std::strtod(mode.c_str(), &end);
  if (end == mode.c_str() || *end != '\0' || x < 0.0) {
    throw ConfigError("calibrate: bad lambda '" + mode + "'");
  }
  return {x, "fixed"};
}

std::string k_file_path(const ExperimentConfig& cfg, const CliOptions& opt) {
  if (!opt.k_file.empty()) return opt.k_file;
  return resolve_out_dir(cfg, opt) + "/k_matrix.txt";
}

}  // namespace

int cmd_schedule(const ExperimentConfig& cfg, const CliOptions& opt) {
  const NoiseSchedule s = make_schedule(cfg);
  const StepPlan plan = make_plan(cfg, s);
  const std::shared_ptr<Denoiser> d = make_denoiser(cfg);
  const std::vector<double> lnorms = probe_jacobian_norms(*d, s, plan, cfg);

  std::string out;
  out += "# ";
  out += kToolName;
  out += " ";
  out += kToolVersion;
  out += " schedule report\n# config ";
  out += cfg.fingerprint();
  out += "\nschedule_fp = " + schedule_fingerprint(s);
  out += "\nplan_fp = " + plan_fingerprint(plan);
  out += "\ncolumns: t alpha a B rho_L0 rho_probe\n";
  for (int i = 0; i < plan.n(); ++i) {
    const int t = plan.steps[static_cast<std::size_t>(i)];
    const DdimCoeffs c = ddim_coeffs(s, t, plan.below(t));
    const double rho0 = c.a;
    const double rhoL = c.a + std::fabs(c.B) * lnorms[static_cast<std::size_t>(i)];
    out += std::to_string(t) + " " + fmt17(s.alpha_at(t)) + " " + fmt17(c.a) +
           " " + fmt17(c.B) + " " + fmt17(rho0) + " " + fmt17(rhoL) + "\n";
  }
  out += "m-condition: window sum of |B| over the m prior steps vs |B_t|\n";
  for (const MConditionEntry& e : m_condition_table(s, plan)) {
    out += "m=" + std::to_string(e.m) + " t=" + std::to_string(e.t) +
           " window=" + fmt17(e.window_sum) + " b=" + fmt17(e.b_t) +
           " holds=" + (e.holds ? "yes" : "no") + "\n";
  }

  std::cout << out;
  if (!opt.out_dir.empty() || !cfg.out_dir.empty()) {
    const std::string dir = resolve_out_dir(cfg, opt);
    ensure_dir(dir);
    write_text_file(dir + "/schedule.txt", out);
  }
  return 0;
}

int cmd_calibrate(const ExperimentConfig& cfg, const CliOptions& opt) {
  const Pipeline p = build_pipeline(cfg);
  const int samples = opt.samples > 0 ? opt.samples : cfg.samples;
  const std::uint64_t seed = opt.seed_set ? opt.seed : 0;

  const CalibrationCache cache =
      collect_cache(*p.fp, p.model, samples, p.plan, p.s, seed);
  const auto [lambda1, provenance] = choose_lambda(cfg, opt, cache);
  ScalingMatrix k = solve_k(cache, lambda1);
  k.schedule_fp = schedule_fingerprint(p.s);
  k.plan_fp = plan_fingerprint(p.plan);

  const std::string path = k_file_path(cfg, opt);
  const std::filesystem::path parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) ensure_dir(parent.string());
  write_k_file(k, path);

  std::cout << "calibrate: wrote " << path << "\n";
  std::cout << "calibrate: lambda1 = " << fmt17(lambda1) << " (" << provenance
            << "), samples = " << samples << ", seed = " << seed << "\n";
  return 0;
}

namespace {

// Results of one (seed, variant) pair, produced possibly on a worker thread
// and merged in deterministic seed order afterwards.
struct SeedResult {
  std::map<std::string, std::string> csv_by_variant;
  std::map<std::string, double> final_mse;
  std::map<std::string, double> final_psnr;
  std::map<std::string, std::vector<double>> delta_curve;
};

}  // namespace

int cmd_run(const ExperimentConfig& cfg, const CliOptions& opt) {
  const Pipeline p = build_pipeline(cfg);
  const std::vector<Variant> variants = config_variants(cfg);
  const std::string dir = resolve_out_dir(cfg, opt);
  ensure_dir(dir);

  const bool needs_k =
      std::find(variants.begin(), variants.end(), Variant::tcec) != variants.end();
  ScalingMatrix k;
  if (needs_k) {
    const std::string path = k_file_path(cfg, opt);
    if (!std::filesystem::exists(path)) {
      throw ConfigError("run: scaling-matrix file '" + path +
                        "' not found (run calibrate first)");
    }
    k = read_k_file(path, schedule_fingerprint(p.s), plan_fingerprint(p.plan));
  }

  std::vector<std::uint64_t> seeds;
  for (std::uint64_t sd = cfg.seed_begin; sd <= cfg.seed_end; ++sd) {
    seeds.push_back(sd);
  }
  const std::string config_fp = cfg.fingerprint();

  std::vector<SeedResult> results(seeds.size());
  std::atomic<std::size_t> cursor{0};
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = cursor.fetch_add(1);
      if (i >= seeds.size()) return;
      const std::uint64_t sd = seeds[i];
      const Latent x_T = seeded_start(cfg, sd);

      SamplerSetup setup;
      setup.fp = p.fp.get();
      setup.model = &p.model;
      setup.s = &p.s;
      setup.plan = &p.plan;
      setup.k = needs_k ? &k : nullptr;
      setup.solver = p.solver;
      setup.window_policy = p.policy;
      setup.lambda_decay = cfg.lambda_decay;

      setup.variant = Variant::fp;
      const TrajectoryRecord ref = run_sampler(setup, x_T, sd);

      for (Variant v : variants) {
        setup.variant = v;
        const TrajectoryRecord traj =
            v == Variant::fp ? ref : run_sampler(setup, x_T, sd);
        const std::vector<MetricSample> rows = per_step_metrics(ref, traj);
        SeedResult& r = results[i];
        const std::string name = variant_name(v);
        r.csv_by_variant[name] = metrics_csv_text(rows, config_fp);
        r.final_mse[name] = rows.back().mse;
        r.final_psnr[name] = rows.back().psnr;
        std::vector<double> curve;
        curve.reserve(rows.size());
        for (const MetricSample& m : rows) curve.push_back(m.delta_norm);
        r.delta_curve[name] = std::move(curve);
      }
    }
  };

  const int nthreads = std::max(1, std::min<int>(opt.threads,
                                                 static_cast<int>(seeds.size())));
  if (nthreads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(nthreads));
    for (int i = 0; i < nthreads; ++i) pool.emplace_back(worker);
    for (std::thread& th : pool) th.join();
  }

  // Deterministic merge in seed order.
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    for (const auto& [name, csv] : results[i].csv_by_variant) {
      char fname[64];
      std::snprintf(fname, sizeof fname, "run_seed%llu_%s.csv",
                    static_cast<unsigned long long>(seeds[i]), name.c_str());
      write_text_file(dir + "/" + fname, csv);
    }
  }

  json summary;
  summary["tool"] = std::string(kToolName) + " " + kToolVersion;
  summary["config_fingerprint"] = config_fp;
  summary["schedule_fingerprint"] = schedule_fingerprint(p.s);
  summary["plan_fingerprint"] = plan_fingerprint(p.plan);
  summary["solver"] = cfg.solver;
  summary["error_kind"] = cfg.error_kind;
  summary["seed_begin"] = cfg.seed_begin;
  summary["seed_end"] = cfg.seed_end;

  json per_variant;
  for (Variant v : variants) {
    const std::string name = variant_name(v);
    std::vector<double> fmse, fpsnr;
    std::vector<double> mean_curve;
    for (std::size_t i = 0; i < seeds.size(); ++i) {
      fmse.push_back(results[i].final_mse.at(name));
      fpsnr.push_back(results[i].final_psnr.at(name));
      const std::vector<double>& c = results[i].delta_curve.at(name);
      if (mean_curve.empty()) mean_curve.assign(c.size(), 0.0);
      for (std::size_t q = 0; q < c.size(); ++q) mean_curve[q] += c[q];
    }
    for (double& x : mean_curve) x /= static_cast<double>(seeds.size());
    json vj;
    vj["final_mse"] = fmse;
    vj["final_psnr"] = fpsnr;
    vj["final_mse_mean"] = mean_of(fmse);
    vj["final_mse_median"] = median_of(fmse);
    vj["delta_norm_curve_mean"] = mean_curve;
    per_variant[name] = vj;
  }
  summary["variants"] = per_variant;

  // Paired corrected-vs-uncorrected comparison when both ran.
  const bool has_quant =
      std::find(variants.begin(), variants.end(), Variant::quant) != variants.end();
  const bool has_tcec = needs_k;
  if (has_quant && has_tcec) {
    bool all_improved = true;
    std::vector<double> ratios;
    for (std::size_t i = 0; i < seeds.size(); ++i) {
      const double q = results[i].final_mse.at("quant");
      const double c = results[i].final_mse.at("tcec");
      all_improved = all_improved && c < q;
      ratios.push_back(q > 0.0 ? c / q : 0.0);
    }
    json cmp;
    cmp["improved_every_seed"] = all_improved;
    cmp["mse_ratio_median"] = median_of(ratios);
    summary["tcec_vs_quant"] = cmp;
  }

  // Closed-form consistency and norm bound on the first seed's quant run,
  // when a quant trajectory and error records are available.
  if (has_quant && p.solver == Solver::ddim) {
    const Latent x_T = seeded_start(cfg, seeds.front());
    SamplerSetup setup;
    setup.fp = p.fp.get();
    setup.model = &p.model;
    setup.s = &p.s;
    setup.plan = &p.plan;
    setup.solver = Solver::ddim;
    setup.variant = Variant::fp;
    const TrajectoryRecord ref = run_sampler(setup, x_T, seeds.front());
    setup.variant = Variant::quant;
    const TrajectoryRecord qt = run_sampler(setup, x_T, seeds.front());
    const std::vector<StepErrorRecord> recs =
        make_step_error_records(ref, qt, p.s, WeightMode::recursion);
    // Scalar-linear recursion consistency: exact when the denoiser's
    // Jacobian is a scalar multiple of the identity (or zero).
    double max_rel = 0.0;
    Latent pred(cfg.channels, cfg.height, cfg.width);
    for (int i = 0; i < p.plan.n(); ++i) {
      const int t = p.plan.steps[static_cast<std::size_t>(i)];
      const DdimCoeffs dc = ddim_coeffs(p.s, t, p.plan.below(t));
      double cmu = 0.0;
      const bool has_c = p.fp->jacobian_scalar(t, p.s, &cmu);
      const double a_eff = has_c ? dc.a + dc.B * cmu : dc.a;
      const Latent& eps = qt.injected_eps[static_cast<std::size_t>(i)];
      for (std::size_t q = 0; q < pred.size(); ++q) {
        pred[q] = a_eff * pred[q] + dc.B * eps[q];
      }
      const Latent measured = measure_delta(ref, qt, p.plan.below(t));
      const double denom = std::max(l2_norm(measured), 1e-300);
      max_rel = std::max(l2_norm(pred - measured) / denom, max_rel);
    }
    summary["oracle"] = {{"scalar_recursion_max_rel_err", max_rel},
                         {"seed", seeds.front()}};
    const std::vector<double> lnorms = probe_jacobian_norms(*p.fp, p.s, p.plan, cfg);
    summary["bounds"] = bound_report_json(bound_suite(p.s, p.plan, recs, lnorms));
  }

  write_text_file(dir + "/summary.json", summary.dump(2) + "\n");

  if (cfg.svg) {
    std::vector<ChartSeries> series;
    for (Variant v : variants) {
      if (v == Variant::fp) continue;
      const std::string name = variant_name(v);
      ChartSeries cs;
      cs.label = name;
      for (std::size_t i = 0; i < seeds.size(); ++i) {
        const std::vector<double>& c = results[i].delta_curve.at(name);
        if (cs.y.empty()) cs.y.assign(c.size(), 0.0);
        for (std::size_t q = 0; q < c.size(); ++q) cs.y[q] += c[q];
      }
      for (double& x : cs.y) x /= static_cast<double>(seeds.size());
      series.push_back(std::move(cs));
    }
    write_text_file(dir + "/delta_norms.svg",
                    svg_line_chart(series, "mean delta norm per step"));
  }

  std::cout << "run: wrote " << seeds.size() * variants.size() << " csv files and summary.json to "
            << dir << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// verify

namespace {

struct CheckOutcome {
  json detail;
  bool pass = true;
};

CheckOutcome check_telescoping() {
  Rng rng(derive_seed("verify", 1));
  double max_rel = 0.0;
  const int cases = 100;
  for (int c = 0; c < cases; ++c) {
    const int T = 10 + static_cast<int>(rng.raw() % 991);
    const double bs = 1e-5 + rng.uniform01() * 4e-3;
    const double be = bs + rng.uniform01() * (0.05 - bs);
    const NoiseSchedule s = make_linear_beta(T, bs, be);
    const int n = 1 + static_cast<int>(rng.raw() % static_cast<std::uint64_t>(
                                           std::min(T, 64)));
    const StepPlan plan = make_step_plan(s, n);
    const int i1 = static_cast<int>(rng.raw() % static_cast<std::uint64_t>(n));
    const int i2 = static_cast<int>(rng.raw() % static_cast<std::uint64_t>(n));
    const int hi = std::min(i1, i2);  // smaller index = larger timestep
    const int lo = std::max(i1, i2);
    const int k = plan.steps[static_cast<std::size_t>(hi)];
    const int t = plan.steps[static_cast<std::size_t>(lo)];

    double prod = 1.0;
    for (int idx = hi + 1; idx <= lo; ++idx) {
      const int j = plan.steps[static_cast<std::size_t>(idx)];
      prod *= ddim_coeffs(s, j, plan.below(j)).a;
    }
    // entries j in [t, k) are exactly plan indices (hi, lo]
    const double w_rec = telescoped_product(s, plan, t, k, WeightMode::recursion);
    const double w_pap = telescoped_product(s, plan, t, k, WeightMode::paper);
    max_rel = std::max(max_rel, std::fabs(w_rec - prod) / std::fabs(prod));
    max_rel = std::max(max_rel, std::fabs(w_pap - 1.0 / prod) * std::fabs(prod));
  }
  CheckOutcome out;
  out.pass = max_rel <= 1e-12;
  out.detail = {{"cases", cases}, {"max_rel_err", max_rel},
                {"tolerance", 1e-12}, {"pass", out.pass}};
  return out;
}

CheckOutcome check_recursion_oracle() {
  ExperimentConfig cfg;
  cfg.error_kind = "gaussian";
  cfg.sigma = 0.01;
  const Pipeline p = build_pipeline(cfg);
  const Latent x_T = seeded_start(cfg, 3);

  SamplerSetup setup;
  setup.fp = p.fp.get();
  setup.model = &p.model;
  setup.s = &p.s;
  setup.plan = &p.plan;
  setup.variant = Variant::fp;
  const TrajectoryRecord ref = run_sampler(setup, x_T, 3);
  setup.variant = Variant::quant;
  const TrajectoryRecord qt = run_sampler(setup, x_T, 3);

  // Unroll the one-step recursion with the scalar A = a + B c and with the
  // dense A = a I + B J, and compare each state against the measured drift.
  double max_scalar = 0.0, max_matrix = 0.0;
  const int dim = cfg.channels * cfg.height * cfg.width;
  Latent d_scalar(cfg.channels, cfg.height, cfg.width);
  Latent d_matrix(cfg.channels, cfg.height, cfg.width);
  for (int i = 0; i < p.plan.n(); ++i) {
    const int t = p.plan.steps[static_cast<std::size_t>(i)];
    const DdimCoeffs c = ddim_coeffs(p.s, t, p.plan.below(t));
    double cmu = 0.0;
    if (!p.fp->jacobian_scalar(t, p.s, &cmu)) {
      throw std::logic_error("verify: analytic denoiser lost its Jacobian");
    }
    const Latent& eps = qt.injected_eps[static_cast<std::size_t>(i)];
    const double a_eff = c.a + c.B * cmu;
    for (std::size_t q = 0; q < d_scalar.size(); ++q) {
      d_scalar[q] = a_eff * d_scalar[q] + c.B * eps[q];
    }
    JacobianEstimate je;
    je.dim = dim;
    je.t = t;
    je.m.assign(static_cast<std::size_t>(dim) * dim, 0.0);
    for (int r = 0; r < dim; ++r) je.at(r, r) = cmu;
    const PropagationCoeffs pc = prop_coeffs(p.s, t, p.plan.below(t), &je);
    d_matrix = pc.apply(d_matrix);
    for (std::size_t q = 0; q < d_matrix.size(); ++q) {
      d_matrix[q] += c.B * eps[q];
    }

    const Latent measured = measure_delta(ref, qt, p.plan.below(t));
    const double denom = std::max(l2_norm(measured), 1e-300);
    max_scalar = std::max(max_scalar, l2_norm(d_scalar - measured) / denom);
    max_matrix = std::max(max_matrix, l2_norm(d_matrix - measured) / denom);
  }
  CheckOutcome out;
  out.pass = max_scalar <= 1e-10 && max_matrix <= 1e-12;
  out.detail = {{"max_rel_err_scalar", max_scalar},
                {"tolerance_scalar", 1e-10},
                {"max_rel_err_matrix", max_matrix},
                {"tolerance_matrix", 1e-12},
                {"pass", out.pass}};
  return out;
}

CheckOutcome check_reciprocal_weights() {
  ExperimentConfig cfg;
  cfg.error_kind = "gaussian";
  // The telescoped sum ignores the denoiser's Jacobian, so the matched-mode
  // probe runs a zero-Jacobian model; the drift is then exactly the
  // telescoped sum in one of the two conventions.
  cfg.denoiser_kind = "seeded_mlp";
  cfg.hidden_width = 8;
  cfg.output_scale = 0.0;
  const Pipeline p = build_pipeline(cfg);
  double max_dev = 0.0;
  for (int i = 0; i < p.plan.n(); ++i) {
    for (int j = i; j < p.plan.n(); ++j) {
      const int k = p.plan.steps[static_cast<std::size_t>(i)];
      const int t = p.plan.steps[static_cast<std::size_t>(j)];
      const double w1 = telescoped_product(p.s, p.plan, t, k, WeightMode::paper);
      const double w2 = telescoped_product(p.s, p.plan, t, k, WeightMode::recursion);
      max_dev = std::max(max_dev, std::fabs(w1 * w2 - 1.0));
    }
  }

  // Which convention predicts the measured trajectory drift.
  const Latent x_T = seeded_start(cfg, 5);
  SamplerSetup setup;
  setup.fp = p.fp.get();
  setup.model = &p.model;
  setup.s = &p.s;
  setup.plan = &p.plan;
  setup.variant = Variant::fp;
  const TrajectoryRecord ref = run_sampler(setup, x_T, 5);
  setup.variant = Variant::quant;
  const TrajectoryRecord qt = run_sampler(setup, x_T, 5);
  const std::vector<StepErrorRecord> rec_r =
      make_step_error_records(ref, qt, p.s, WeightMode::recursion);
  const std::vector<StepErrorRecord> rec_p =
      make_step_error_records(ref, qt, p.s, WeightMode::paper);
  const Latent measured = measure_delta(ref, qt, 0);
  const double denom = std::max(l2_norm(measured), 1e-300);
  const double err_r = l2_norm(rec_r.back().delta_predicted - measured) / denom;
  const double err_p = l2_norm(rec_p.back().delta_predicted - measured) / denom;

  CheckOutcome out;
  out.pass = max_dev <= 1e-12 && err_r <= 1e-10 && err_r < err_p;
  out.detail = {{"max_abs_dev", max_dev},
                {"tolerance", 1e-12},
                {"final_rel_err_recursion", err_r},
                {"final_rel_err_paper", err_p},
                {"matched_mode", err_r <= err_p ? "recursion" : "paper"},
                {"pass", out.pass}};
  return out;
}

CalibrationCache random_cache(Rng& rng, int steps, int channels, int samples,
                              int hw) {
  CalibrationCache cache;
  cache.channels = channels;
  cache.height = hw;
  cache.width = hw;
  for (int i = 0; i < steps; ++i) cache.ts.push_back(1000 - 20 * i);
  cache.pairs.resize(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i) {
    for (int sm = 0; sm < samples; ++sm) {
      ModelEval ev;
      ev.mu = normal_latent(rng, channels, hw, hw, 1.0);
      const Latent noise = normal_latent(rng, channels, hw, hw, 1e-3);
      ev.eps = noise;
      ev.mu_tilde = ev.mu + noise;
      cache.pairs[static_cast<std::size_t>(i)].push_back(std::move(ev));
    }
  }
  return cache;
}

CheckOutcome check_k_closed_form() {
  Rng rng(derive_seed("verify", 4));
  const double lambdas[] = {0.01, 1.0, 100.0};
  double max_err = 0.0;
  for (int c = 0; c < 20; ++c) {
    const CalibrationCache cache = random_cache(rng, 4, 3, 6, 4);
    for (double lam : lambdas) {
      const ScalingMatrix k = solve_k(cache, lam);
      for (int row = 0; row < static_cast<int>(cache.ts.size()); ++row) {
        for (int ch = 0; ch < cache.channels; ++ch) {
          const RidgeStats st = ridge_stats(cache, row, ch);
          const double numeric = golden_section_min(st, lam, -0.9, 0.9);
          max_err = std::max(max_err, std::fabs(k.at(row, ch) - numeric));
        }
      }
    }
  }
  CheckOutcome out;
  out.pass = max_err <= 1e-6;
  out.detail = {{"caches", 20},
                {"lambdas", {0.01, 1.0, 100.0}},
                {"max_abs_err", max_err},
                {"tolerance", 1e-6},
                {"pass", out.pass}};
  return out;
}

CheckOutcome check_k_stationarity() {
  Rng rng(derive_seed("verify", 5));
  double max_res = 0.0;
  for (int c = 0; c < 20; ++c) {
    const CalibrationCache cache = random_cache(rng, 4, 3, 6, 4);
    const ScalingMatrix k = solve_k(cache, 0.0);
    for (int row = 0; row < static_cast<int>(cache.ts.size()); ++row) {
      for (int ch = 0; ch < cache.channels; ++ch) {
        const RidgeStats st = ridge_stats(cache, row, ch);
        max_res = std::max(
            max_res, std::fabs(stationarity_residual(st, 0.0, k.at(row, ch))));
      }
    }
  }
  CheckOutcome out;
  out.pass = max_res <= 1e-9;
  out.detail = {{"caches", 20},
                {"max_abs_residual", max_res},
                {"tolerance", 1e-9},
                {"pass", out.pass}};
  return out;
}

// Audits an on-disk K file against a freshly collected cache from the same
// config: each entry must be stationary for the file's own lambda1.
CheckOutcome check_k_file(const ExperimentConfig& cfg, const CliOptions& opt) {
  const Pipeline p = build_pipeline(cfg);
  const ScalingMatrix k = read_k_file(opt.k_file);
  const std::uint64_t seed = opt.seed_set ? opt.seed : 0;
  const CalibrationCache cache =
      collect_cache(*p.fp, p.model, cfg.samples, p.plan, p.s, seed);
  if (k.ts != cache.ts || k.channels != cache.channels) {
    throw ConfigError("verify: K file does not match the configured plan");
  }
  double max_res = 0.0, scale = 0.0;
  for (int row = 0; row < static_cast<int>(cache.ts.size()); ++row) {
    for (int ch = 0; ch < cache.channels; ++ch) {
      const RidgeStats st = ridge_stats(cache, row, ch);
      max_res = std::max(max_res, std::fabs(stationarity_residual(
                                      st, k.lambda1, k.at(row, ch))));
      scale = std::max(scale, st.d);
    }
  }
  // Residual units follow st.d; a correct file sits at rounding level.
  const double tol = std::max(scale, 1.0) * 1e-9;
  CheckOutcome out;
  out.pass = max_res <= tol;
  out.detail = {{"k_file", opt.k_file},
                {"max_abs_residual", max_res},
                {"tolerance", tol},
                {"pass", out.pass}};
  return out;
}

CheckOutcome check_dpmpp_fd() {
  ExperimentConfig cfg;
  cfg.steps = 20;  // dt = 0.05
  const Pipeline p = build_pipeline(cfg);
  const int t = 500;
  const double dt = 0.05;
  const Latent x = seeded_start(cfg, 11);
  const DpmCoeffs co = dpmpp_prop_coeffs(*p.fp, x, t, dt, p.s);
  const int dim = co.dim;
  const int t2 = co.t_stage;

  const auto phi = [&](const Latent& x0, const Latent& fshift) {
    Latent f1 = f_eval(*p.fp, x0, t, p.s);
    f1 += fshift;
    Latent mid(x0.channels(), x0.height(), x0.width());
    for (std::size_t q = 0; q < mid.size(); ++q) mid[q] = x0[q] + dt * f1[q];
    Latent f2 = f_eval(*p.fp, mid, t2, p.s);
    f2 += fshift;
    return dpmpp2_step(x0, f1, f2, dt);
  };

  const Latent zero(cfg.channels, cfg.height, cfg.width);
  const double h = 1e-5;
  double max_a = 0.0, max_b = 0.0;
  for (int col = 0; col < dim; ++col) {
    Latent xp = x, xm = x;
    xp[static_cast<std::size_t>(col)] += h;
    xm[static_cast<std::size_t>(col)] -= h;
    const Latent da = phi(xp, zero) - phi(xm, zero);
    Latent ep(cfg.channels, cfg.height, cfg.width);
    Latent em(cfg.channels, cfg.height, cfg.width);
    ep[static_cast<std::size_t>(col)] = h;
    em[static_cast<std::size_t>(col)] = -h;
    const Latent db = phi(x, ep) - phi(x, em);
    for (int row = 0; row < dim; ++row) {
      const double fd_a = da[static_cast<std::size_t>(row)] / (2.0 * h);
      const double fd_b = db[static_cast<std::size_t>(row)] / (2.0 * h);
      const double ref_a = co.A[static_cast<std::size_t>(row) * dim + col];
      const double ref_b = co.B[static_cast<std::size_t>(row) * dim + col];
      max_a = std::max(max_a, std::fabs(fd_a - ref_a) / std::max(std::fabs(ref_a), 1.0));
      max_b = std::max(max_b, std::fabs(fd_b - ref_b) / std::max(std::fabs(ref_b), 1.0));
    }
  }

  // J = 0 denoiser: A must be exactly the identity and B exactly dt I.
  const SeededMlp zero_model(cfg.channels, cfg.height, cfg.width, 8, 1, 0.0);
  const DpmCoeffs cz = dpmpp_prop_coeffs(zero_model, x, t, dt, p.s);
  bool exact = true;
  for (int r = 0; r < dim && exact; ++r) {
    for (int c = 0; c < dim; ++c) {
      const double eye = r == c ? 1.0 : 0.0;
      if (cz.A[static_cast<std::size_t>(r) * dim + c] != eye ||
          cz.B[static_cast<std::size_t>(r) * dim + c] != dt * eye) {
        exact = false;
        break;
      }
    }
  }

  CheckOutcome out;
  out.pass = max_a <= 1e-4 && max_b <= 1e-4 && exact;
  out.detail = {{"dt", dt},
                {"max_rel_err_A", max_a},
                {"max_rel_err_B", max_b},
                {"tolerance", 1e-4},
                {"zero_jacobian_exact", exact},
                {"pass", out.pass}};
  return out;
}

CheckOutcome check_bound_triangle() {
  Rng rng(derive_seed("verify", 6));
  int holds = 0;
  const int total = 20;
  for (int c = 0; c < total; ++c) {
    ExperimentConfig cfg;
    cfg.error_kind = "gaussian";
    cfg.sigma = 0.005 + rng.uniform01() * 0.02;
    cfg.mean = rng.normal() * 0.5;
    cfg.scale = 0.5 + rng.uniform01();
    cfg.steps = 25;
    const Pipeline p = build_pipeline(cfg);
    const std::uint64_t sd = rng.raw();
    const Latent x_T = seeded_start(cfg, sd);

    SamplerSetup setup;
    setup.fp = p.fp.get();
    setup.model = &p.model;
    setup.s = &p.s;
    setup.plan = &p.plan;
    setup.variant = Variant::fp;
    const TrajectoryRecord ref = run_sampler(setup, x_T, sd);
    setup.variant = Variant::quant;
    const TrajectoryRecord qt = run_sampler(setup, x_T, sd);
    const std::vector<StepErrorRecord> recs =
        make_step_error_records(ref, qt, p.s, WeightMode::recursion);

    // rho_t = ||A_t|| measured: |a + B c| for the affine denoiser.
    double sigma = 0.0;
    std::vector<double> rho_eff(static_cast<std::size_t>(p.plan.n()));
    for (int i = 0; i < p.plan.n(); ++i) {
      const int t = p.plan.steps[static_cast<std::size_t>(i)];
      const DdimCoeffs dc = ddim_coeffs(p.s, t, p.plan.below(t));
      double cmu = 0.0;
      p.fp->jacobian_scalar(t, p.s, &cmu);
      rho_eff[static_cast<std::size_t>(i)] = std::fabs(dc.a + dc.B * cmu);
    }
    for (const StepErrorRecord& r : recs) {
      sigma = std::max(sigma, l2_norm(r.eps));
    }
    const double bound = bound_delta0_for_rho(p.s, p.plan, rho_eff, sigma);
    const double measured = l2_norm(recs.back().delta_measured);
    if (measured <= bound) ++holds;
  }

  // The default schedule has a > 1 on every step, so rho >= 1 throughout.
  ExperimentConfig dflt;
  const NoiseSchedule s = make_schedule(dflt);
  const StepPlan plan = make_plan(dflt, s);
  bool default_all_ge_one = true;
  for (int t : plan.steps) {
    if (ddim_coeffs(s, t, plan.below(t)).a < 1.0) default_all_ge_one = false;
  }

  CheckOutcome out;
  out.pass = holds == total && default_all_ge_one;
  out.detail = {{"holds", holds},
                {"total", total},
                {"rho_lt_one_fails_on_default_schedule", default_all_ge_one},
                {"pass", out.pass}};
  return out;
}

}  // namespace

int cmd_verify(const ExperimentConfig& cfg, const CliOptions& opt) {
  json report;
  report["tool"] = std::string(kToolName) + " " + kToolVersion;
  bool all_pass = true;

  const auto record = [&](const char* name, const CheckOutcome& c) {
    report[name] = c.detail;
    all_pass = all_pass && c.pass;
  };

  record("telescoping", check_telescoping());
  record("recursion_oracle", check_recursion_oracle());
  record("reciprocal_weights", check_reciprocal_weights());
  record("k_closed_form", check_k_closed_form());
  record("k_stationarity", check_k_stationarity());
  if (!opt.k_file.empty()) record("k_file", check_k_file(cfg, opt));
  record("dpmpp_coefficients", check_dpmpp_fd());
  record("bound_triangle", check_bound_triangle());

  report["pass"] = all_pass;
  const std::string text = report.dump(2) + "\n";
  std::cout << text;
  if (!opt.out_dir.empty()) {
    ensure_dir(opt.out_dir);
    write_text_file(opt.out_dir + "/verify.json", text);
  }
  return all_pass ? 0 : 1;
}

int cmd_bounds(const ExperimentConfig& cfg, const CliOptions& opt) {
  const Pipeline p = build_pipeline(cfg);
  const std::uint64_t seed = opt.seed_set ? opt.seed : cfg.seed_begin;
  const Latent x_T = seeded_start(cfg, seed);

  SamplerSetup setup;
  setup.fp = p.fp.get();
  setup.model = &p.model;
  setup.s = &p.s;
  setup.plan = &p.plan;
  setup.solver = Solver::ddim;
  setup.variant = Variant::fp;
  const TrajectoryRecord ref = run_sampler(setup, x_T, seed);
  setup.variant = Variant::quant;
  const TrajectoryRecord qt = run_sampler(setup, x_T, seed);
  const std::vector<StepErrorRecord> recs =
      make_step_error_records(ref, qt, p.s, WeightMode::recursion);
  const std::vector<double> lnorms = probe_jacobian_norms(*p.fp, p.s, p.plan, cfg);
  const BoundReport rep = bound_suite(p.s, p.plan, recs, lnorms);

  json j = bound_report_json(rep);
  j["seed"] = seed;
  j["config_fingerprint"] = cfg.fingerprint();
  const std::string text = j.dump(2) + "\n";
  std::cout << text;
  bool all_lt = true;
  for (bool b : rep.rho_lt_one) all_lt = all_lt && b;
  if (!all_lt) {
    std::cout << "NOTE: rho_t < 1 FAILS on this schedule; the geometric-decay "
                 "premise of the closed-form bound does not apply.\n";
  }
  if (!opt.out_dir.empty() || !cfg.out_dir.empty()) {
    const std::string dir = resolve_out_dir(cfg, opt);
    ensure_dir(dir);
    write_text_file(dir + "/bounds.json", text);
  }
  return 0;
}

}  // namespace qeprop
