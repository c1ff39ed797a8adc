// SPDX-License-Identifier: Apache-2.0
#include <exception>
#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "qeprop/commands.hpp"
#include "qeprop/config.hpp"
#include "qeprop/util.hpp"
#include "qeprop/version.hpp"

int main(int argc, char** argv) {
  CLI::App app{std::string(qeprop::kToolName) + " " + qeprop::kToolVersion +
               ": quantization error propagation and correction toolkit"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  qeprop::CliOptions opt;
  app.add_option("--config", config_path, "experiment config file (flat key = value)");
  app.add_option("--out", opt.out_dir, "output directory (overrides config)");
  CLI::Option* seed_flag = app.add_option("--seed", opt.seed, "base RNG seed");
  app.add_option("--threads", opt.threads, "worker threads for run")
      ->check(CLI::PositiveNumber);

  CLI::App* c_sched = app.add_subcommand(
      "schedule", "emit schedule coefficients and the m-condition table");
  CLI::App* c_cal = app.add_subcommand(
      "calibrate", "fit the per-channel scaling matrix and write the K file");
  c_cal->add_option("--samples", opt.samples, "calibration sample count");
  c_cal->add_option("--lambda", opt.lambda,
                    "ridge lambda1: empirical, grid, or a number");
  c_cal->add_option("--k-file", opt.k_file, "output path for the K file");
  CLI::App* c_run = app.add_subcommand(
      "run", "sample the configured variants and emit per-step metrics");
  c_run->add_option("--k-file", opt.k_file,
                    "K file for corrected variants (default <out>/k_matrix.txt)");
  CLI::App* c_verify = app.add_subcommand(
      "verify", "run the self-contained numerical verification suite");
  c_verify->add_option("--k-file", opt.k_file, "existing K file to audit");
  CLI::App* c_bounds = app.add_subcommand(
      "bounds", "compute the cumulative-error bound report for one run");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  opt.seed_set = seed_flag->count() > 0;

  try {
    const qeprop::ExperimentConfig cfg =
        config_path.empty() ? qeprop::ExperimentConfig{}
                            : qeprop::load_config(config_path);
    if (c_sched->parsed()) return qeprop::cmd_schedule(cfg, opt);
    if (c_cal->parsed()) return qeprop::cmd_calibrate(cfg, opt);
    if (c_run->parsed()) return qeprop::cmd_run(cfg, opt);
    if (c_verify->parsed()) return qeprop::cmd_verify(cfg, opt);
    if (c_bounds->parsed()) return qeprop::cmd_bounds(cfg, opt);
    std::cerr << "error: no subcommand given\n";
    return 2;
  } catch (const qeprop::NumericalAbort& e) {
    std::cerr << "numerical abort: " << e.what() << " (step " << e.step_index
              << ", t=" << e.t << ")\n";
    return 3;
  } catch (const qeprop::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
