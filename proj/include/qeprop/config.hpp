// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "qeprop/denoiser.hpp"
#include "qeprop/quantizer.hpp"
#include "qeprop/schedule.hpp"
#include "qeprop/solvers.hpp"
#include "qeprop/trajectory.hpp"

namespace qeprop {

// Flat `section.key = value` experiment configuration. Every field has a
// default, so an empty file is a valid config; unknown keys are rejected.
struct ExperimentConfig {
  // latent.*
  int channels = 4;
  int height = 8;
  int width = 8;

  // schedule.*
  int T = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;

  // sampler.*
  int steps = 50;
  std::string solver = "ddim";  // ddim | dpmpp2
  double lambda_decay = 0.0;

  // denoiser.*
  std::string denoiser_kind = "analytic_gaussian";  // analytic_gaussian | seeded_mlp
  double mean = 0.0;
  double scale = 1.0;
  std::uint64_t model_seed = 1234;
  int hidden_width = 64;
  double output_scale = 1.0;

  // quant.*
  int weight_bits = 8;
  int act_bits = 8;
  std::string granularity = "per_tensor";  // per_tensor | per_channel | per_group
  int group_size = 16;

  // error.*
  std::string error_kind = "scaled_output";  // zero | gaussian | scaled_output | fake_quant
  double sigma = 0.01;
  std::vector<double> kstar = {0.10, -0.05, 0.08, 0.12};  // cycled over channels

  // calibration.*
  int samples = 64;
  std::string lambda_mode = "empirical";  // empirical | grid | <number>
  double holdout = 0.25;
  std::vector<double> lambda_grid = {0.0, 1e-4, 1e-3, 1e-2, 1e-1, 1.0};

  // run.*
  std::vector<std::string> variants = {"fp", "quant", "tcec"};
  std::uint64_t seed_begin = 0;
  std::uint64_t seed_end = 19;  // inclusive

  // tcec.*
  std::string window_policy = "once";  // once | literal

  // output.*
  bool svg = false;
  std::string out_dir = "out";

  std::string fingerprint() const;
};

// Both throw ConfigError on unknown keys, malformed lines, or out-of-range
// values. Values are validated as a whole after the last line is applied.
ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig load_config(const std::string& path);

// Object factories. Each validates the relevant config subset again so they
// are safe to call on hand-built configs.
NoiseSchedule make_schedule(const ExperimentConfig& cfg);
StepPlan make_plan(const ExperimentConfig& cfg, const NoiseSchedule& s);
std::shared_ptr<Denoiser> make_denoiser(const ExperimentConfig& cfg);
QuantConfig make_quant_config(const ExperimentConfig& cfg);

// Builds the error model over the plan's timesteps: gaussian gets a constant
// sigma row, scaled_output a K* table cycling the configured pattern over
// channels, fake_quant a quantized wrapper of `fp`.
ErrorModel make_error_model(const ExperimentConfig& cfg,
                            std::shared_ptr<const Denoiser> fp,
                            const StepPlan& plan);

Solver parse_solver(const std::string& name);
Variant parse_variant(const std::string& name);
WindowPolicy parse_window_policy(const std::string& name);
std::vector<Variant> config_variants(const ExperimentConfig& cfg);

}  // namespace qeprop
