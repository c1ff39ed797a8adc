// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>

#include "qeprop/config.hpp"

namespace qeprop {

// Parsed global/subcommand CLI flags. `out_dir` overrides the config value;
// empty string means "not given".
struct CliOptions {
  std::string out_dir;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int threads = 1;
  std::string k_file;  // run: K input; calibrate: K output; verify: file to audit
  int samples = -1;    // calibrate override
  std::string lambda;  // calibrate override (empirical | grid | number)
};

// Each returns the process exit code (0 ok, 1 verification failure; config
// and numerical failures surface as ConfigError / NumericalAbort).
int cmd_schedule(const ExperimentConfig& cfg, const CliOptions& opt);
int cmd_calibrate(const ExperimentConfig& cfg, const CliOptions& opt);
int cmd_run(const ExperimentConfig& cfg, const CliOptions& opt);
int cmd_verify(const ExperimentConfig& cfg, const CliOptions& opt);
int cmd_bounds(const ExperimentConfig& cfg, const CliOptions& opt);

}  // namespace qeprop
