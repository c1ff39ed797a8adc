// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "qeprop/latent.hpp"
#include "qeprop/schedule.hpp"

namespace qeprop {

enum class Variant { fp, quant, tcec, tcec_oracle };
enum class Solver { ddim, dpmpp2 };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::fp: return "fp";
    case Variant::quant: return "quant";
    case Variant::tcec: return "tcec";
    case Variant::tcec_oracle: return "tcec-oracle";
  }
  return "?";
}

inline const char* solver_name(Solver s) {
  return s == Solver::ddim ? "ddim" : "dpmpp2";
}

// Full log of one sampled trajectory. states[0] is x_T; executing step i
// (source timestep plan.steps[i]) produces states[i+1]. The per-step vectors
// are indexed by step; fp runs store zero latents for eps and corrections.
struct TrajectoryRecord {
  StepPlan plan;
  std::vector<Latent> states;            // plan.n() + 1 entries
  std::vector<Latent> denoiser_outputs;  // one per executed step
  std::vector<Latent> injected_eps;      // one per executed step
  std::vector<Latent> corrections;       // one per executed step
  std::uint64_t seed = 0;
  Variant variant = Variant::fp;
  Solver solver = Solver::ddim;

  // t must be a plan entry or 0 (the final state).
  int state_index(int t) const {
    if (t == 0) return plan.n();
    return plan.index_of(t);
  }
  const Latent& state_at(int t) const {
    return states[static_cast<std::size_t>(state_index(t))];
  }
};

}  // namespace qeprop
