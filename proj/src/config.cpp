// SPDX-License-Identifier: Apache-2.0
#include "qeprop/config.hpp"

#include <algorithm>
#include <cctype>
#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "qeprop/util.hpp"

namespace qeprop {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

double parse_double(const std::string& key, const std::string& v) {
  errno = 0;
  char* end = nullptr;
  const double x = std::strtod(v.c_str(), &end);
  if (end == v.c_str() || *end != '\0' || errno == ERANGE) {
    throw ConfigError("config: bad numeric value for " + key + ": '" + v + "'");
  }
  return x;
}

long long parse_int(const std::string& key, const std::string& v) {
  errno = 0;
  char* end = nullptr;
  const long long x = std::strtoll(v.c_str(), &end, 10);
  if (end == v.c_str() || *end != '\0' || errno == ERANGE) {
    throw ConfigError("config: bad integer value for " + key + ": '" + v + "'");
  }
  return x;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  errno = 0;
  char* end = nullptr;
  const unsigned long long x = std::strtoull(v.c_str(), &end, 10);
  if (end == v.c_str() || *end != '\0' || errno == ERANGE || v.find('-') != std::string::npos) {
    throw ConfigError("config: bad unsigned value for " + key + ": '" + v + "'");
  }
  return x;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config: bad boolean value for " + key + ": '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::string cur;
  std::stringstream ss(v);
  while (std::getline(ss, cur, ',')) {
    cur = trim(cur);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

std::vector<double> parse_double_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  for (const std::string& item : split_list(v)) out.push_back(parse_double(key, item));
  if (out.empty()) throw ConfigError("config: empty list for " + key);
  return out;
}

void apply_kv(ExperimentConfig& c, const std::string& key, const std::string& v) {
  if (key == "latent.channels") c.channels = static_cast<int>(parse_int(key, v));
  else if (key == "latent.height") c.height = static_cast<int>(parse_int(key, v));
  else if (key == "latent.width") c.width = static_cast<int>(parse_int(key, v));
  else if (key == "schedule.T") c.T = static_cast<int>(parse_int(key, v));
  else if (key == "schedule.beta_start") c.beta_start = parse_double(key, v);
  else if (key == "schedule.beta_end") c.beta_end = parse_double(key, v);
  else if (key == "sampler.steps") c.steps = static_cast<int>(parse_int(key, v));
  else if (key == "sampler.solver") c.solver = v;
  else if (key == "sampler.lambda_decay") c.lambda_decay = parse_double(key, v);
  else if (key == "denoiser.kind") c.denoiser_kind = v;
  else if (key == "denoiser.mean") c.mean = parse_double(key, v);
  else if (key == "denoiser.scale") c.scale = parse_double(key, v);
  else if (key == "denoiser.seed") c.model_seed = parse_u64(key, v);
  else if (key == "denoiser.hidden_width") c.hidden_width = static_cast<int>(parse_int(key, v));
  else if (key == "denoiser.output_scale") c.output_scale = parse_double(key, v);
  else if (key == "quant.weight_bits") c.weight_bits = static_cast<int>(parse_int(key, v));
  else if (key == "quant.act_bits") c.act_bits = static_cast<int>(parse_int(key, v));
  else if (key == "quant.granularity") c.granularity = v;
  else if (key == "quant.group_size") c.group_size = static_cast<int>(parse_int(key, v));
  else if (key == "error.kind") c.error_kind = v;
  else if (key == "error.sigma") c.sigma = parse_double(key, v);
  else if (key == "error.kstar") c.kstar = parse_double_list(key, v);
  else if (key == "calibration.samples") c.samples = static_cast<int>(parse_int(key, v));
  else if (key == "calibration.lambda") c.lambda_mode = v;
  else if (key == "calibration.holdout") c.holdout = parse_double(key, v);
  else if (key == "calibration.grid") c.lambda_grid = parse_double_list(key, v);
  else if (key == "run.variants") c.variants = split_list(v);
  else if (key == "run.seed_begin") c.seed_begin = parse_u64(key, v);
  else if (key == "run.seed_end") c.seed_end = parse_u64(key, v);
  else if (key == "tcec.window_policy") c.window_policy = v;
  else if (key == "output.svg") c.svg = parse_bool(key, v);
  else if (key == "output.dir") c.out_dir = v;
  else throw ConfigError("config: unknown key '" + key + "'");
}

void validate(const ExperimentConfig& c) {
  if (c.channels < 1 || c.height < 1 || c.width < 1) {
    throw ConfigError("config: latent dimensions must be >= 1");
  }
  if (c.T < 2) throw ConfigError("config: schedule.T must be >= 2");
  if (!(c.beta_start > 0.0) || !(c.beta_start <= c.beta_end) || !(c.beta_end < 1.0)) {
    throw ConfigError("config: need 0 < beta_start <= beta_end < 1");
  }
  if (c.steps < 1 || c.steps > c.T) {
    throw ConfigError("config: sampler.steps must be in [1, T]");
  }
  if (c.solver != "ddim" && c.solver != "dpmpp2") {
    throw ConfigError("config: sampler.solver must be ddim or dpmpp2");
  }
  if (c.lambda_decay < 0.0) {
    throw ConfigError("config: sampler.lambda_decay must be >= 0");
  }
  if (c.denoiser_kind != "analytic_gaussian" && c.denoiser_kind != "seeded_mlp") {
    throw ConfigError("config: denoiser.kind must be analytic_gaussian or seeded_mlp");
  }
  if (!(c.scale > 0.0)) throw ConfigError("config: denoiser.scale must be > 0");
  if (c.hidden_width < 1) throw ConfigError("config: denoiser.hidden_width must be >= 1");
  if (c.weight_bits < 2 || c.weight_bits > 16 || c.act_bits < 2 || c.act_bits > 16) {
    throw ConfigError("config: quant bits must be in [2, 16]");
  }
  if (c.granularity != "per_tensor" && c.granularity != "per_channel" &&
      c.granularity != "per_group") {
    throw ConfigError("config: quant.granularity must be per_tensor, per_channel, or per_group");
  }
  if (c.group_size < 1) throw ConfigError("config: quant.group_size must be >= 1");
  if (c.error_kind != "zero" && c.error_kind != "gaussian" &&
      c.error_kind != "scaled_output" && c.error_kind != "fake_quant") {
    throw ConfigError("config: error.kind must be zero, gaussian, scaled_output, or fake_quant");
  }
  if (c.sigma < 0.0) throw ConfigError("config: error.sigma must be >= 0");
  for (double k : c.kstar) {
    if (!(std::fabs(k) < 1.0)) {
      throw ConfigError("config: error.kstar entries must satisfy |k| < 1");
    }
  }
  if (c.samples < 2) throw ConfigError("config: calibration.samples must be >= 2");
  if (!(c.holdout > 0.0) || !(c.holdout < 1.0)) {
    throw ConfigError("config: calibration.holdout must be in (0, 1)");
  }
  if (c.lambda_mode != "empirical" && c.lambda_mode != "grid") {
    errno = 0;
    char* end = nullptr;
    const double x = std::strtod(c.lambda_mode.c_str(), &end);
    if (end == c.lambda_mode.c_str() || *end != '\0' || errno == ERANGE || x < 0.0) {
      throw ConfigError("config: calibration.lambda must be empirical, grid, or a number >= 0");
    }
  }
  if (c.variants.empty()) throw ConfigError("config: run.variants must be non-empty");
  for (const std::string& v : c.variants) parse_variant(v);
  if (c.seed_end < c.seed_begin) {
    throw ConfigError("config: run.seed_end must be >= run.seed_begin");
  }
  parse_window_policy(c.window_policy);
  if (c.out_dir.empty()) throw ConfigError("config: output.dir must be non-empty");
}

}  // namespace

std::string ExperimentConfig::fingerprint() const {
  std::string canon;
  canon += "latent.channels=" + std::to_string(channels) + "\n";
  canon += "latent.height=" + std::to_string(height) + "\n";
  canon += "latent.width=" + std::to_string(width) + "\n";
  canon += "schedule.T=" + std::to_string(T) + "\n";
  canon += "schedule.beta_start=" + fmt17(beta_start) + "\n";
  canon += "schedule.beta_end=" + fmt17(beta_end) + "\n";
  canon += "sampler.steps=" + std::to_string(steps) + "\n";
  canon += "sampler.solver=" + solver + "\n";
  canon += "sampler.lambda_decay=" + fmt17(lambda_decay) + "\n";
  canon += "denoiser.kind=" + denoiser_kind + "\n";
  canon += "denoiser.mean=" + fmt17(mean) + "\n";
  canon += "denoiser.scale=" + fmt17(scale) + "\n";
  canon += "denoiser.seed=" + std::to_string(model_seed) + "\n";
  canon += "denoiser.hidden_width=" + std::to_string(hidden_width) + "\n";
  canon += "denoiser.output_scale=" + fmt17(output_scale) + "\n";
  canon += "quant.weight_bits=" + std::to_string(weight_bits) + "\n";
  canon += "quant.act_bits=" + std::to_string(act_bits) + "\n";
  canon += "quant.granularity=" + granularity + "\n";
  canon += "quant.group_size=" + std::to_string(group_size) + "\n";
  canon += "error.kind=" + error_kind + "\n";
  canon += "error.sigma=" + fmt17(sigma) + "\n";
  canon += "error.kstar=";
  for (std::size_t i = 0; i < kstar.size(); ++i) {
    if (i) canon += ",";
    canon += fmt17(kstar[i]);
  }
  canon += "\n";
  canon += "calibration.samples=" + std::to_string(samples) + "\n";
  canon += "calibration.lambda=" + lambda_mode + "\n";
  canon += "calibration.holdout=" + fmt17(holdout) + "\n";
  canon += "calibration.grid=";
  for (std::size_t i = 0; i < lambda_grid.size(); ++i) {
    if (i) canon += ",";
    canon += fmt17(lambda_grid[i]);
  }
  canon += "\n";
  canon += "run.variants=";
  for (std::size_t i = 0; i < variants.size(); ++i) {
    if (i) canon += ",";
    canon += variants[i];
  }
  canon += "\n";
  canon += "run.seed_begin=" + std::to_string(seed_begin) + "\n";
  canon += "run.seed_end=" + std::to_string(seed_end) + "\n";
  canon += "tcec.window_policy=" + window_policy + "\n";
  canon += "output.svg=" + std::string(svg ? "true" : "false") + "\n";
  return hex16(fnv1a64(canon.data(), canon.size()));
}

ExperimentConfig parse_config_text(const std::string& text) {
  ExperimentConfig cfg;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config: line " + std::to_string(lineno) +
                        " is not 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) {
      throw ConfigError("config: empty key on line " + std::to_string(lineno));
    }
    apply_kv(cfg, key, value);
  }
  validate(cfg);
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

NoiseSchedule make_schedule(const ExperimentConfig& cfg) {
  return make_linear_beta(cfg.T, cfg.beta_start, cfg.beta_end);
}

StepPlan make_plan(const ExperimentConfig& cfg, const NoiseSchedule& s) {
  return make_step_plan(s, cfg.steps);
}

std::shared_ptr<Denoiser> make_denoiser(const ExperimentConfig& cfg) {
  if (cfg.denoiser_kind == "analytic_gaussian") {
    const Latent mean(cfg.channels, cfg.height, cfg.width, cfg.mean);
    return std::make_shared<AnalyticGaussian>(mean, cfg.scale);
  }
  if (cfg.denoiser_kind == "seeded_mlp") {
    return std::make_shared<SeededMlp>(cfg.channels, cfg.height, cfg.width,
                                       cfg.hidden_width, cfg.model_seed,
                                       cfg.output_scale);
  }
  throw ConfigError("config: unknown denoiser kind '" + cfg.denoiser_kind + "'");
}

QuantConfig make_quant_config(const ExperimentConfig& cfg) {
  QuantConfig q;
  q.weight_bits = cfg.weight_bits;
  q.act_bits = cfg.act_bits;
  if (cfg.granularity == "per_tensor") q.granularity = Granularity::per_tensor;
  else if (cfg.granularity == "per_channel") q.granularity = Granularity::per_channel;
  else if (cfg.granularity == "per_group") q.granularity = Granularity::per_group;
  else throw ConfigError("config: unknown granularity '" + cfg.granularity + "'");
  q.group_size = cfg.group_size;
  return q;
}

ErrorModel make_error_model(const ExperimentConfig& cfg,
                            std::shared_ptr<const Denoiser> fp,
                            const StepPlan& plan) {
  ErrorModel m;
  if (cfg.error_kind == "zero") {
    m.kind = ErrorModel::Kind::zero;
    return m;
  }
  if (cfg.error_kind == "gaussian") {
    m.kind = ErrorModel::Kind::gaussian;
    for (int t : plan.steps) m.sigma_t[t] = cfg.sigma;
    return m;
  }
  if (cfg.error_kind == "scaled_output") {
    m.kind = ErrorModel::Kind::scaled_output;
    m.kstar.ts = plan.steps;
    m.kstar.channels = cfg.channels;
    m.kstar.values.resize(static_cast<std::size_t>(plan.n()) * cfg.channels);
    for (int r = 0; r < plan.n(); ++r) {
      for (int c = 0; c < cfg.channels; ++c) {
        m.kstar.values[static_cast<std::size_t>(r) * cfg.channels + c] =
            cfg.kstar[static_cast<std::size_t>(c) % cfg.kstar.size()];
      }
    }
    return m;
  }
  if (cfg.error_kind == "fake_quant") {
    m.kind = ErrorModel::Kind::fake_quant;
    m.quantized = quantize_denoiser(std::move(fp), make_quant_config(cfg));
    return m;
  }
  throw ConfigError("config: unknown error kind '" + cfg.error_kind + "'");
}

Solver parse_solver(const std::string& name) {
  if (name == "ddim") return Solver::ddim;
  if (name == "dpmpp2") return Solver::dpmpp2;
  throw ConfigError("config: unknown solver '" + name + "'");
}

Variant parse_variant(const std::string& name) {
  if (name == "fp") return Variant::fp;
  if (name == "quant") return Variant::quant;
  if (name == "tcec") return Variant::tcec;
  if (name == "tcec-oracle") return Variant::tcec_oracle;
  throw ConfigError("config: unknown variant '" + name + "'");
}

WindowPolicy parse_window_policy(const std::string& name) {
  if (name == "once") return WindowPolicy::once;
  if (name == "literal") return WindowPolicy::literal;
  throw ConfigError("config: unknown window policy '" + name + "'");
}

std::vector<Variant> config_variants(const ExperimentConfig& cfg) {
  std::vector<Variant> out;
  out.reserve(cfg.variants.size());
  for (const std::string& v : cfg.variants) out.push_back(parse_variant(v));
  return out;
}

}  // namespace qeprop
