#pragma once

// Run configuration: a flat `section.key = value` document. Every key has a
// default; unknown keys and unparsable values are rejected by name.

#include <fstream>
#include <functional>
#include <sstream>

#include "matchkit/eval.hpp"

namespace matchkit::config {

struct RunConfig {
  synth::DatasetConfig synth;
  matcher::MatcherConfig matcher;
  colorspace::ColorspaceConfig color;
  train::TrainConfig train;
  eval::EvalOptions eval;
  std::size_t eval_samples = 4;  // transformed example pairs written per kind
};

namespace detail {

struct Field {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

inline std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& key, const std::string& s) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || !std::isfinite(v)) throw ConfigError("config: " + key + ": expected a number, got '" + s + "'");
  return v;
}

inline std::size_t parse_size(const std::string& key, const std::string& s) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
    throw ConfigError("config: " + key + ": expected a non-negative integer, got '" + s + "'");
  }
  try {
    return static_cast<std::size_t>(std::stoull(s));
  } catch (const std::exception&) {
    throw ConfigError("config: " + key + ": integer out of range");
  }
}

template <typename Get>
Field real(Get get) {
  return {[get](RunConfig& c, const std::string& s) { get(c) = parse_double("", s); },
          [get](const RunConfig& c) { return fmt(get(const_cast<RunConfig&>(c))); }};
}

template <typename Get>
Field size(Get get) {
  return {[get](RunConfig& c, const std::string& s) { get(c) = parse_size("", s); },
          [get](const RunConfig& c) { return std::to_string(get(const_cast<RunConfig&>(c))); }};
}

inline synth::Condition& condition(RunConfig& c, std::size_t i) { return c.synth.conditions.at(i); }

// Both nets share the architecture widths; the encoder keeps its 3-in/3-out ends.
inline void set_arch(RunConfig& c, std::size_t nets::SiameseConfig::*member, std::size_t v) {
  c.train.proxy.*member = v;
  c.train.encoder.*member = v;
}

inline const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> t;
    // synth
    t["synth.scenes"] = size([](RunConfig& c) -> auto& { return c.synth.scenes; });
    t["synth.frames"] = size([](RunConfig& c) -> auto& { return c.synth.frames; });
    t["synth.window"] = size([](RunConfig& c) -> auto& { return c.synth.window; });
    t["synth.test_fraction"] = real([](RunConfig& c) -> auto& { return c.synth.test_fraction; });
    t["synth.width"] = size([](RunConfig& c) -> auto& { return c.synth.width; });
    t["synth.height"] = size([](RunConfig& c) -> auto& { return c.synth.height; });
    t["synth.frame_step"] = real([](RunConfig& c) -> auto& { return c.synth.frame_step; });
    t["synth.temperature_jitter"] = real([](RunConfig& c) -> auto& { return c.synth.temperature_jitter; });
    t["synth.intensity_jitter"] = real([](RunConfig& c) -> auto& { return c.synth.intensity_jitter; });
    t["synth.noise_sigma"] = real([](RunConfig& c) -> auto& { return c.synth.noise_sigma; });
    t["synth.day_temperature"] = real([](RunConfig& c) -> auto& { return condition(c, 0).temperature; });
    t["synth.day_intensity"] = real([](RunConfig& c) -> auto& { return condition(c, 0).intensity; });
    t["synth.day_shadow_min"] = real([](RunConfig& c) -> auto& { return condition(c, 0).shadow_min; });
    t["synth.night_temperature"] = real([](RunConfig& c) -> auto& { return condition(c, 1).temperature; });
    t["synth.night_intensity"] = real([](RunConfig& c) -> auto& { return condition(c, 1).intensity; });
    t["synth.night_shadow_min"] = real([](RunConfig& c) -> auto& { return condition(c, 1).shadow_min; });
    t["synth.lambda_r"] = real([](RunConfig& c) -> auto& { return c.synth.sensor.wavelengths[0]; });
    t["synth.lambda_g"] = real([](RunConfig& c) -> auto& { return c.synth.sensor.wavelengths[1]; });
    t["synth.lambda_b"] = real([](RunConfig& c) -> auto& { return c.synth.sensor.wavelengths[2]; });
    t["synth.gain_r"] = real([](RunConfig& c) -> auto& { return c.synth.sensor.gains[0]; });
    t["synth.gain_g"] = real([](RunConfig& c) -> auto& { return c.synth.sensor.gains[1]; });
    t["synth.gain_b"] = real([](RunConfig& c) -> auto& { return c.synth.sensor.gains[2]; });
    t["synth.jitter_translation"] = real([](RunConfig& c) -> auto& { return c.synth.viewpoint.translation; });
    t["synth.jitter_rotation"] = real([](RunConfig& c) -> auto& { return c.synth.viewpoint.rotation; });
    t["synth.jitter_scale"] = real([](RunConfig& c) -> auto& { return c.synth.viewpoint.scale; });
    t["synth.jitter_perspective"] = real([](RunConfig& c) -> auto& { return c.synth.viewpoint.perspective; });
    // matcher
    t["matcher.tau_det"] = real([](RunConfig& c) -> auto& { return c.matcher.tau_det; });
    t["matcher.r_nms"] = size([](RunConfig& c) -> auto& { return c.matcher.r_nms; });
    t["matcher.rho"] = real([](RunConfig& c) -> auto& { return c.matcher.rho; });
    t["matcher.ransac_iters"] = size([](RunConfig& c) -> auto& { return c.matcher.ransac_iters; });
    t["matcher.tau_epi"] = real([](RunConfig& c) -> auto& { return c.matcher.tau_epi; });
    // colorspace
    t["colorspace.eps_log"] = real([](RunConfig& c) -> auto& { return c.color.eps_log; });
    t["colorspace.eps_sigma"] = real([](RunConfig& c) -> auto& { return c.color.eps_sigma; });
    t["colorspace.lambda1"] = real([](RunConfig& c) -> auto& { return c.color.wavelengths[0]; });
    t["colorspace.lambda2"] = real([](RunConfig& c) -> auto& { return c.color.wavelengths[1]; });
    t["colorspace.lambda3"] = real([](RunConfig& c) -> auto& { return c.color.wavelengths[2]; });
    // nets
    auto arch = [&t](const std::string& key, std::size_t nets::SiameseConfig::*member) {
      t[key] = {[member, key](RunConfig& c, const std::string& s) { set_arch(c, member, parse_size(key, s)); },
                [member](const RunConfig& c) { return std::to_string(c.train.proxy.*member); }};
    };
    arch("nets.branch_width1", &nets::SiameseConfig::branch_width1);
    arch("nets.branch_width2", &nets::SiameseConfig::branch_width2);
    arch("nets.trunk_width", &nets::SiameseConfig::trunk_width);
    arch("nets.residual_blocks", &nets::SiameseConfig::residual_blocks);
    arch("nets.kernel", &nets::SiameseConfig::kernel);
    arch("nets.padding", &nets::SiameseConfig::padding);
    t["nets.mlp_hidden_width"] = size([](RunConfig& c) -> auto& { return c.train.mlp.hidden_width; });
    t["nets.mlp_hidden_layers"] = size([](RunConfig& c) -> auto& { return c.train.mlp.hidden_layers; });
    t["nets.mlp_log_eps"] = real([](RunConfig& c) -> auto& { return c.train.mlp.log_eps; });
    // train
    t["train.epochs"] = size([](RunConfig& c) -> auto& { return c.train.epochs; });
    t["train.batch_size"] = size([](RunConfig& c) -> auto& { return c.train.batch_size; });
    t["train.learning_rate"] = real([](RunConfig& c) -> auto& { return c.train.learning_rate; });
    t["train.transform_learning_rate"] = real([](RunConfig& c) -> auto& { return c.train.transform_learning_rate; });
    t["train.theta_learning_rate"] = real([](RunConfig& c) -> auto& { return c.train.theta_learning_rate; });
    t["train.height"] = size([](RunConfig& c) -> auto& { return c.train.height; });
    t["train.proxy_steps"] = size([](RunConfig& c) -> auto& { return c.train.proxy_steps; });
    t["train.target_scale"] = real([](RunConfig& c) -> auto& { return c.train.target_scale; });
    t["train.validation_pairs"] = size([](RunConfig& c) -> auto& { return c.train.validation_pairs; });
    t["train.label_quantum"] = real([](RunConfig& c) -> auto& { return c.train.label_quantum; });
    // eval
    t["eval.route_spacing"] = real([](RunConfig& c) -> auto& { return c.eval.route_spacing; });
    t["eval.samples"] = size([](RunConfig& c) -> auto& { return c.eval_samples; });
    return t;
  }();
  return table;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

// Propagates shared settings (matcher, colorspace, resize height) to the
// module configs that consume them, then validates.
inline void finalize(RunConfig& c) {
  c.train.matcher = c.matcher;
  c.train.color = c.color;
  c.eval.matcher = c.matcher;
  c.eval.color = c.color;
  c.eval.height = c.train.height;
  c.eval.target_scale = c.train.target_scale;
  train::validate(c.train);
  if (c.matcher.r_nms == 0) throw ConfigError("config: matcher.r_nms must be positive");
  if (c.matcher.ransac_iters == 0) throw ConfigError("config: matcher.ransac_iters must be positive");
  if (!(c.matcher.tau_epi > 0)) throw ConfigError("config: matcher.tau_epi must be positive");
  if (!(c.color.eps_log > 0) || !(c.color.eps_sigma > 0)) throw ConfigError("config: colorspace epsilons must be positive");
  if (!(c.eval.route_spacing > 0)) throw ConfigError("config: eval.route_spacing must be positive");
}

inline std::vector<std::string> keys() {
  std::vector<std::string> out;
  for (const auto& [k, _] : detail::fields()) out.push_back(k);
  return out;
}

inline std::string get(const RunConfig& c, const std::string& key) {
  auto it = detail::fields().find(key);
  if (it == detail::fields().end()) throw ConfigError("config: unknown key '" + key + "'");
  return it->second.get(c);
}

inline void set(RunConfig& c, const std::string& key, const std::string& value) {
  auto it = detail::fields().find(key);
  if (it == detail::fields().end()) throw ConfigError("config: unknown key '" + key + "'");
  try {
    it->second.set(c, value);
  } catch (const ConfigError&) {
    throw ConfigError("config: " + key + ": invalid value '" + value + "'");
  }
}

inline RunConfig parse(std::istream& in, const std::string& source = "config") {
  RunConfig c;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": expected 'section.key = value'");
    }
    const auto key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
    try {
      set(c, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  finalize(c);
  return c;
}

inline RunConfig parse_string(const std::string& text) {
  std::istringstream in(text);
  return parse(in);
}

inline RunConfig load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  return parse(in, path.string());
}

inline RunConfig defaults() {
  RunConfig c;
  finalize(c);
  return c;
}

// Every key with its current value, one per line, in the accepted syntax.
inline std::string dump(const RunConfig& c) {
  std::string out;
  for (const auto& k : keys()) out += k + " = " + get(c, k) + "\n";
  return out;
}

}  // namespace matchkit::config
