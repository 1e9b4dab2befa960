#pragma once

// Run configuration: every tunable of the model, trainer, room simulator
// and noise, addressable by dotted key. Files hold `key = value` lines
// ('#' starts a comment); later assignments override earlier ones.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <system_error>
#include <vector>

#include "umamba/mixsim.hpp"
#include "umamba/model.hpp"
#include "umamba/training.hpp"

namespace umamba {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  mixsim::SimConfig sim;
  std::uint64_t seed = 0;
  bool deterministic = false;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_integer(const std::string& key, const std::string& text) {
  T v{};
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) throw ConfigError(key + ": '" + text + "' is not a valid integer");
  return v;
}

inline double parse_double(const std::string& key, const std::string& text) {
  double v = 0.0;
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) throw ConfigError(key + ": '" + text + "' is not a valid number");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ConfigError(key + ": '" + text + "' is not a boolean");
}

// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

struct ConfigEntry {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

inline std::vector<ConfigEntry> config_entries() {
  std::vector<ConfigEntry> e;
  auto size_field = [&](std::string key, auto pick) {
    e.push_back({key, [pick](const RunConfig& c) { return std::to_string(pick(const_cast<RunConfig&>(c))); },
                 [pick, key](RunConfig& c, const std::string& v) { pick(c) = parse_integer<std::size_t>(key, v); }});
  };
  auto double_field = [&](std::string key, auto pick) {
    e.push_back({key, [pick](const RunConfig& c) { return format_double(pick(const_cast<RunConfig&>(c))); },
                 [pick, key](RunConfig& c, const std::string& v) { pick(c) = parse_double(key, v); }});
  };
  auto range_field = [&](const std::string& key, auto pick) {
    double_field(key + "_min", [pick](RunConfig& c) -> double& { return pick(c).lo; });
    double_field(key + "_max", [pick](RunConfig& c) -> double& { return pick(c).hi; });
  };

  size_field("model.features", [](RunConfig& c) -> std::size_t& { return c.model.features; });
  size_field("model.window", [](RunConfig& c) -> std::size_t& { return c.model.window; });
  size_field("model.hop", [](RunConfig& c) -> std::size_t& { return c.model.hop; });
  size_field("model.depth", [](RunConfig& c) -> std::size_t& { return c.model.depth; });
  size_field("model.blocks", [](RunConfig& c) -> std::size_t& { return c.model.blocks; });
  size_field("model.sources", [](RunConfig& c) -> std::size_t& { return c.model.sources; });
  size_field("model.state", [](RunConfig& c) -> std::size_t& { return c.model.state; });
  e.push_back({"model.upsampling", [](const RunConfig& c) { return to_string(c.model.upsampling); },
               [](RunConfig& c, const std::string& v) {
                 try {
                   c.model.upsampling = parse_upsampling(v);
                 } catch (const std::invalid_argument& err) {
                   throw ConfigError(std::string("model.upsampling: ") + err.what());
                 }
               }});
  size_field("model.bottleneck_channels", [](RunConfig& c) -> std::size_t& { return c.model.bottleneck_channels; });
  size_field("model.expand", [](RunConfig& c) -> std::size_t& { return c.model.expand; });
  size_field("model.conv_width", [](RunConfig& c) -> std::size_t& { return c.model.conv_width; });
  size_field("model.down_kernel", [](RunConfig& c) -> std::size_t& { return c.model.down_kernel; });
  size_field("model.up_kernel", [](RunConfig& c) -> std::size_t& { return c.model.up_kernel; });

  size_field("train.batch_size", [](RunConfig& c) -> std::size_t& { return c.train.batch_size; });
  double_field("train.learning_rate", [](RunConfig& c) -> double& { return c.train.learning_rate; });
  size_field("train.max_epochs", [](RunConfig& c) -> std::size_t& { return c.train.max_epochs; });
  double_field("train.crop_seconds", [](RunConfig& c) -> double& { return c.train.crop_seconds; });
  double_field("train.grad_clip", [](RunConfig& c) -> double& { return c.train.grad_clip; });
  double_field("train.beta1", [](RunConfig& c) -> double& { return c.train.beta1; });
  double_field("train.beta2", [](RunConfig& c) -> double& { return c.train.beta2; });
  double_field("train.eps", [](RunConfig& c) -> double& { return c.train.eps; });
  size_field("train.plateau_patience", [](RunConfig& c) -> std::size_t& { return c.train.plateau_patience; });
  double_field("train.plateau_factor", [](RunConfig& c) -> double& { return c.train.plateau_factor; });
  size_field("train.checkpoint_every", [](RunConfig& c) -> std::size_t& { return c.train.checkpoint_every; });
  e.push_back({"train.max_steps", [](const RunConfig& c) { return std::to_string(c.train.max_steps); },
               [](RunConfig& c, const std::string& v) {
                 c.train.max_steps = parse_integer<std::int64_t>("train.max_steps", v);
               }});

  range_field("room.length", [](RunConfig& c) -> mixsim::Range& { return c.sim.room.length; });
  range_field("room.width", [](RunConfig& c) -> mixsim::Range& { return c.sim.room.width; });
  range_field("room.height", [](RunConfig& c) -> mixsim::Range& { return c.sim.room.height; });
  range_field("room.t60", [](RunConfig& c) -> mixsim::Range& { return c.sim.room.t60; });
  range_field("room.receiver_offset", [](RunConfig& c) -> mixsim::Range& { return c.sim.room.receiver_offset; });
  range_field("room.receiver_height", [](RunConfig& c) -> mixsim::Range& { return c.sim.room.receiver_height; });
  range_field("room.source_height", [](RunConfig& c) -> mixsim::Range& { return c.sim.room.source_height; });
  range_field("room.source_distance", [](RunConfig& c) -> mixsim::Range& { return c.sim.room.source_distance; });
  double_field("room.wall_margin", [](RunConfig& c) -> double& { return c.sim.room.wall_margin; });
  e.push_back({"room.absorption",
               [](const RunConfig& c) {
                 return std::string(c.sim.room.absorption == mixsim::AbsorptionModel::Sabine ? "sabine" : "image-source");
               },
               [](RunConfig& c, const std::string& v) {
                 if (v == "sabine") {
                   c.sim.room.absorption = mixsim::AbsorptionModel::Sabine;
                 } else if (v == "image-source") {
                   c.sim.room.absorption = mixsim::AbsorptionModel::ImageSource;
                 } else {
                   throw ConfigError("room.absorption: expected sabine or image-source, got '" + v + "'");
                 }
               }});
  e.push_back({"room.max_order", [](const RunConfig& c) { return std::to_string(c.sim.max_order); },
               [](RunConfig& c, const std::string& v) { c.sim.max_order = parse_integer<int>("room.max_order", v); }});

  e.push_back({"noise.type", [](const RunConfig& c) { return mixsim::to_string(c.sim.noise.type); },
               [](RunConfig& c, const std::string& v) {
                 try {
                   c.sim.noise.type = mixsim::parse_noise_type(v);
                 } catch (const std::invalid_argument& err) {
                   throw ConfigError(std::string("noise.type: ") + err.what());
                 }
               }});
  e.push_back({"noise.dir", [](const RunConfig& c) { return c.sim.noise.directory.string(); },
               [](RunConfig& c, const std::string& v) { c.sim.noise.directory = v; }});
  e.push_back({"noise.enabled", [](const RunConfig& c) { return std::string(c.sim.noise.enabled ? "true" : "false"); },
               [](RunConfig& c, const std::string& v) { c.sim.noise.enabled = parse_bool("noise.enabled", v); }});
  range_field("noise.snr", [](RunConfig& c) -> mixsim::Range& { return c.sim.noise.snr_db; });

  double_field("sim.duration", [](RunConfig& c) -> double& { return c.sim.duration_seconds; });
  size_field("sim.sources", [](RunConfig& c) -> std::size_t& { return c.sim.sources; });
  size_field("sim.threads", [](RunConfig& c) -> std::size_t& { return c.sim.threads; });

  e.push_back({"run.seed", [](const RunConfig& c) { return std::to_string(c.seed); },
               [](RunConfig& c, const std::string& v) { c.seed = parse_integer<std::uint64_t>("run.seed", v); }});
  e.push_back({"run.deterministic", [](const RunConfig& c) { return std::string(c.deterministic ? "true" : "false"); },
               [](RunConfig& c, const std::string& v) { c.deterministic = parse_bool("run.deterministic", v); }});
  return e;
}

}  // namespace detail

// Applies one `key = value` assignment; unknown keys are rejected.
inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& entry : detail::config_entries()) {
    if (entry.key == key) {
      entry.set(cfg, detail::trim(value));
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

// Accepts "key=value" as given to --set.
inline void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not of the form key=value");
  set_config_value(cfg, detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

inline void parse_config_text(RunConfig& cfg, const std::string& text, const std::string& origin = "<config>") {
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string line = text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
    pos = nl == std::string::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected key = value");
    }
    try {
      set_config_value(cfg, detail::trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

inline void load_config_file(RunConfig& cfg, const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file " + path.string());
  const std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  parse_config_text(cfg, text, path.string());
}

inline std::string format_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& entry : detail::config_entries()) out += entry.key + " = " + entry.get(cfg) + "\n";
  return out;
}

// Cross-field validation of a fully merged configuration.
inline void validate_config(const RunConfig& cfg) {
  try {
    cfg.model.validate();
    cfg.train.validate(cfg.model);
    cfg.sim.room.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (!(cfg.sim.noise.snr_db.lo <= cfg.sim.noise.snr_db.hi)) throw ConfigError("noise.snr range has min > max");
  if (!(cfg.sim.duration_seconds > 0)) throw ConfigError("sim.duration must be positive");
  if (cfg.sim.sources < 2) throw ConfigError("sim.sources must be >= 2");
  if (cfg.sim.max_order < 0) throw ConfigError("room.max_order must be >= 0");
}

}  // namespace umamba
