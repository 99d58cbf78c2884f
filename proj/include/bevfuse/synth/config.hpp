#pragma once

#include <charconv>
#include <cstdio>
#include <functional>
#include <istream>
#include <map>
#include <set>
#include <sstream>

#include "bevfuse/synth/sensors.hpp"
#include "bevfuse/train/trainer.hpp"

namespace bevfuse::synth {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Everything a config file can set: the synthetic world, the radar
/// simulator, the network and the training run.
struct ProjectConfig {
  SceneParams scene;
  RadarParams radar;
  train::TrainConfig train;

  ProjectConfig() {
    auto& m = train.model;
    m.image_height = static_cast<std::size_t>(scene.image_height);
    m.image_width = static_cast<std::size_t>(scene.image_width);
    m.radar.sweeps = radar.sweeps;
    m.internal.vertical = geom::VerticalRange{0.0, 2.4, 0.8};
  }

  fusion::ModelConfig& model() { return train.model; }
  const fusion::ModelConfig& model() const { return train.model; }
};

namespace detail {

inline double parse_double(const std::string& key, const std::string& v) {
  double out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size() || !std::isfinite(out)) {
    throw ConfigError("config: '" + key + "' expects a number, got '" + v + "'");
  }
  return out;
}

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) {
    throw ConfigError("config: '" + key + "' expects a nonnegative integer, got '" + v + "'");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: '" + key + "' expects true/false, got '" + v + "'");
}

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Key {
  std::function<void(ProjectConfig&, const std::string&)> set;
  std::function<std::string(const ProjectConfig&)> get;
};

template <typename Access>
Key real(Access a) {
  return {[a](ProjectConfig& c, const std::string& v) { a(c) = parse_double("", v); },
          [a](const ProjectConfig& c) { return fmt(a(const_cast<ProjectConfig&>(c))); }};
}
template <typename Access>
Key count(Access a) {
  return {[a](ProjectConfig& c, const std::string& v) { a(c) = static_cast<std::remove_reference_t<decltype(a(c))>>(parse_size("", v)); },
          [a](const ProjectConfig& c) { return std::to_string(a(const_cast<ProjectConfig&>(c))); }};
}
template <typename Access>
Key flag(Access a) {
  return {[a](ProjectConfig& c, const std::string& v) { a(c) = parse_bool("", v); },
          [a](const ProjectConfig& c) { return std::string(a(const_cast<ProjectConfig&>(c)) ? "true" : "false"); }};
}

inline const std::map<std::string, Key>& keys() {
  using C = ProjectConfig;
  static const std::map<std::string, Key> table = [] {
    std::map<std::string, Key> k;
    // world
    k["cameras"] = count([](C& c) -> auto& { return c.scene.cameras; });
    k["image_height"] = {[](C& c, const std::string& v) {
                           c.scene.image_height = static_cast<int>(parse_size("image_height", v));
                           c.model().image_height = static_cast<std::size_t>(c.scene.image_height);
                         },
                         [](const C& c) { return std::to_string(c.scene.image_height); }};
    k["image_width"] = {[](C& c, const std::string& v) {
                          c.scene.image_width = static_cast<int>(parse_size("image_width", v));
                          c.model().image_width = static_cast<std::size_t>(c.scene.image_width);
                        },
                        [](const C& c) { return std::to_string(c.scene.image_width); }};
    k["hfov_deg"] = real([](C& c) -> auto& { return c.scene.hfov_deg; });
    k["camera_height"] = real([](C& c) -> auto& { return c.scene.camera_height; });
    k["vehicles_min"] = count([](C& c) -> auto& { return c.scene.vehicles_min; });
    k["vehicles_max"] = count([](C& c) -> auto& { return c.scene.vehicles_max; });
    k["world_extent"] = real([](C& c) -> auto& { return c.scene.extent; });
    k["ego_clearance"] = real([](C& c) -> auto& { return c.scene.ego_clearance; });
    k["length_min"] = real([](C& c) -> auto& { return c.scene.length_min; });
    k["length_max"] = real([](C& c) -> auto& { return c.scene.length_max; });
    k["width_min"] = real([](C& c) -> auto& { return c.scene.width_min; });
    k["width_max"] = real([](C& c) -> auto& { return c.scene.width_max; });
    k["height_min"] = real([](C& c) -> auto& { return c.scene.height_min; });
    k["height_max"] = real([](C& c) -> auto& { return c.scene.height_max; });
    k["speed_max"] = real([](C& c) -> auto& { return c.scene.speed_max; });
    k["ego_speed_max"] = real([](C& c) -> auto& { return c.scene.ego_speed_max; });
    k["vehicle_gap"] = real([](C& c) -> auto& { return c.scene.gap; });
    k["shading"] = {[](C& c, const std::string& v) {
                      if (v == "normal") c.scene.shading = Shading::kNormal;
                      else if (v == "flat") c.scene.shading = Shading::kFlat;
                      else throw ConfigError("config: 'shading' expects normal or flat, got '" + v + "'");
                    },
                    [](const C& c) { return std::string(c.scene.shading == Shading::kFlat ? "flat" : "normal"); }};
    // radar simulation
    k["sweeps"] = {[](C& c, const std::string& v) {
                     c.radar.sweeps = parse_size("sweeps", v);
                     c.model().radar.sweeps = c.radar.sweeps;
                   },
                   [](const C& c) { return std::to_string(c.radar.sweeps); }};
    k["sweep_dt"] = real([](C& c) -> auto& { return c.radar.sweep_dt; });
    k["radar_height"] = real([](C& c) -> auto& { return c.radar.sensor_height; });
    k["radar_range"] = real([](C& c) -> auto& { return c.radar.max_range; });
    k["radar_points_per_vehicle"] = count([](C& c) -> auto& { return c.radar.points_per_vehicle; });
    k["radar_position_noise"] = real([](C& c) -> auto& { return c.radar.position_noise; });
    k["radar_velocity_noise"] = real([](C& c) -> auto& { return c.radar.velocity_noise; });
    k["radar_clutter"] = count([](C& c) -> auto& { return c.radar.clutter; });
    k["radar_dropout"] = real([](C& c) -> auto& { return c.radar.dropout; });
    // grids
    k["bev_x_min"] = real([](C& c) -> auto& { return c.model().internal.x_min; });
    k["bev_x_max"] = real([](C& c) -> auto& { return c.model().internal.x_max; });
    k["bev_y_min"] = real([](C& c) -> auto& { return c.model().internal.y_min; });
    k["bev_y_max"] = real([](C& c) -> auto& { return c.model().internal.y_max; });
    k["bev_resolution"] = real([](C& c) -> auto& { return c.model().internal.resolution; });
    k["z_min"] = real([](C& c) -> auto& { return c.model().internal.vertical->z_min; });
    k["z_max"] = real([](C& c) -> auto& { return c.model().internal.vertical->z_max; });
    k["z_resolution"] = real([](C& c) -> auto& { return c.model().internal.vertical->z_resolution; });
    k["out_x_min"] = real([](C& c) -> auto& { return c.model().output.x_min; });
    k["out_x_max"] = real([](C& c) -> auto& { return c.model().output.x_max; });
    k["out_y_min"] = real([](C& c) -> auto& { return c.model().output.y_min; });
    k["out_y_max"] = real([](C& c) -> auto& { return c.model().output.y_max; });
    k["out_resolution"] = real([](C& c) -> auto& { return c.model().output.resolution; });
    // network
    k["stem_width"] = count([](C& c) -> auto& { return c.model().encoder.stem_width; });
    k["stage_width0"] = count([](C& c) -> auto& { return c.model().encoder.stage_widths[0]; });
    k["stage_width1"] = count([](C& c) -> auto& { return c.model().encoder.stage_widths[1]; });
    k["stage_width2"] = count([](C& c) -> auto& { return c.model().encoder.stage_widths[2]; });
    k["c_img"] = count([](C& c) -> auto& { return c.model().encoder.c_img; });
    k["use_msda"] = flag([](C& c) -> auto& { return c.model().use_msda; });
    k["msda_heads"] = count([](C& c) -> auto& { return c.model().msda.heads; });
    k["msda_points"] = count([](C& c) -> auto& { return c.model().msda.points; });
    k["point_channels"] = count([](C& c) -> auto& { return c.model().radar.encoder.channels; });
    k["point_window"] = count([](C& c) -> auto& { return c.model().radar.encoder.window; });
    k["point_blocks"] = count([](C& c) -> auto& { return c.model().radar.encoder.blocks; });
    k["radar_bev_channels"] = count([](C& c) -> auto& { return c.model().radar.bev_channels; });
    k["temporal_encoding"] = {
        [](C& c, const std::string& v) {
          if (v == "onehot") c.model().radar.encoding = radar::TemporalEncoding::kOneHot;
          else if (v == "ordinal") c.model().radar.encoding = radar::TemporalEncoding::kOrdinal;
          else throw ConfigError("config: 'temporal_encoding' expects onehot or ordinal, got '" + v + "'");
        },
        [](const C& c) { return std::string(radar::encoding_name(c.model().radar.encoding)); }};
    k["fusion_channels"] = count([](C& c) -> auto& { return c.model().fusion_channels; });
    k["se_reduction"] = count([](C& c) -> auto& { return c.model().se_reduction; });
    k["unet_depth"] = count([](C& c) -> auto& { return c.model().unet_depth; });
    k["use_camera"] = flag([](C& c) -> auto& { return c.model().use_camera; });
    k["use_radar"] = flag([](C& c) -> auto& { return c.model().use_radar; });
    // training
    k["epochs"] = count([](C& c) -> auto& { return c.train.epochs; });
    k["effective_batch"] = count([](C& c) -> auto& { return c.train.effective_batch; });
    k["peak_lr"] = real([](C& c) -> auto& { return c.train.peak_lr; });
    k["weight_decay"] = real([](C& c) -> auto& { return c.train.weight_decay; });
    k["warmup_epochs"] = count([](C& c) -> auto& { return c.train.warmup_epochs; });
    k["seed"] = count([](C& c) -> auto& { return c.train.seed; });
    k["loss_bce"] = real([](C& c) -> auto& { return c.train.loss.bce; });
    k["loss_aux"] = real([](C& c) -> auto& { return c.train.loss.aux; });
    k["loss_dice"] = real([](C& c) -> auto& { return c.train.loss.dice; });
    k["dice_smooth"] = real([](C& c) -> auto& { return c.train.loss.dice_smooth; });
    k["augment"] = flag([](C& c) -> auto& { return c.train.augment.enabled; });
    k["radar_modality_dropout"] = real([](C& c) -> auto& { return c.train.radar_modality_dropout; });
    k["shuffle"] = flag([](C& c) -> auto& { return c.train.shuffle; });
    k["eval_every"] = count([](C& c) -> auto& { return c.train.eval_every; });
    return k;
  }();
  return table;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

}  // namespace detail

/// Every recognised key, sorted.
inline std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& [k, _] : detail::keys()) out.push_back(k);
  return out;
}

/// Sets one key; unknown keys and malformed values throw ConfigError.
inline void set_config_value(ProjectConfig& cfg, const std::string& key, const std::string& value) {
  const auto& table = detail::keys();
  auto it = table.find(key);
  if (it == table.end()) throw ConfigError("config: unknown key '" + key + "'");
  try {
    it->second.set(cfg, value);
  } catch (const ConfigError& e) {
    std::string msg = e.what();
    const auto pos = msg.find("''");
    if (pos != std::string::npos) msg.replace(pos, 2, "'" + key + "'");
    throw ConfigError(msg);
  }
}

/// Validates the cross-field constraints that would otherwise surface deep
/// inside generation or training.
inline void validate_config(const ProjectConfig& c) {
  try {
    c.scene.validate();
    c.radar.validate();
    c.train.validate();
    c.model().internal.validate();
    c.model().output.validate();
    if (!c.model().internal.vertical) throw std::invalid_argument("internal grid lacks a vertical range");
    (void)c.model().internal.layers();
    if (c.model().image_height % 32 || c.model().image_width % 32) {
      throw std::invalid_argument("image size must be divisible by 32");
    }
    const std::size_t f = std::size_t{1} << c.model().unet_depth;
    if (c.model().internal.rows() % std::max<std::size_t>(f, 4) || c.model().internal.cols() % std::max<std::size_t>(f, 4)) {
      throw std::invalid_argument("internal grid size must be divisible by 4 and by 2^unet_depth");
    }
    if (!c.model().use_camera && !c.model().use_radar) throw std::invalid_argument("both modalities disabled");
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

/// Parses `key = value` lines over the defaults; '#' starts a comment and a
/// repeated key is an error.
inline ProjectConfig parse_config(std::istream& is, ProjectConfig cfg = {}) {
  std::string line;
  std::size_t lineno = 0;
  std::set<std::string> seen;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
    }
    const std::string key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
    if (!seen.insert(key).second) {
      throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    }
    try {
      set_config_value(cfg, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  validate_config(cfg);
  return cfg;
}

inline ProjectConfig parse_config_text(const std::string& text) {
  std::istringstream is(text);
  return parse_config(is);
}

inline ProjectConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config '" + path + "'");
  return parse_config(is);
}

/// Full key=value dump; parse_config_text(to_config_text(c)) reproduces c.
inline std::string to_config_text(const ProjectConfig& c) {
  std::string out;
  for (const auto& [k, key] : detail::keys()) out += k + "=" + key.get(c) + "\n";
  return out;
}

}  // namespace bevfuse::synth
