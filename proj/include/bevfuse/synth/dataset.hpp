#pragma once

#include <algorithm>
#include <cstdio>
#include <optional>

#include "bevfuse/synth/config.hpp"
#include "bevfuse/synth/io.hpp"

namespace bevfuse::synth {

inline geom::GridSpec flat_grid(geom::GridSpec g) {
  g.vertical.reset();
  return g;
}

/// Network input plus targets for one stored scene.
inline train::Sample to_sample(const SceneRecord& rec, const fusion::ModelConfig& m) {
  const auto& cams = rec.scene.cameras;
  for (const auto& c : cams) {
    if (static_cast<std::size_t>(c.height) != m.image_height || static_cast<std::size_t>(c.width) != m.image_width) {
      throw ConfigError("scene camera resolution " + std::to_string(c.height) + "x" + std::to_string(c.width) +
                        " does not match the model's " + std::to_string(m.image_height) + "x" +
                        std::to_string(m.image_width));
    }
  }
  if (rec.sweeps.size() != m.radar.sweeps) {
    throw ConfigError("scene holds " + std::to_string(rec.sweeps.size()) + " radar sweeps, model expects " +
                      std::to_string(m.radar.sweeps));
  }
  train::Sample s;
  for (const auto& im : rec.images) s.input.images.push_back(im.to_tensor());
  s.input.calibs = cams;
  s.input.cloud = radar::accumulate_sweeps(rec.sweeps, m.radar.encoding);
  GroundTruth out = rasterize_gt(rec.scene, m.output);
  GroundTruth aux = rasterize_gt(rec.scene, flat_grid(m.internal));
  s.target = std::move(out.gt);
  s.ignore = std::move(out.ignore);
  s.aux_target = std::move(aux.gt);
  s.aux_ignore = std::move(aux.ignore);
  return s;
}

inline std::vector<train::Sample> load_dataset(const std::filesystem::path& dir, const fusion::ModelConfig& m) {
  std::vector<train::Sample> out;
  for (const auto& path : read_manifest(dir)) out.push_back(to_sample(load_scene(path.string()), m));
  return out;
}

/// Scene file name for index k.
inline std::string scene_file_name(std::size_t k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%05zu.bfsc", k);
  return buf;
}

/// Writes `count` scenes plus a manifest; scene k uses seed (seed, k).
inline std::vector<std::string> generate_dataset(const std::filesystem::path& dir, const ProjectConfig& cfg,
                                                 std::size_t count, std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  std::vector<std::string> names;
  for (std::size_t k = 0; k < count; ++k) {
    const std::uint64_t s = diff::hash_name(std::to_string(k), seed);
    SceneRecord rec = make_record(generate_scene(s, cfg.scene), cfg.radar, s);
    names.push_back(scene_file_name(k));
    save_scene((dir / names.back()).string(), rec);
  }
  write_manifest(dir, names);
  return names;
}

// ---------------------------------------------------------------------------
// Top-down pictures. Image row 0 is the far +x edge and column 0 the +y
// edge, so the ego heading points up and its left side is on the left.

enum class OverlayClass : std::uint8_t { kBackground, kCorrect, kMissing, kWrong, kIgnored };

inline constexpr std::uint8_t kOverlayColors[5][3] = {
    {30, 30, 30},    // background
    {40, 200, 60},   // correct: predicted vehicle cell
    {240, 200, 30},  // missing: vehicle cell not predicted
    {220, 40, 40},   // wrong: predicted where there is none
    {110, 110, 110}, // ignored: low-visibility vehicle
};

inline std::size_t display_index(std::size_t i, std::size_t j, std::size_t rows, std::size_t cols) {
  return (rows - 1 - i) * cols + (cols - 1 - j);
}

inline std::vector<OverlayClass> classify(const diff::Tensor& gt, const diff::Tensor& ignore,
                                          const std::vector<bool>& pred) {
  std::vector<OverlayClass> out(gt.size());
  for (std::size_t k = 0; k < gt.size(); ++k) {
    const bool t = gt[k] > 0.5, p = pred[k];
    if (ignore[k] > 0.5) out[k] = OverlayClass::kIgnored;
    else if (t && p) out[k] = OverlayClass::kCorrect;
    else if (t) out[k] = OverlayClass::kMissing;
    else if (p) out[k] = OverlayClass::kWrong;
    else out[k] = OverlayClass::kBackground;
  }
  return out;
}

/// RGB8 overlay (interleaved, P6 layout), `scale` pixels per cell.
inline std::vector<std::uint8_t> overlay_pixels(const std::vector<OverlayClass>& cls, std::size_t rows,
                                                std::size_t cols, std::size_t scale) {
  const std::size_t H = rows * scale, W = cols * scale;
  std::vector<std::uint8_t> rgb(3 * H * W);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      const std::size_t d = display_index(i, j, rows, cols);
      const std::size_t r = d / cols, c = d % cols;
      const auto* col = kOverlayColors[static_cast<int>(cls[i * cols + j])];
      for (std::size_t a = 0; a < scale; ++a)
        for (std::size_t b = 0; b < scale; ++b)
          for (int ch = 0; ch < 3; ++ch) rgb[3 * ((r * scale + a) * W + c * scale + b) + ch] = col[ch];
    }
  }
  return rgb;
}

/// Grid description stored in PGM comments so maps carry their geometry.
inline std::string grid_comment(const geom::GridSpec& g) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "grid %.17g %.17g %.17g %.17g %.17g", g.x_min, g.x_max, g.y_min, g.y_max,
                g.resolution);
  return buf;
}

inline std::optional<geom::GridSpec> parse_grid_comment(const std::vector<std::string>& comments) {
  for (const auto& c : comments) {
    geom::GridSpec g;
    if (std::sscanf(c.c_str(), "grid %lf %lf %lf %lf %lf", &g.x_min, &g.x_max, &g.y_min, &g.y_max,
                    &g.resolution) == 5) {
      return g;
    }
  }
  return std::nullopt;
}

/// [1, 1, rows, cols] map in [0, 1] -> display-oriented gray image.
inline GrayImage map_to_pgm(const diff::Tensor& map, const geom::GridSpec& grid) {
  const std::size_t R = grid.rows(), C = grid.cols();
  GrayImage im;
  im.height = static_cast<int>(R);
  im.width = static_cast<int>(C);
  im.pixels.resize(R * C);
  im.comments.push_back(grid_comment(grid));
  for (std::size_t i = 0; i < R; ++i)
    for (std::size_t j = 0; j < C; ++j)
      im.pixels[display_index(i, j, R, C)] =
          static_cast<std::uint8_t>(std::lround(std::clamp(map[i * C + j], 0.0, 1.0) * 255.0));
  return im;
}

/// Inverse of map_to_pgm for binary predictions (pixel >= 128 is a vehicle).
inline std::vector<bool> pgm_to_mask(const GrayImage& im) {
  const std::size_t R = static_cast<std::size_t>(im.height), C = static_cast<std::size_t>(im.width);
  std::vector<bool> mask(R * C);
  for (std::size_t i = 0; i < R; ++i)
    for (std::size_t j = 0; j < C; ++j) mask[i * C + j] = im.pixels[display_index(i, j, R, C)] >= 128;
  return mask;
}

}  // namespace bevfuse::synth
