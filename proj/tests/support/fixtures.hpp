#pragma once

// Shared small scenes for unit and acceptance tests.

#include <random>

#include "bevfuse/train/sample.hpp"

namespace fixture {

using namespace bevfuse;

inline diff::Tensor random_tensor(diff::Shape shape, std::uint64_t seed, double lo = -1.0,
                                  double hi = 1.0) {
  diff::Tensor t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(lo, hi);
  for (double& v : t.values()) v = d(rng);
  return t;
}

/// Two 64x96 cameras, 32x32 internal grid, tiny widths.
inline fusion::ModelConfig micro_config() {
  fusion::ModelConfig cfg;
  cfg.image_height = 64;
  cfg.image_width = 96;
  cfg.encoder = {4, {8, 8, 8}, 4};
  cfg.internal = geom::GridSpec::centered(12.8, 0.8).with_vertical({-1, 3, 2});
  cfg.output = geom::GridSpec::centered(12.0, 1.0);
  cfg.radar.encoder = {8, 8, 1};
  cfg.radar.bev_channels = 4;
  cfg.radar.sweeps = 2;
  return cfg;
}

/// Front and rear camera, 12 radar points over two sweeps.
inline fusion::SceneInput micro_scene(std::uint64_t seed = 5) {
  fusion::SceneInput in;
  for (int c = 0; c < 2; ++c) {
    in.calibs.push_back(
        geom::make_horizontal_camera(geom::Vec3(0, 0, 1.5), c * 3.14159, 1.8, 64, 96));
    in.images.push_back(random_tensor({3, 64, 96}, seed * 31 + 10 + c, 0, 1));
  }
  in.cloud.num_sweeps = 2;
  in.cloud.encoding = radar::TemporalEncoding::kOneHot;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(-12, 12);
  for (int p = 0; p < 12; ++p) {
    radar::RadarPoint q;
    q.x = d(rng);
    q.y = d(rng);
    q.radial_velocity = 0.1 * p;
    q.rcs = 1.0;
    q.sweep = p % 2;
    in.cloud.points.push_back(q);
  }
  return in;
}

/// Micro scene with a square target blob on both grids.
inline train::Sample micro_sample(std::uint64_t seed = 5) {
  train::Sample s;
  s.input = micro_scene(seed);
  const auto cfg = micro_config();
  auto blob = [&](const geom::GridSpec& grid) {
    diff::Tensor t({1, 1, grid.rows(), grid.cols()});
    for (std::size_t i = 0; i < grid.rows(); ++i)
      for (std::size_t j = 0; j < grid.cols(); ++j) {
        const double x = grid.row_center(i), y = grid.col_center(j);
        if (std::abs(x - 4.0) < 2.5 && std::abs(y + 2.0) < 1.5) t[i * grid.cols() + j] = 1.0;
      }
    return t;
  };
  s.target = blob(cfg.output);
  s.aux_target = blob(cfg.internal);
  s.ignore = diff::Tensor(s.target.shape());
  s.aux_ignore = diff::Tensor(s.aux_target.shape());
  return s;
}

}  // namespace fixture
