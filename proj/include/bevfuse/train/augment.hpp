#pragma once

#include <cmath>
#include <numbers>
#include <random>

#include "bevfuse/geometry/sampling.hpp"
#include "bevfuse/train/sample.hpp"

namespace bevfuse::train {

struct AugmentConfig {
  bool enabled = false;
  double image_flip_prob = 0.5;
  double zoom_min = 0.9, zoom_max = 1.1;
  double image_rot_deg = 5.0;
  double bev_flip_prob = 0.5;
  double bev_rot_deg = 22.5;
  double bev_scale_min = 0.95, bev_scale_max = 1.05;
};

/// Pixel-space transform about the image center: flip, then zoom, then rotate.
struct ImageAug {
  bool flip = false;
  double zoom = 1.0;
  double rotation = 0.0;  // radians

  geom::Mat3 matrix(int height, int width) const {
    const double cu = 0.5 * (width - 1), cv = 0.5 * (height - 1);
    geom::Mat3 to, back, f, z, r;
    to << 1, 0, -cu, 0, 1, -cv, 0, 0, 1;
    back << 1, 0, cu, 0, 1, cv, 0, 0, 1;
    f << (flip ? -1 : 1), 0, 0, 0, 1, 0, 0, 0, 1;
    z << zoom, 0, 0, 0, zoom, 0, 0, 0, 1;
    const double c = std::cos(rotation), s = std::sin(rotation);
    r << c, -s, 0, s, c, 0, 0, 0, 1;
    return back * r * z * f * to;
  }
};

/// Ego-frame transform of the x-y plane: flip y -> -y, then scale, then
/// rotate about z. Heights are untouched.
struct BevAug {
  bool flip = false;
  double scale = 1.0;
  double rotation = 0.0;

  geom::Mat4 matrix() const {
    const double c = std::cos(rotation), s = std::sin(rotation);
    const double fy = flip ? -1.0 : 1.0;
    geom::Mat4 m = geom::Mat4::Identity();
    m(0, 0) = scale * c;
    m(0, 1) = -scale * s * fy;
    m(1, 0) = scale * s;
    m(1, 1) = scale * c * fy;
    return m;
  }
};

struct Augmentation {
  std::vector<ImageAug> image;  // one per camera
  BevAug bev;
};

inline Augmentation draw_augmentation(const AugmentConfig& cfg, std::size_t cameras,
                                      std::mt19937_64& rng) {
  Augmentation a;
  a.image.resize(cameras);
  if (!cfg.enabled) return a;
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
  const double deg = std::numbers::pi / 180.0;
  for (auto& im : a.image) {
    im.flip = u01(rng) < cfg.image_flip_prob;
    im.zoom = uniform(cfg.zoom_min, cfg.zoom_max);
    im.rotation = uniform(-cfg.image_rot_deg, cfg.image_rot_deg) * deg;
  }
  a.bev.flip = u01(rng) < cfg.bev_flip_prob;
  a.bev.scale = uniform(cfg.bev_scale_min, cfg.bev_scale_max);
  a.bev.rotation = uniform(-cfg.bev_rot_deg, cfg.bev_rot_deg) * deg;
  return a;
}

/// out(p) = in(A^-1 p), bilinear, zero outside. Image is [3, H, W].
inline Tensor warp_image(const Tensor& image, const geom::Mat3& A) {
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
  const geom::Mat3 inv = A.inverse();
  Tensor out(image.shape());
  for (std::size_t v = 0; v < H; ++v) {
    for (std::size_t u = 0; u < W; ++u) {
      const Eigen::Vector3d q = inv * Eigen::Vector3d(double(u), double(v), 1.0);
      for (std::size_t c = 0; c < C; ++c) {
        out[(c * H + v) * W + u] = geom::bilinear_at(image, c, q.x() / q.z(), q.y() / q.z());
      }
    }
  }
  return out;
}

/// Nearest-cell warp of a [1, C, rows, cols] BEV map: out(p) = in(T^-1 p).
inline Tensor warp_bev_map(const Tensor& map, const geom::GridSpec& grid, const geom::Mat4& T) {
  const std::size_t C = map.dim(1), R = grid.rows(), K = grid.cols();
  if (map.dim(2) != R || map.dim(3) != K) throw diff::ShapeError("warp_bev_map: map/grid mismatch");
  const geom::Mat4 inv = T.inverse();
  Tensor out(map.shape());
  for (std::size_t i = 0; i < R; ++i) {
    for (std::size_t j = 0; j < K; ++j) {
      const geom::Vec3 p = geom::transform_point(inv, geom::Vec3(grid.row_center(i), grid.col_center(j), 0));
      const long src = grid.flat_cell(p.x(), p.y());
      if (src < 0) continue;
      for (std::size_t c = 0; c < C; ++c) out[c * R * K + i * K + j] = map[c * R * K + std::size_t(src)];
    }
  }
  return out;
}

/// Applies image augmentations per camera and one BEV transform jointly to
/// radar points, camera extrinsics and every ground-truth map.
inline Sample augment_sample(const Sample& s, const Augmentation& aug, const geom::GridSpec& internal,
                             const geom::GridSpec& output) {
  if (aug.image.size() != s.input.images.size()) {
    throw std::invalid_argument("augment_sample: one image augmentation per camera required");
  }
  Sample out = s;
  for (std::size_t c = 0; c < s.input.images.size(); ++c) {
    auto& calib = out.input.calibs[c];
    const geom::Mat3 A = aug.image[c].matrix(calib.height, calib.width);
    if (!A.isIdentity(0.0)) {
      out.input.images[c] = warp_image(s.input.images[c], A);
      calib.image_aug = A * calib.image_aug;
    }
  }
  const geom::Mat4 T = aug.bev.matrix();
  if (T.isIdentity(0.0)) return out;
  const geom::Mat4 Tinv = T.inverse();
  for (auto& calib : out.input.calibs) calib.ego_aug_inv = calib.ego_aug_inv * Tinv;
  for (auto& p : out.input.cloud.points) {
    const geom::Vec3 q = geom::transform_point(T, geom::Vec3(p.x, p.y, p.z));
    p.x = q.x();
    p.y = q.y();
  }
  out.target = warp_bev_map(s.target, output, T);
  out.ignore = warp_bev_map(s.ignore, output, T);
  out.aux_target = warp_bev_map(s.aux_target, internal, T);
  out.aux_ignore = warp_bev_map(s.aux_ignore, internal, T);
  return out;
}

}  // namespace bevfuse::train
