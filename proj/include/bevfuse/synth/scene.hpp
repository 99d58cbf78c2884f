#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "bevfuse/geometry/camera.hpp"

namespace bevfuse::synth {

using geom::Vec2;
using geom::Vec3;

class SynthError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct VehicleBox {
  Vec3 center{0, 0, 0};  // box center; the bottom face rests at center.z - h / 2
  double length = 4.5, width = 1.9, height = 1.6;
  double yaw = 0.0;
  Vec2 velocity{0, 0};
  double rcs = 10.0;
  double tint = 1.0;  // per-vehicle brightness factor
  double visibility = 1.0;

  Vec2 heading() const { return {std::cos(yaw), std::sin(yaw)}; }
  Vec2 lateral() const { return {-std::sin(yaw), std::cos(yaw)}; }

  /// Footprint corners, counter-clockwise.
  std::array<Vec2, 4> footprint() const {
    const Vec2 c = center.head<2>(), a = 0.5 * length * heading(), b = 0.5 * width * lateral();
    return {c + a + b, c - a + b, c - a - b, c + a - b};
  }

  bool contains_xy(double x, double y) const {
    const Vec2 d = Vec2(x, y) - center.head<2>();
    return std::abs(d.dot(heading())) <= 0.5 * length && std::abs(d.dot(lateral())) <= 0.5 * width;
  }

  /// Point to box-local coordinates (x along heading, y lateral, z up).
  Vec3 to_local(const Vec3& p) const {
    const Vec3 d = p - center;
    return {d.x() * std::cos(yaw) + d.y() * std::sin(yaw), -d.x() * std::sin(yaw) + d.y() * std::cos(yaw),
            d.z()};
  }
  Vec3 half_extent() const { return {0.5 * length, 0.5 * width, 0.5 * height}; }
};

enum class Shading { kNormal, kFlat };

struct Scene {
  geom::Mat4 ego_pose = geom::Mat4::Identity();  // world <- ego at the reference time
  Vec2 ego_velocity{0, 0};                       // ego frame, m/s
  std::vector<VehicleBox> vehicles;
  std::vector<geom::CameraCalibration> cameras;
  std::uint64_t rng_seed = 0;
  Shading shading = Shading::kNormal;
};

struct SceneParams {
  std::size_t vehicles_min = 3, vehicles_max = 8;
  double extent = 14.5;      // vehicle centers lie in [-extent, extent]^2
  double ego_clearance = 3;  // keep-out radius around the ego origin
  double length_min = 3.8, length_max = 5.0;
  double width_min = 1.7, width_max = 2.1;
  double height_min = 1.4, height_max = 1.9;
  double speed_max = 10.0;
  double ego_speed_max = 8.0;
  double gap = 0.3;  // minimum clearance between footprints
  std::size_t cameras = 4;
  int image_height = 64, image_width = 96;
  double hfov_deg = 100.0;
  double camera_height = 1.6;
  Shading shading = Shading::kNormal;
  std::size_t max_attempts = 2000;

  void validate() const {
    auto bad = [](const std::string& m) { throw std::invalid_argument("scene params: " + m); };
    if (vehicles_min > vehicles_max) bad("vehicles_min > vehicles_max");
    if (!(extent > 0) || ego_clearance < 0) bad("extent must be positive");
    if (!(length_min > 0 && length_min <= length_max && width_min > 0 && width_min <= width_max &&
          height_min > 0 && height_min <= height_max)) {
      bad("vehicle size ranges must be positive and ordered");
    }
    if (cameras == 0) bad("at least one camera is required");
    if (image_height <= 0 || image_width <= 0) bad("image size must be positive");
    if (!(hfov_deg > 0 && hfov_deg < 180)) bad("hfov_deg must lie in (0, 180)");
    if (speed_max < 0 || ego_speed_max < 0 || gap < 0) bad("speeds and gap must be nonnegative");
  }
};

/// Separating-axis test for two convex quads; touching counts as overlap.
inline bool footprints_overlap(const std::array<Vec2, 4>& a, const std::array<Vec2, 4>& b) {
  auto separated_on = [&](const std::array<Vec2, 4>& poly) {
    for (std::size_t i = 0; i < 4; ++i) {
      const Vec2 e = poly[(i + 1) % 4] - poly[i];
      const Vec2 n(-e.y(), e.x());
      double amin = 1e300, amax = -1e300, bmin = 1e300, bmax = -1e300;
      for (const Vec2& p : a) {
        amin = std::min(amin, n.dot(p));
        amax = std::max(amax, n.dot(p));
      }
      for (const Vec2& p : b) {
        bmin = std::min(bmin, n.dot(p));
        bmax = std::max(bmax, n.dot(p));
      }
      if (amax < bmin || bmax < amin) return true;
    }
    return false;
  };
  return !separated_on(a) && !separated_on(b);
}

/// Surround rig: evenly spaced horizontal cameras, the first facing +x.
inline std::vector<geom::CameraCalibration> surround_rig(std::size_t count, double hfov_deg, int height,
                                                         int width, double mount_height) {
  std::vector<geom::CameraCalibration> cams;
  for (std::size_t k = 0; k < count; ++k) {
    const double yaw = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(count);
    cams.push_back(geom::make_horizontal_camera(Vec3(0, 0, mount_height), yaw,
                                                hfov_deg * std::numbers::pi / 180.0, height, width));
  }
  return cams;
}

/// Rejection sampling of non-overlapping vehicles; deterministic in `seed`.
inline Scene generate_scene(std::uint64_t seed, const SceneParams& p) {
  p.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };

  Scene s;
  s.rng_seed = seed;
  s.shading = p.shading;
  s.cameras = surround_rig(p.cameras, p.hfov_deg, p.image_height, p.image_width, p.camera_height);
  s.ego_velocity = Vec2(uniform(0.0, p.ego_speed_max), 0.0);
  const std::size_t n = p.vehicles_min + static_cast<std::size_t>(
                                             u01(rng) * static_cast<double>(p.vehicles_max - p.vehicles_min + 1));
  const std::size_t target = std::min(n, p.vehicles_max);

  std::size_t attempts = 0;
  while (s.vehicles.size() < target) {
    if (++attempts > p.max_attempts) {
      throw SynthError("generate_scene: could not place " + std::to_string(target) +
                       " non-overlapping vehicles within extent " + std::to_string(p.extent) +
                       " m after " + std::to_string(p.max_attempts) + " attempts");
    }
    VehicleBox v;
    v.length = uniform(p.length_min, p.length_max);
    v.width = uniform(p.width_min, p.width_max);
    v.height = uniform(p.height_min, p.height_max);
    v.center = Vec3(uniform(-p.extent, p.extent), uniform(-p.extent, p.extent), 0.5 * v.height);
    v.yaw = uniform(-std::numbers::pi, std::numbers::pi);
    const double speed = uniform(0.0, p.speed_max);
    v.velocity = speed * v.heading();
    v.rcs = uniform(5.0, 15.0);
    v.tint = uniform(0.7, 1.0);
    if (v.center.head<2>().norm() < p.ego_clearance + 0.5 * std::hypot(v.length, v.width)) continue;
    VehicleBox grown = v;
    grown.length += p.gap;
    grown.width += p.gap;
    bool clash = false;
    for (const VehicleBox& o : s.vehicles) clash = clash || footprints_overlap(grown.footprint(), o.footprint());
    if (!clash) s.vehicles.push_back(v);
  }
  return s;
}

/// Ray / oriented box intersection (slab method). Returns entry distance
/// along the unit direction and the local axis of the entry face.
struct BoxHit {
  double t = 0;
  int axis = 0;     // 0: front/back, 1: sides, 2: top/bottom
  double sign = 1;  // outward normal sign along that axis
};

inline std::optional<BoxHit> intersect_box(const VehicleBox& b, const Vec3& origin, const Vec3& dir) {
  const Vec3 o = b.to_local(origin);
  const Vec3 d(dir.x() * std::cos(b.yaw) + dir.y() * std::sin(b.yaw),
               -dir.x() * std::sin(b.yaw) + dir.y() * std::cos(b.yaw), dir.z());
  const Vec3 h = b.half_extent();
  double t0 = -1e300, t1 = 1e300;
  BoxHit hit;
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d[a]) < 1e-15) {
      if (std::abs(o[a]) > h[a]) return std::nullopt;
      continue;
    }
    double ta = (-h[a] - o[a]) / d[a], tb = (h[a] - o[a]) / d[a];
    double sign = -1;
    if (ta > tb) {
      std::swap(ta, tb);
      sign = 1;
    }
    if (ta > t0) {
      t0 = ta;
      hit.axis = a;
      hit.sign = sign;
    }
    t1 = std::min(t1, tb);
  }
  if (t0 > t1 || t0 <= 0.0) return std::nullopt;  // miss, or origin inside/behind
  hit.t = t0;
  return hit;
}

/// Whether the open segment from `from` to `to` passes through any vehicle
/// other than `skip`.
inline bool segment_blocked(const Scene& s, const Vec3& from, const Vec3& to, std::size_t skip) {
  const Vec3 d = to - from;
  const double len = d.norm();
  if (len <= 0) return false;
  const Vec3 u = d / len;
  for (std::size_t k = 0; k < s.vehicles.size(); ++k) {
    if (k == skip) continue;
    auto h = intersect_box(s.vehicles[k], from, u);
    if (h && h->t < len - 1e-9) return true;
  }
  return false;
}

}  // namespace bevfuse::synth
