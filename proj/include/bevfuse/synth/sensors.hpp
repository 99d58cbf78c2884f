#pragma once

#include <cstdint>
#include <limits>

#include "bevfuse/diffcore/tensor.hpp"
#include "bevfuse/radar/point_cloud.hpp"
#include "bevfuse/synth/scene.hpp"

namespace bevfuse::synth {

/// Planar RGB8 image, channel-major.
struct Image8 {
  int height = 0, width = 0;
  std::vector<std::uint8_t> rgb;  // 3 * height * width

  friend bool operator==(const Image8&, const Image8&) = default;

  diff::Tensor to_tensor() const {
    diff::Tensor t({3, static_cast<std::size_t>(height), static_cast<std::size_t>(width)});
    for (std::size_t i = 0; i < rgb.size(); ++i) t[i] = rgb[i] / 255.0;
    return t;
  }
  static Image8 from_tensor(const diff::Tensor& t) {
    Image8 im;
    im.height = static_cast<int>(t.dim(1));
    im.width = static_cast<int>(t.dim(2));
    im.rgb.resize(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
      im.rgb[i] = static_cast<std::uint8_t>(std::lround(std::clamp(t[i], 0.0, 1.0) * 255.0));
    }
    return im;
  }
};

namespace palette {
inline constexpr double kSky[3] = {0.55, 0.70, 0.90};
inline constexpr double kGround[3] = {0.42, 0.40, 0.38};
inline constexpr double kVehicle[3] = {0.85, 0.25, 0.15};
inline constexpr double kFarPlane = 80.0;
}  // namespace palette

/// Brightness of a vehicle face given the hit axis/sign.
inline double face_shade(Shading mode, int axis, double sign) {
  if (mode == Shading::kFlat) return 0.8;
  if (axis == 2) return 1.0;
  if (axis == 0) return sign > 0 ? 0.85 : 0.7;
  return sign > 0 ? 0.6 : 0.5;
}

/// Ray-cast pseudo-image: the nearest vehicle face along each pixel ray,
/// otherwise ground (shaded by distance in normal mode) or sky.
inline diff::Tensor render_camera(const Scene& s, const geom::CameraCalibration& cam) {
  cam.validate();
  const std::size_t H = static_cast<std::size_t>(cam.height), W = static_cast<std::size_t>(cam.width);
  diff::Tensor img({3, H, W});
  const Vec3 origin = cam.center_ego();
  for (std::size_t v = 0; v < H; ++v) {
    for (std::size_t u = 0; u < W; ++u) {
      const Vec3 dir = (cam.unproject(Vec2(double(u), double(v)), 1.0) - origin).normalized();
      double best = std::numeric_limits<double>::infinity();
      double color[3];
      std::copy(palette::kSky, palette::kSky + 3, color);
      if (dir.z() < -1e-12) {
        const double t = -origin.z() / dir.z();
        if (t < palette::kFarPlane) {
          best = t;
          const double f = s.shading == Shading::kFlat ? 1.0 : 0.55 + 0.75 * std::exp(-t / 12.0);
          for (int c = 0; c < 3; ++c) color[c] = palette::kGround[c] * f;
        }
      }
      for (const VehicleBox& b : s.vehicles) {
        auto h = intersect_box(b, origin, dir);
        if (h && h->t < best) {
          best = h->t;
          const double f = b.tint * face_shade(s.shading, h->axis, h->sign);
          for (int c = 0; c < 3; ++c) color[c] = palette::kVehicle[c] * f;
        }
      }
      for (std::size_t c = 0; c < 3; ++c) img[(c * H + v) * W + u] = std::clamp(color[c], 0.0, 1.0);
    }
  }
  return img;
}

struct RadarParams {
  std::size_t sweeps = 7;
  double sweep_dt = 0.075;     // seconds between sweeps
  double sensor_height = 0.5;  // single virtual sensor at the ego origin
  double max_range = 40.0;
  std::size_t points_per_vehicle = 6;
  double position_noise = 0.1;  // m, per axis
  double velocity_noise = 0.1;  // m/s
  std::size_t clutter = 5;      // ground returns per sweep
  double dropout = 0.0;

  void validate() const {
    if (sweeps == 0) throw std::invalid_argument("radar params: sweeps must be at least 1");
    if (!(sweep_dt >= 0) || !(max_range > 0) || position_noise < 0 || velocity_noise < 0) {
      throw std::invalid_argument("radar params: negative noise, range or period");
    }
    if (dropout < 0 || dropout > 1) throw std::invalid_argument("radar params: dropout must lie in [0, 1]");
  }
};

/// Pose (world <- ego) of the sweep `age` seconds before the reference time.
inline geom::Mat4 ego_pose_at(const Scene& s, double time) {
  geom::Mat4 shift = geom::Mat4::Identity();
  shift(0, 3) = s.ego_velocity.x() * time;
  shift(1, 3) = s.ego_velocity.y() * time;
  return s.ego_pose * shift;
}

/// Vehicle positions at `time` relative to the reference (constant velocity,
/// reference-ego frame).
inline VehicleBox vehicle_at(const VehicleBox& v, double time) {
  VehicleBox m = v;
  m.center.x() += v.velocity.x() * time;
  m.center.y() += v.velocity.y() * time;
  return m;
}

/// K sweeps, oldest first; each holds returns in its own ego frame and its
/// pose.
inline std::vector<radar::RadarSweep> simulate_radar(const Scene& s, const RadarParams& p,
                                                     std::uint64_t seed) {
  p.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const geom::Mat4 ref_inv = geom::rigid_inverse(s.ego_pose);
  const Vec3 ego_vel_ref(s.ego_velocity.x(), s.ego_velocity.y(), 0.0);

  std::vector<radar::RadarSweep> sweeps(p.sweeps);
  for (std::size_t k = 0; k < p.sweeps; ++k) {
    const double time = -static_cast<double>(p.sweeps - 1 - k) * p.sweep_dt;
    const geom::Mat4 pose = ego_pose_at(s, time);
    // Everything below is in the reference ego frame, then moved to this sweep's frame.
    const geom::Mat4 to_sweep = geom::rigid_inverse(pose) * s.ego_pose;
    const geom::Mat4 from_sweep = ref_inv * pose;
    const Vec3 sensor = geom::transform_point(from_sweep, Vec3(0, 0, p.sensor_height));
    Scene now = s;
    for (auto& v : now.vehicles) v = vehicle_at(v, time);

    auto emit = [&](const Vec3& point, const Vec3& target_vel, double rcs) {
      if (u01(rng) < p.dropout) return;
      const Vec3 los = (point - sensor).normalized();
      const double vr = (target_vel - ego_vel_ref).dot(los) + p.velocity_noise * gauss(rng);
      Vec3 q = geom::transform_point(to_sweep, point);
      q += p.position_noise * Vec3(gauss(rng), gauss(rng), gauss(rng));
      radar::RadarReturn r;
      r.x = q.x();
      r.y = q.y();
      r.z = q.z();
      r.radial_velocity = vr;
      r.rcs = rcs;
      sweeps[k].returns.push_back(r);
    };

    for (std::size_t vi = 0; vi < now.vehicles.size(); ++vi) {
      const VehicleBox& v = now.vehicles[vi];
      if ((v.center - sensor).head<2>().norm() > p.max_range) continue;
      // Vertical faces whose outward normal points toward the sensor.
      const Vec3 local_sensor = v.to_local(sensor);
      const Vec3 h = v.half_extent();
      std::vector<std::pair<int, double>> faces;
      std::vector<double> areas;
      for (int axis = 0; axis < 2; ++axis) {
        for (double sign : {-1.0, 1.0}) {
          if (sign * local_sensor[axis] > h[axis]) {
            faces.emplace_back(axis, sign);
            areas.push_back(4.0 * h[1 - axis] * h[2]);
          }
        }
      }
      if (faces.empty()) continue;
      std::discrete_distribution<std::size_t> pick(areas.begin(), areas.end());
      const Vec3 vel(v.velocity.x(), v.velocity.y(), 0.0);
      for (std::size_t n = 0; n < p.points_per_vehicle; ++n) {
        const auto [axis, sign] = faces[pick(rng)];
        Vec3 local;
        local[axis] = sign * h[axis];
        local[1 - axis] = (2.0 * u01(rng) - 1.0) * h[1 - axis];
        local[2] = (2.0 * u01(rng) - 1.0) * h[2];
        const double c = std::cos(v.yaw), sn = std::sin(v.yaw);
        const Vec3 world = v.center + Vec3(c * local.x() - sn * local.y(), sn * local.x() + c * local.y(), local.z());
        if (segment_blocked(now, sensor, world, vi)) continue;
        emit(world, vel, v.rcs);
      }
    }
    for (std::size_t n = 0; n < p.clutter; ++n) {
      const double r = p.max_range * std::sqrt(u01(rng)), a = 2.0 * std::numbers::pi * u01(rng);
      const Vec3 ground(sensor.x() + r * std::cos(a), sensor.y() + r * std::sin(a), 0.0);
      emit(ground, Vec3::Zero(), -5.0 + 5.0 * u01(rng));
    }
    sweeps[k].pose = pose;
  }
  return sweeps;
}

// ---------------------------------------------------------------------------
// Ground truth

inline constexpr std::size_t kVisibilitySamples = 32;
inline constexpr double kVisibilityCut = 0.4;

/// Evenly spaced points on the footprint boundary at mid-height.
inline std::vector<Vec3> boundary_samples(const VehicleBox& v, std::size_t n = kVisibilitySamples) {
  const auto c = v.footprint();
  const double per = 2.0 * (v.length + v.width);
  std::vector<Vec3> out;
  for (std::size_t k = 0; k < n; ++k) {
    double d = per * (static_cast<double>(k) + 0.5) / static_cast<double>(n);
    for (std::size_t e = 0; e < 4; ++e) {
      const Vec2 a = c[e], b = c[(e + 1) % 4];
      const double len = (b - a).norm();
      if (d <= len || e == 3) {
        const Vec2 p = a + (b - a) * std::min(1.0, d / len);
        out.emplace_back(p.x(), p.y(), v.center.z());
        break;
      }
      d -= len;
    }
  }
  return out;
}

/// Fraction of boundary samples that some camera sees: inside its image and
/// not hidden behind another vehicle. The vehicle does not occlude itself.
inline double visibility_fraction(const Scene& s, std::size_t index,
                                  const std::vector<geom::CameraCalibration>& cams) {
  const auto samples = boundary_samples(s.vehicles[index]);
  std::size_t seen = 0;
  for (const Vec3& p : samples) {
    for (const auto& cam : cams) {
      if (!cam.project(p)) continue;
      if (segment_blocked(s, cam.center_ego(), p, index)) continue;
      ++seen;
      break;
    }
  }
  return static_cast<double>(seen) / static_cast<double>(samples.size());
}

inline void compute_visibility(Scene& s) {
  for (std::size_t i = 0; i < s.vehicles.size(); ++i) s.vehicles[i].visibility = visibility_fraction(s, i, s.cameras);
}

struct GroundTruth {
  diff::Tensor gt;      // [1, 1, rows, cols]
  diff::Tensor ignore;  // cells of vehicles below the visibility cut
};

/// A cell belongs to a vehicle iff its center lies inside the footprint.
inline GroundTruth rasterize_gt(const Scene& s, const geom::GridSpec& grid) {
  const std::size_t R = grid.rows(), C = grid.cols();
  GroundTruth out{diff::Tensor({1, 1, R, C}), diff::Tensor({1, 1, R, C})};
  for (const VehicleBox& v : s.vehicles) {
    diff::Tensor& dst = v.visibility < kVisibilityCut ? out.ignore : out.gt;
    const double reach = 0.5 * std::hypot(v.length, v.width);
    for (std::size_t i = 0; i < R; ++i) {
      const double x = grid.row_center(i);
      if (std::abs(x - v.center.x()) > reach) continue;
      for (std::size_t j = 0; j < C; ++j) {
        const double y = grid.col_center(j);
        if (v.contains_xy(x, y)) dst[i * C + j] = 1.0;
      }
    }
  }
  // Visible vehicles win where footprints of both kinds touch a cell.
  for (std::size_t i = 0; i < out.gt.size(); ++i) {
    if (out.gt[i] > 0) out.ignore[i] = 0.0;
  }
  return out;
}

}  // namespace bevfuse::synth
