#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "bevfuse/diffcore/graph.hpp"
#include "bevfuse/geometry/camera.hpp"
#include "bevfuse/geometry/grid_spec.hpp"

namespace bevfuse::radar {

using diff::Shape;
using diff::Tensor;
using diff::Graph;
using diff::ParameterStore;
using diff::Var;

struct RadarReturn {
  double x = 0, y = 0, z = 0;
  double radial_velocity = 0;
  double rcs = 0;
};

/// One acquisition: returns in the ego frame at capture time plus that
/// frame's pose (world <- ego).
struct RadarSweep {
  std::vector<RadarReturn> returns;
  geom::Mat4 pose = geom::Mat4::Identity();
};

enum class TemporalEncoding { kOrdinal, kOneHot };

inline const char* encoding_name(TemporalEncoding e) {
  return e == TemporalEncoding::kOneHot ? "onehot" : "ordinal";
}

struct RadarPoint : RadarReturn {
  std::size_t sweep = 0;  // 0 = oldest
};

/// Accumulated multi-sweep cloud in the newest sweep's ego frame.
struct RadarPointCloud {
  std::vector<RadarPoint> points;
  std::size_t num_sweeps = 1;
  TemporalEncoding encoding = TemporalEncoding::kOrdinal;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  std::size_t temporal_channels() const {
    return encoding == TemporalEncoding::kOneHot ? num_sweeps : 1;
  }
  std::size_t channels() const { return 5 + temporal_channels(); }
};

/// Normalization of the raw channels before they enter the encoder.
struct PointFeatureScale {
  double xy = 50.0;
  double z = 4.0;
  double velocity = 10.0;
  double rcs = 10.0;
};

/// Sweeps ordered oldest first. Every sweep is moved into the frame of the
/// last (newest) one.
inline RadarPointCloud accumulate_sweeps(const std::vector<RadarSweep>& sweeps,
                                         TemporalEncoding encoding) {
  if (sweeps.empty()) throw std::invalid_argument("accumulate_sweeps: need at least one sweep");
  for (std::size_t k = 0; k < sweeps.size(); ++k) {
    if (!geom::is_rigid(sweeps[k].pose)) {
      throw geom::GeometryError("accumulate_sweeps: pose of sweep " + std::to_string(k) +
                                " is not rigid");
    }
  }
  RadarPointCloud cloud;
  cloud.num_sweeps = sweeps.size();
  cloud.encoding = encoding;
  const geom::Mat4 ref_inv = geom::rigid_inverse(sweeps.back().pose);
  for (std::size_t k = 0; k < sweeps.size(); ++k) {
    const geom::Mat4 to_ref = ref_inv * sweeps[k].pose;
    for (const auto& r : sweeps[k].returns) {
      const geom::Vec3 p = geom::transform_point(to_ref, geom::Vec3(r.x, r.y, r.z));
      RadarPoint q;
      static_cast<RadarReturn&>(q) = r;
      q.x = p.x();
      q.y = p.y();
      q.z = p.z();
      q.sweep = k;
      cloud.points.push_back(q);
    }
  }
  return cloud;
}

/// Temporal channels of one point.
inline void temporal_code(const RadarPointCloud& cloud, std::size_t sweep, double* out) {
  if (cloud.encoding == TemporalEncoding::kOneHot) {
    for (std::size_t k = 0; k < cloud.num_sweeps; ++k) out[k] = k == sweep ? 1.0 : 0.0;
  } else {
    out[0] = cloud.num_sweeps > 1
                 ? static_cast<double>(sweep) / static_cast<double>(cloud.num_sweeps - 1)
                 : 0.0;
  }
}

/// [P, 5 + T]: x, y, z, radial velocity, rcs (scaled) then the temporal code.
inline Tensor point_features(const RadarPointCloud& cloud, const PointFeatureScale& s = {}) {
  const std::size_t P = cloud.size(), D = cloud.channels();
  Tensor f(Shape{P, D});
  for (std::size_t p = 0; p < P; ++p) {
    const RadarPoint& q = cloud.points[p];
    double* row = f.data() + p * D;
    row[0] = q.x / s.xy;
    row[1] = q.y / s.xy;
    row[2] = q.z / s.z;
    row[3] = q.radial_velocity / s.velocity;
    row[4] = q.rcs / s.rcs;
    temporal_code(cloud, q.sweep, row + 5);
  }
  return f;
}

}  // namespace bevfuse::radar
