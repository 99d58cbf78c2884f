#pragma once

#include <vector>

#include "bevfuse/diffcore/ops.hpp"
#include "bevfuse/geometry/camera.hpp"
#include "bevfuse/geometry/grid_spec.hpp"

namespace bevfuse::image {

using diff::Graph;
using diff::Shape;
using diff::Tensor;
using diff::Var;

/// Sampling plan for one camera: feature-map coordinates of every voxel and
/// its averaging weight (1 / number of cameras that see it, 0 if unseen).
struct LiftPlan {
  Tensor coords;   // [V, 2] (u, v) in feature pixels
  Tensor weights;  // [1, V]
};

inline constexpr double kUnseenCoord = -1e6;

inline std::vector<LiftPlan> plan_lift(const std::vector<geom::CameraCalibration>& calibs,
                                       const geom::GridSpec& voxels, std::size_t stride) {
  if (calibs.empty()) throw geom::GeometryError("lift: at least one camera is required");
  const std::size_t V = voxels.rows() * voxels.cols() * voxels.layers();
  std::vector<geom::ProjectedVoxels> proj;
  for (const auto& c : calibs) proj.push_back(geom::project_voxels(voxels, c));
  std::vector<double> count(V, 0.0);
  for (const auto& p : proj) {
    for (std::size_t v = 0; v < V; ++v) count[v] += p.valid[v] ? 1.0 : 0.0;
  }
  const double s = static_cast<double>(stride);
  std::vector<LiftPlan> plans;
  for (const auto& p : proj) {
    LiftPlan plan{Tensor(Shape{V, 2}, kUnseenCoord), Tensor(Shape{1, V})};
    for (std::size_t v = 0; v < V; ++v) {
      if (!p.valid[v]) continue;
      plan.coords[2 * v] = (p.pixels[v].x() + 0.5) / s - 0.5;
      plan.coords[2 * v + 1] = (p.pixels[v].y() + 0.5) / s - 0.5;
      plan.weights[v] = 1.0 / count[v];
    }
    plans.push_back(std::move(plan));
  }
  return plans;
}

/// Backward voxel-projection lift. features[c] is camera c's finest-level map
/// [1, C, Hf, Wf] at `stride` pixels per feature cell. Every voxel center is
/// projected into each camera, sampled bilinearly where valid and averaged
/// over the cameras that see it; the Z layers are then folded into channels,
/// giving [1, Z * C, rows, cols] with channel index k * C + c.
inline Var lift_to_bev(const std::vector<Var>& features,
                       const std::vector<geom::CameraCalibration>& calibs,
                       const geom::GridSpec& voxels, std::size_t stride) {
  if (features.empty() || features.size() != calibs.size()) {
    throw geom::GeometryError("lift: need one feature map per camera (got " +
                              std::to_string(features.size()) + " maps, " +
                              std::to_string(calibs.size()) + " calibrations)");
  }
  Graph& g = *features[0].graph;
  const auto plans = plan_lift(calibs, voxels, stride);
  const std::size_t R = voxels.rows(), Cc = voxels.cols(), Z = voxels.layers();
  std::optional<Var> acc;
  std::size_t C = 0;
  for (std::size_t cam = 0; cam < features.size(); ++cam) {
    const Shape& s = features[cam].shape();
    if (s.size() != 4 || s[0] != 1) {
      throw diff::ShapeError("lift: camera feature must be [1, C, H, W], got " + diff::shape_str(s));
    }
    if (cam == 0) C = s[1];
    if (s[1] != C) throw diff::ShapeError("lift: cameras disagree on channel count");
    Var map = diff::reshape(features[cam], {s[1], s[2], s[3]});
    Var sampled = diff::bilinear_sample(map, g.constant(plans[cam].coords));
    Var term = diff::mul(sampled, g.constant(plans[cam].weights));
    acc = acc ? diff::add(*acc, term) : term;
  }
  Var grid = diff::reshape(*acc, {C, Z, R, Cc});
  return diff::reshape(diff::permute(grid, {1, 0, 2, 3}), {1, Z * C, R, Cc});
}

}  // namespace bevfuse::image
