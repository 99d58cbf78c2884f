#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <Eigen/LU>

#include <cmath>
#include <optional>
#include <vector>

#include "bevfuse/geometry/grid_spec.hpp"

namespace bevfuse::geom {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

inline constexpr double kNearPlane = 0.1;

/// Rigid transform check: orthonormal rotation block with det +1 and
/// [0 0 0 1] bottom row.
inline bool is_rigid(const Mat4& T, double tol = 1e-6) {
  const Mat3 R = T.topLeftCorner<3, 3>();
  if (!((R.transpose() * R - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol)) return false;
  if (!(std::abs(R.determinant() - 1.0) <= tol)) return false;
  return T.row(3).isApprox(Eigen::RowVector4d(0, 0, 0, 1), tol) &&
         T.allFinite();
}

inline Mat4 rigid_inverse(const Mat4& T) {
  Mat4 inv = Mat4::Identity();
  const Mat3 Rt = T.topLeftCorner<3, 3>().transpose();
  inv.topLeftCorner<3, 3>() = Rt;
  inv.topRightCorner<3, 1>() = -Rt * T.topRightCorner<3, 1>();
  return inv;
}

inline Vec3 transform_point(const Mat4& T, const Vec3& p) {
  return T.topLeftCorner<3, 3>() * p + T.topRightCorner<3, 1>();
}

/// Pinhole camera. Extrinsics map ego -> camera; the camera looks down +z,
/// u grows to the right, v grows downward, integer pixels are pixel centers.
///
/// Two augmentation hooks compose around the physical model: `ego_aug_inv`
/// maps augmented-ego coordinates back to the physical ego frame before the
/// extrinsics (BEV rotation/scale/flip), and `image_aug` is a pixel-space
/// affine applied after projection (image flip/zoom/rotation). Both default
/// to identity and leave the physical calibration untouched.
struct CameraCalibration {
  Mat3 intrinsics = Mat3::Identity();
  Mat4 extrinsics = Mat4::Identity();
  int height = 0;
  int width = 0;
  Mat4 ego_aug_inv = Mat4::Identity();
  Mat3 image_aug = Mat3::Identity();

  double fx() const { return intrinsics(0, 0); }
  double fy() const { return intrinsics(1, 1); }
  double cx() const { return intrinsics(0, 2); }
  double cy() const { return intrinsics(1, 2); }

  void validate() const {
    if (height <= 0 || width <= 0) throw GeometryError("camera: empty image size");
    if (!(fx() > 0.0 && fy() > 0.0)) throw GeometryError("camera: focal lengths must be positive");
    if (!(cx() >= 0.0 && cx() < width && cy() >= 0.0 && cy() < height)) {
      throw GeometryError("camera: principal point outside the image");
    }
    if (!is_rigid(extrinsics)) throw GeometryError("camera: extrinsics are not a rigid transform");
  }

  Vec3 to_camera(const Vec3& p_ego) const {
    const Vec3 p = transform_point(ego_aug_inv, p_ego);
    return transform_point(extrinsics, p);
  }

  /// Pixel of a camera-frame point (no validity test).
  Vec2 pixel_of(const Vec3& p_cam) const {
    const double u = fx() * p_cam.x() / p_cam.z() + cx();
    const double v = fy() * p_cam.y() / p_cam.z() + cy();
    const Eigen::Vector3d q = image_aug * Eigen::Vector3d(u, v, 1.0);
    return {q.x(), q.y()};
  }

  bool in_image(const Vec2& px) const {
    return px.x() >= -0.5 && px.x() < width - 0.5 && px.y() >= -0.5 && px.y() < height - 0.5;
  }

  /// Projection of an ego-frame point, or nullopt when it is closer than the
  /// near plane or lands outside the image rectangle.
  std::optional<Vec2> project(const Vec3& p_ego) const {
    const Vec3 pc = to_camera(p_ego);
    if (!(pc.z() > kNearPlane)) return std::nullopt;
    Vec2 px = pixel_of(pc);
    if (!in_image(px)) return std::nullopt;
    return px;
  }

  /// Inverse of project() for a pixel observed at camera depth z.
  Vec3 unproject(const Vec2& px, double depth) const {
    const Eigen::Vector3d q = image_aug.inverse() * Eigen::Vector3d(px.x(), px.y(), 1.0);
    const Vec3 pc((q.x() - cx()) / fx() * depth, (q.y() - cy()) / fy() * depth, depth);
    const Vec3 p = transform_point(rigid_inverse(extrinsics), pc);
    const Mat4 aug = ego_aug_inv.inverse();
    return transform_point(aug, p);
  }

  Vec3 center_ego() const {
    return unproject(pixel_of(Vec3(0, 0, 1)), 0.0);
  }
};

/// Camera looking horizontally along ego heading `yaw` from `position`.
inline CameraCalibration make_horizontal_camera(const Vec3& position, double yaw,
                                                double hfov_rad, int height, int width) {
  CameraCalibration c;
  c.height = height;
  c.width = width;
  const double f = 0.5 * width / std::tan(0.5 * hfov_rad);
  c.intrinsics << f, 0, 0.5 * (width - 1), 0, f, 0.5 * (height - 1), 0, 0, 1;
  const Vec3 forward(std::cos(yaw), std::sin(yaw), 0.0);
  const Vec3 right(std::sin(yaw), -std::cos(yaw), 0.0);
  const Vec3 down(0.0, 0.0, -1.0);
  Mat3 R;
  R.row(0) = right.transpose();
  R.row(1) = down.transpose();
  R.row(2) = forward.transpose();
  c.extrinsics = Mat4::Identity();
  c.extrinsics.topLeftCorner<3, 3>() = R;
  c.extrinsics.topRightCorner<3, 1>() = -R * position;
  return c;
}

struct ProjectedVoxels {
  std::vector<Vec2> pixels;
  std::vector<double> depth;
  std::vector<bool> valid;
};

/// Projects every voxel center of a 3D grid. Voxel v = (k * rows + i) * cols + j
/// for layer k, row i, column j.
inline ProjectedVoxels project_voxels(const GridSpec& grid, const CameraCalibration& calib) {
  if (!grid.vertical) throw GeometryError("project_voxels: grid has no vertical extent");
  const std::size_t R = grid.rows(), C = grid.cols(), Z = grid.layers();
  ProjectedVoxels out;
  const std::size_t n = R * C * Z;
  out.pixels.resize(n);
  out.depth.resize(n);
  out.valid.resize(n);
  std::size_t v = 0;
  for (std::size_t k = 0; k < Z; ++k) {
    for (std::size_t i = 0; i < R; ++i) {
      for (std::size_t j = 0; j < C; ++j, ++v) {
        const Vec3 p(grid.row_center(i), grid.col_center(j), grid.layer_center(k));
        const Vec3 pc = calib.to_camera(p);
        out.depth[v] = pc.z();
        if (pc.z() > kNearPlane) {
          out.pixels[v] = calib.pixel_of(pc);
          out.valid[v] = calib.in_image(out.pixels[v]);
        } else {
          out.pixels[v] = Vec2(-1.0, -1.0);
          out.valid[v] = false;
        }
      }
    }
  }
  return out;
}

}  // namespace bevfuse::geom
