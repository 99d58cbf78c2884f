#pragma once

#include <vector>

#include "bevfuse/diffcore/ops.hpp"
#include "bevfuse/geometry/camera.hpp"
#include "bevfuse/geometry/grid_spec.hpp"

namespace bevfuse::geom {

using diff::Graph;
using diff::Shape;
using diff::Tensor;
using diff::Var;

/// Differentiable bilinear lookup; see diff::bilinear_sample for the
/// coordinate and out-of-bounds conventions.
inline Var bilinear_sample(Var map, Var coords) { return diff::bilinear_sample(map, coords); }

/// Scalar reference for a single channel/coordinate; mirrors the kernel.
inline double bilinear_at(const Tensor& map, std::size_t channel, double u, double v) {
  const std::size_t H = map.dim(1), W = map.dim(2);
  const auto t = diff::bilinear_tap(u, v, H, W);
  if (!t.inside) return 0.0;
  const double* m = map.data() + channel * H * W;
  return (1 - t.av) * ((1 - t.au) * m[t.v0 * W + t.u0] + t.au * m[t.v0 * W + t.u1]) +
         t.av * ((1 - t.au) * m[t.v1 * W + t.u0] + t.au * m[t.v1 * W + t.u1]);
}

/// Source pixel coordinates (u = column, v = row) of every destination cell
/// center, in destination row-major order.
inline Tensor resample_coords(const GridSpec& src, const GridSpec& dst) {
  const std::size_t R = dst.rows(), C = dst.cols();
  Tensor coords(Shape{R * C, 2});
  for (std::size_t i = 0; i < R; ++i) {
    for (std::size_t j = 0; j < C; ++j) {
      const std::size_t q = i * C + j;
      coords[2 * q] = src.col_coord(dst.col_center(j));
      coords[2 * q + 1] = src.row_coord(dst.row_center(i));
    }
  }
  return coords;
}

/// Resamples a [1, C, H, W] (or [C, H, W]) BEV map from src_spec onto
/// dst_spec; destination cells outside the source extent read zero.
inline Var grid_resample(Var src, const GridSpec& src_spec, const GridSpec& dst_spec) {
  Graph& g = *src.graph;
  const Shape s = src.shape();
  const bool batched = s.size() == 4;
  if (!(s.size() == 3 || (batched && s[0] == 1))) {
    throw diff::ShapeError("grid_resample: expected [1, C, H, W] or [C, H, W], got " +
                           diff::shape_str(s));
  }
  const std::size_t C = batched ? s[1] : s[0];
  if ((batched ? s[2] : s[1]) != src_spec.rows() || (batched ? s[3] : s[2]) != src_spec.cols()) {
    throw diff::ShapeError("grid_resample: map " + diff::shape_str(s) +
                           " does not match source grid");
  }
  Var map = batched ? diff::reshape(src, {C, s[2], s[3]}) : src;
  Var coords = g.constant(resample_coords(src_spec, dst_spec));
  Var out = diff::bilinear_sample(map, coords);
  return diff::reshape(out, {1, C, dst_spec.rows(), dst_spec.cols()});
}

}  // namespace bevfuse::geom
