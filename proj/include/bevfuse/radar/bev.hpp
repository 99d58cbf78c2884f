#pragma once

#include <string>
#include <vector>

#include "bevfuse/diffcore/layers.hpp"
#include "bevfuse/geometry/grid_spec.hpp"
#include "bevfuse/radar/point_cloud.hpp"

namespace bevfuse::radar {

/// Flat cell index per point (-1 for points outside the grid).
inline std::vector<long> point_cells(const RadarPointCloud& cloud, const geom::GridSpec& grid) {
  std::vector<long> cells(cloud.size());
  for (std::size_t p = 0; p < cloud.size(); ++p) {
    cells[p] = grid.flat_cell(cloud.points[p].x, cloud.points[p].y);
  }
  return cells;
}

/// Sums per-point features [P, C] into [1, C, rows, cols]; out-of-grid points
/// are dropped. Gradients reach the features only.
inline Var scatter_to_bev(Var features, const RadarPointCloud& cloud, const geom::GridSpec& grid) {
  return diff::scatter_add(features, point_cells(cloud, grid), grid.rows(), grid.cols());
}

/// Multi-scale aggregation of the scattered map: stride 1/2/4 branches via
/// strided convs, a conv per scale, nearest-upsample and sum, output conv.
class PyramidAggregator {
 public:
  PyramidAggregator(std::string prefix, std::size_t in_channels, std::size_t out_channels,
                    std::size_t rows, std::size_t cols)
      : prefix_(std::move(prefix)), in_(in_channels), out_(out_channels) {
    if (rows == 0 || cols == 0 || rows % 4 != 0 || cols % 4 != 0) {
      throw diff::ShapeError("radar pyramid: BEV size " + std::to_string(rows) + "x" +
                             std::to_string(cols) + " is not divisible by 4");
    }
  }

  std::string name(const char* part) const { return prefix_ + "." + part; }

  void init(ParameterStore& ps) const {
    diff::add_conv(ps, name("down1"), out_, in_, 3);
    diff::add_conv(ps, name("down2"), out_, out_, 3);
    diff::add_conv(ps, name("down4"), out_, out_, 3);
    diff::add_conv(ps, name("scale1"), out_, out_, 3);
    diff::add_conv(ps, name("scale2"), out_, out_, 3);
    diff::add_conv(ps, name("scale4"), out_, out_, 3);
    diff::add_conv(ps, name("output"), out_, out_, 3);
  }

  Var forward(Graph& g, Var x) const {
    Var d1 = diff::relu(diff::conv(g, name("down1"), x, 1));
    Var d2 = diff::relu(diff::conv(g, name("down2"), d1, 2));
    Var d4 = diff::relu(diff::conv(g, name("down4"), d2, 2));
    Var s1 = diff::relu(diff::conv(g, name("scale1"), d1));
    Var s2 = diff::relu(diff::conv(g, name("scale2"), d2));
    Var s4 = diff::relu(diff::conv(g, name("scale4"), d4));
    Var sum = diff::add(diff::add(s1, diff::upsample_nearest(s2, 2)), diff::upsample_nearest(s4, 4));
    return diff::conv(g, name("output"), sum);
  }

 private:
  std::string prefix_;
  std::size_t in_, out_;
};

}  // namespace bevfuse::radar
