#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "bevfuse/geometry/grid_spec.hpp"
#include "bevfuse/radar/point_cloud.hpp"

namespace bevfuse::radar {

inline std::uint64_t spread_bits(std::uint32_t v) {
  std::uint64_t x = v;
  x = (x | (x << 16)) & 0x0000FFFF0000FFFFull;
  x = (x | (x << 8)) & 0x00FF00FF00FF00FFull;
  x = (x | (x << 4)) & 0x0F0F0F0F0F0F0F0Full;
  x = (x | (x << 2)) & 0x3333333333333333ull;
  x = (x | (x << 1)) & 0x5555555555555555ull;
  return x;
}

/// Z-order code; x occupies the even bits.
inline std::uint64_t morton_code(std::uint32_t x, std::uint32_t y) {
  return spread_bits(x) | (spread_bits(y) << 1);
}

/// Cell of a point with out-of-range coordinates clipped to the border.
inline std::pair<std::uint32_t, std::uint32_t> clipped_cell(const geom::GridSpec& grid, double x,
                                                            double y) {
  auto q = [](double v, double lo, double res, std::size_t n) {
    const double c = std::floor((v - lo) / res);
    if (!(c >= 0.0)) return std::uint32_t{0};
    return static_cast<std::uint32_t>(std::min(c, static_cast<double>(n - 1)));
  };
  return {q(x, grid.x_min, grid.resolution, grid.rows()),
          q(y, grid.y_min, grid.resolution, grid.cols())};
}

/// Point indices ordered by the Morton code of their (row, col) cell; equal
/// codes keep input order.
inline std::vector<std::size_t> serialize_points(const RadarPointCloud& cloud,
                                                 const geom::GridSpec& grid) {
  std::vector<std::uint64_t> code(cloud.size());
  for (std::size_t p = 0; p < cloud.size(); ++p) {
    const auto [i, j] = clipped_cell(grid, cloud.points[p].x, cloud.points[p].y);
    code[p] = morton_code(i, j);
  }
  std::vector<std::size_t> order(cloud.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return code[a] < code[b]; });
  return order;
}

}  // namespace bevfuse::radar
