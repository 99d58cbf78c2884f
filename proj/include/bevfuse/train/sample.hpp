#pragma once

#include <vector>

#include "bevfuse/fusion/model.hpp"

namespace bevfuse::train {

using diff::Graph;
using diff::Shape;
using diff::Tensor;
using diff::Var;

/// One training/evaluation example. Maps are [1, 1, rows, cols] in {0, 1}:
/// `target`/`ignore` on the output grid, `aux_*` on the internal grid.
/// `ignore` marks cells of vehicles below the visibility cut.
struct Sample {
  fusion::SceneInput input;
  Tensor target;
  Tensor ignore;
  Tensor aux_target;
  Tensor aux_ignore;
};

/// Low-visibility vehicles are still vehicles during training; only the
/// metric excludes them.
inline Tensor training_target(const Tensor& target, const Tensor& ignore) {
  Tensor t = target;
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = std::max(target[i], ignore[i]);
  return t;
}

}  // namespace bevfuse::train
