#pragma once

#include <string>

#include "bevfuse/diffcore/ops.hpp"

namespace bevfuse::diff {

// Parameter naming: "<prefix>.w" / "<prefix>.b".

inline void add_conv(ParameterStore& ps, const std::string& prefix, std::size_t out_ch,
                     std::size_t in_ch, std::size_t k, bool bias = true) {
  ps.add(prefix + ".w", {out_ch, in_ch, k, k}, Init::kFanInUniform, in_ch * k * k);
  if (bias) ps.add(prefix + ".b", {out_ch}, Init::kZeros);
}

inline void add_linear(ParameterStore& ps, const std::string& prefix, std::size_t out,
                       std::size_t in, bool bias = true) {
  ps.add(prefix + ".w", {out, in}, Init::kFanInUniform, in);
  if (bias) ps.add(prefix + ".b", {out}, Init::kZeros);
}

inline std::optional<Var> maybe_param(Graph& g, const std::string& name) {
  if (!g.params().contains(name)) return std::nullopt;
  return g.param(name);
}

/// 'same' padding for odd kernels.
inline Var conv(Graph& g, const std::string& prefix, Var x, std::size_t stride = 1) {
  Var w = g.param(prefix + ".w");
  const std::size_t k = w.dim(2);
  return conv2d(x, w, maybe_param(g, prefix + ".b"), {stride, k / 2});
}

inline Var dense(Graph& g, const std::string& prefix, Var x) {
  return linear(x, g.param(prefix + ".w"), maybe_param(g, prefix + ".b"));
}

/// conv -> instance norm -> relu
inline Var conv_norm_relu(Graph& g, const std::string& prefix, Var x, std::size_t stride = 1) {
  return relu(instance_norm(conv(g, prefix, x, stride)));
}

}  // namespace bevfuse::diff
