#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "bevfuse/diffcore/layers.hpp"

namespace bevfuse::radar {

using diff::Graph;
using diff::ParameterStore;
using diff::Var;

struct PointEncoderConfig {
  std::size_t channels = 32;  // C_pt
  std::size_t window = 16;
  std::size_t blocks = 2;
};

/// Serialized-window point transformer: an MLP embedding followed by blocks
/// of single-head self-attention restricted to consecutive windows of the
/// serialized order, each with a residual and a residual feed-forward layer.
class PointEncoder {
 public:
  PointEncoder(std::string prefix, std::size_t in_channels, PointEncoderConfig cfg)
      : prefix_(std::move(prefix)), in_(in_channels), cfg_(cfg) {
    if (cfg.window < 1) throw std::invalid_argument("point encoder: window size must be >= 1");
    if (cfg.channels == 0) throw std::invalid_argument("point encoder: zero channels");
  }

  const PointEncoderConfig& config() const { return cfg_; }
  std::size_t out_channels() const { return cfg_.channels; }

  std::string block(std::size_t b, const char* part) const {
    return prefix_ + ".block" + std::to_string(b) + "." + part;
  }

  void init(ParameterStore& ps) const {
    const std::size_t C = cfg_.channels;
    diff::add_linear(ps, prefix_ + ".embed0", C, in_);
    diff::add_linear(ps, prefix_ + ".embed1", C, C);
    for (std::size_t b = 0; b < cfg_.blocks; ++b) {
      for (const char* p : {"query", "key", "value", "proj"}) diff::add_linear(ps, block(b, p), C, C);
      diff::add_linear(ps, block(b, "ffn0"), 2 * C, C);
      diff::add_linear(ps, block(b, "ffn1"), C, 2 * C);
    }
  }

  /// Row-normalized attention inside one window: x [n, C] -> [n, C].
  Var window_attention(Graph& g, std::size_t b, Var x) const {
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(cfg_.channels));
    Var q = diff::dense(g, block(b, "query"), x);
    Var k = diff::dense(g, block(b, "key"), x);
    Var v = diff::dense(g, block(b, "value"), x);
    Var attn = diff::softmax(diff::scale(diff::matmul(q, diff::transpose(k)), inv_sqrt), 1);
    return diff::dense(g, block(b, "proj"), diff::matmul(attn, v));
  }

  /// features: [P, in] in input order; order: serialization permutation.
  /// Returns [P, C_pt] in input order.
  Var encode(Graph& g, Var features, const std::vector<std::size_t>& order) const {
    const std::size_t P = features.dim(0);
    if (order.size() != P) {
      throw std::invalid_argument("point encoder: order has " + std::to_string(order.size()) +
                                  " entries for " + std::to_string(P) + " points");
    }
    if (P == 0) return g.constant(diff::Tensor(diff::Shape{0, cfg_.channels}));
    std::vector<std::size_t> inverse(P, P);
    for (std::size_t r = 0; r < P; ++r) {
      if (order[r] >= P || inverse[order[r]] != P) {
        throw std::invalid_argument("point encoder: order is not a permutation");
      }
      inverse[order[r]] = r;
    }
    Var x = diff::gather_rows(features, order);
    x = diff::dense(g, prefix_ + ".embed1", diff::relu(diff::dense(g, prefix_ + ".embed0", x)));
    for (std::size_t b = 0; b < cfg_.blocks; ++b) {
      std::vector<Var> windows;
      for (std::size_t s = 0; s < P; s += cfg_.window) {
        const std::size_t e = std::min(P, s + cfg_.window);
        Var xs = P <= cfg_.window ? x : diff::slice(x, 0, s, e);
        windows.push_back(window_attention(g, b, xs));
      }
      Var att = windows.size() == 1 ? windows[0] : diff::concat(std::span<const Var>(windows), 0);
      x = diff::add(x, att);
      Var h = diff::relu(diff::dense(g, block(b, "ffn0"), x));
      x = diff::add(x, diff::dense(g, block(b, "ffn1"), h));
    }
    return diff::gather_rows(x, inverse);
  }

 private:
  std::string prefix_;
  std::size_t in_;
  PointEncoderConfig cfg_;
};

}  // namespace bevfuse::radar
