#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "bevfuse/diffcore/layers.hpp"
#include "bevfuse/image/encoder.hpp"

namespace bevfuse::image {

using diff::Shape;
using diff::Tensor;

struct MsdaConfig {
  std::size_t heads = 2;
  std::size_t points = 2;
};

struct LevelShape {
  std::size_t height, width;
};

/// Multi-scale deformable self-attention over the pyramid of one camera.
///
/// Every pyramid location is a query. Linear heads predict, per (head,
/// level, point), a sampling offset in that level's pixels and an attention
/// logit; logits are softmax-normalized over (level x point) per head.
/// Values are bilinearly sampled at reference + offset, where the reference
/// is the query's normalized position mapped into each level. The weighted
/// sum goes through an output projection and is added back to the query.
class MsdaSelfAttention {
 public:
  MsdaSelfAttention(std::string prefix, std::size_t channels, std::size_t levels, MsdaConfig cfg)
      : prefix_(std::move(prefix)), channels_(channels), levels_(levels), cfg_(cfg) {
    if (cfg.heads == 0 || channels % cfg.heads != 0) {
      throw diff::ShapeError("msda: heads (" + std::to_string(cfg.heads) +
                             ") must divide channels (" + std::to_string(channels) + ")");
    }
    if (cfg.points == 0 || levels == 0) throw diff::ShapeError("msda: need points and levels");
  }

  const MsdaConfig& config() const { return cfg_; }
  std::string value_name() const { return prefix_ + ".value"; }
  std::string offset_name() const { return prefix_ + ".offset"; }
  std::string weight_name() const { return prefix_ + ".weight"; }
  std::string output_name() const { return prefix_ + ".output"; }

  std::size_t samples_per_head() const { return levels_ * cfg_.points; }

  void init(ParameterStore& ps) const {
    const std::size_t C = channels_, H = cfg_.heads, L = levels_, P = cfg_.points;
    diff::add_linear(ps, value_name(), C, C);
    diff::add_linear(ps, output_name(), C, C);
    // Offsets start at a fixed star pattern (one direction per head, radius
    // growing with the point index); attention starts uniform.
    ps.add(offset_name() + ".w", {H * L * P * 2, C}, diff::Init::kZeros);
    Tensor& ob = const_cast<Tensor&>(ps.add(offset_name() + ".b", {H * L * P * 2}, diff::Init::kZeros));
    for (std::size_t h = 0; h < H; ++h) {
      const double a = 2.0 * std::numbers::pi * static_cast<double>(h) / static_cast<double>(H);
      for (std::size_t l = 0; l < L; ++l) {
        for (std::size_t p = 0; p < P; ++p) {
          const std::size_t base = (((h * L + l) * P) + p) * 2;
          ob[base] = std::cos(a) * static_cast<double>(p + 1) * 0.5;
          ob[base + 1] = std::sin(a) * static_cast<double>(p + 1) * 0.5;
        }
      }
    }
    ps.add(weight_name() + ".w", {H * L * P, C}, diff::Init::kZeros);
    ps.add(weight_name() + ".b", {H * L * P}, diff::Init::kZeros);
  }

  /// Reference points of all queries, repeated per sampling point, in the
  /// pixel coordinates of level `l`: [Q * P, 2] as (u, v).
  static Tensor reference_points(const std::vector<LevelShape>& shapes, std::size_t l,
                                 std::size_t points) {
    std::size_t Q = 0;
    for (const auto& s : shapes) Q += s.height * s.width;
    Tensor ref(Shape{Q * points, 2});
    std::size_t q = 0;
    const double Wl = static_cast<double>(shapes[l].width);
    const double Hl = static_cast<double>(shapes[l].height);
    for (const auto& s : shapes) {
      for (std::size_t i = 0; i < s.height; ++i) {
        for (std::size_t j = 0; j < s.width; ++j, ++q) {
          const double xn = (static_cast<double>(j) + 0.5) / static_cast<double>(s.width);
          const double yn = (static_cast<double>(i) + 0.5) / static_cast<double>(s.height);
          for (std::size_t p = 0; p < points; ++p) {
            ref[2 * (q * points + p)] = xn * Wl - 0.5;
            ref[2 * (q * points + p) + 1] = yn * Hl - 0.5;
          }
        }
      }
    }
    return ref;
  }

  /// Flattens levels into queries [Q, C], level-major, row-major within a level.
  static Var flatten_queries(Graph&, const MultiScaleFeatures& f) {
    std::vector<Var> rows;
    for (const Var& lv : f.levels) {
      const auto& s = lv.shape();
      rows.push_back(diff::transpose(diff::reshape(lv, {s[1], s[2] * s[3]})));
    }
    return diff::concat(std::span<const Var>(rows), 0);
  }

  struct Attended {
    Var output;                    // [Q, C] after the output projection, before residual
    Var attention;                 // [Q, heads, levels * points], softmax-normalized
    Var offsets;                   // [Q, heads * levels * points * 2]
  };

  /// Deformable attention of queries over the value pyramid, pre-residual.
  Attended attend(Graph& g, Var queries, const std::vector<LevelShape>& shapes) const {
    if (shapes.size() != levels_) throw diff::ShapeError("msda: level count mismatch");
    const std::size_t C = channels_, H = cfg_.heads, L = levels_, P = cfg_.points, Ch = C / H;
    const std::size_t Q = queries.dim(0);
    Var values = diff::dense(g, value_name(), queries);
    Var offsets = diff::dense(g, offset_name(), queries);
    Var logits = diff::reshape(diff::dense(g, weight_name(), queries), {Q, H, L * P});
    Var attn = diff::softmax(logits, 2);
    Var off5 = diff::reshape(offsets, {Q, H, L, P, 2});

    std::vector<std::size_t> level_begin{0};
    for (const auto& s : shapes) level_begin.push_back(level_begin.back() + s.height * s.width);
    if (level_begin.back() != Q) throw diff::ShapeError("msda: query count mismatch");

    std::vector<Var> per_head;
    for (std::size_t h = 0; h < H; ++h) {
      std::optional<Var> acc;
      for (std::size_t l = 0; l < L; ++l) {
        const auto [Hl, Wl] = shapes[l];
        Var v = diff::slice(diff::slice(values, 0, level_begin[l], level_begin[l + 1]), 1, h * Ch,
                            (h + 1) * Ch);
        Var vmap = diff::reshape(diff::transpose(v), {Ch, Hl, Wl});
        Var off = diff::reshape(diff::slice(diff::slice(off5, 1, h, h + 1), 2, l, l + 1), {Q * P, 2});
        Var coords = diff::add(g.constant(reference_points(shapes, l, P)), off);
        Var sampled = diff::reshape(diff::bilinear_sample(vmap, coords), {Ch, Q, P});
        Var w = diff::reshape(diff::slice(diff::slice(attn, 1, h, h + 1), 2, l * P, (l + 1) * P),
                              {1, Q, P});
        Var term = diff::sum_axis(diff::mul(sampled, w), 2);
        acc = acc ? diff::add(*acc, term) : term;
      }
      per_head.push_back(*acc);
    }
    Var merged = diff::transpose(diff::concat(std::span<const Var>(per_head), 0));
    return {diff::dense(g, output_name(), merged), attn, offsets};
  }

  MultiScaleFeatures forward(Graph& g, const MultiScaleFeatures& in) const {
    std::vector<LevelShape> shapes;
    for (const Var& lv : in.levels) {
      if (lv.dim(1) != channels_) throw diff::ShapeError("msda: channel mismatch");
      shapes.push_back({lv.dim(2), lv.dim(3)});
    }
    Var queries = flatten_queries(g, in);
    Var updated = diff::add(queries, attend(g, queries, shapes).output);
    MultiScaleFeatures out;
    std::size_t begin = 0;
    for (const auto& s : shapes) {
      const std::size_t n = s.height * s.width;
      Var rows = diff::slice(updated, 0, begin, begin + n);
      out.levels.push_back(diff::reshape(diff::transpose(rows), {1, channels_, s.height, s.width}));
      begin += n;
    }
    return out;
  }

 private:
  std::string prefix_;
  std::size_t channels_;
  std::size_t levels_;
  MsdaConfig cfg_;
};

}  // namespace bevfuse::image
