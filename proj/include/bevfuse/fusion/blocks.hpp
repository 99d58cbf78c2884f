#pragma once

#include <optional>
#include <string>
#include <vector>

#include "bevfuse/diffcore/layers.hpp"
#include "bevfuse/geometry/sampling.hpp"

namespace bevfuse::fusion {

using diff::Graph;
using diff::ParameterStore;
using diff::Shape;
using diff::Tensor;
using diff::Var;

/// conv3x3 -> instance norm -> relu, twice. The first conv may be strided.
struct ConvBlock {
  std::string prefix;
  std::size_t in, out;
  std::size_t stride = 1;

  void init(ParameterStore& ps) const {
    diff::add_conv(ps, prefix + ".conv0", out, in, 3);
    diff::add_conv(ps, prefix + ".conv1", out, out, 3);
  }
  Var forward(Graph& g, Var x) const {
    return diff::conv_norm_relu(g, prefix + ".conv1", diff::conv_norm_relu(g, prefix + ".conv0", x, stride));
  }
};

/// Channel recalibration: GAP -> FC(C/r) -> relu -> FC(C) -> sigmoid -> scale.
struct SqueezeExcite {
  std::string prefix;
  std::size_t channels;
  std::size_t reduction = 4;

  void validate() const {
    if (reduction == 0 || channels % reduction != 0) {
      throw diff::ShapeError("squeeze-excite: reduction " + std::to_string(reduction) +
                             " does not divide " + std::to_string(channels) + " channels");
    }
  }
  void init(ParameterStore& ps) const {
    validate();
    diff::add_linear(ps, prefix + ".fc0", channels / reduction, channels);
    diff::add_linear(ps, prefix + ".fc1", channels, channels / reduction);
  }
  /// Gate values [1, C].
  Var gate(Graph& g, Var x) const {
    Var s = diff::relu(diff::dense(g, prefix + ".fc0", diff::global_avg_pool(x)));
    return diff::sigmoid(diff::dense(g, prefix + ".fc1", s));
  }
  Var apply(Var x, Var gate) const {
    return diff::mul(x, diff::reshape(gate, {1, channels, 1, 1}));
  }
  Var forward(Graph& g, Var x) const { return apply(x, gate(g, x)); }
};

struct FusionOverrides {
  /// Replaces the predicted modality weights.
  std::optional<std::vector<double>> omega;
  /// Replaces the SE gate by ones.
  bool se_identity = false;
};

struct FusionOutput {
  Var fused;                 // after SE
  Var weighted;              // sum_i ConvBlock(F_i) * omega_i, before SE
  Var omega;                 // [1, M]
  std::vector<Var> mapped;   // ConvBlock(F_i)
  std::optional<Var> se_gate;
};

/// Adaptive modality fusion: every modality is mapped to C channels by its
/// own ConvBlock; a scorer MLP shared across modalities rates each mapped
/// map from its pooled descriptor, the scores are softmax-normalized across
/// modalities into omega, and the omega-weighted sum is recalibrated by SE.
class AdaptiveFusion {
 public:
  AdaptiveFusion(std::string prefix, std::vector<std::size_t> in_channels, std::size_t channels,
                 std::size_t reduction = 4)
      : prefix_(std::move(prefix)),
        in_(std::move(in_channels)),
        channels_(channels),
        se_{prefix_ + ".se", channels, reduction} {
    if (in_.empty()) throw std::invalid_argument("fusion: at least one modality is required");
    se_.validate();
  }

  std::size_t modalities() const { return in_.size(); }
  std::size_t channels() const { return channels_; }
  ConvBlock block(std::size_t i) const {
    return {prefix_ + ".modal" + std::to_string(i), in_[i], channels_};
  }
  const SqueezeExcite& se() const { return se_; }

  void init(ParameterStore& ps) const {
    for (std::size_t i = 0; i < in_.size(); ++i) block(i).init(ps);
    const std::size_t hidden = std::max<std::size_t>(1, channels_ / se_.reduction);
    diff::add_linear(ps, prefix_ + ".score0", hidden, channels_);
    diff::add_linear(ps, prefix_ + ".score1", 1, hidden);
    se_.init(ps);
  }

  FusionOutput forward(Graph& g, const std::vector<Var>& features,
                       const FusionOverrides& ov = {}) const {
    const std::size_t M = in_.size();
    if (features.size() != M) {
      throw std::invalid_argument("fusion: expected " + std::to_string(M) + " modalities, got " +
                                  std::to_string(features.size()));
    }
    for (std::size_t i = 1; i < M; ++i) {
      const Shape& a = features[0].shape();
      const Shape& b = features[i].shape();
      if (a.size() != 4 || b.size() != 4 || a[2] != b[2] || a[3] != b[3]) {
        throw diff::ShapeError("fusion: modality spatial sizes differ: " + diff::shape_str(a) +
                               " vs " + diff::shape_str(b));
      }
    }
    FusionOutput out;
    std::vector<Var> scores;
    for (std::size_t i = 0; i < M; ++i) {
      out.mapped.push_back(block(i).forward(g, features[i]));
      if (!ov.omega) {
        Var h = diff::relu(diff::dense(g, prefix_ + ".score0", diff::global_avg_pool(out.mapped[i])));
        scores.push_back(diff::dense(g, prefix_ + ".score1", h));
      }
    }
    if (ov.omega) {
      if (ov.omega->size() != M) throw std::invalid_argument("fusion: omega override size mismatch");
      out.omega = g.constant(Tensor(Shape{1, M}, *ov.omega));
    } else {
      out.omega = diff::softmax(diff::concat(std::span<const Var>(scores), 1), 1);
    }
    std::optional<Var> acc;
    for (std::size_t i = 0; i < M; ++i) {
      Var w = diff::reshape(diff::slice(out.omega, 1, i, i + 1), {1, 1, 1, 1});
      Var term = diff::mul(out.mapped[i], w);
      acc = acc ? diff::add(*acc, term) : term;
    }
    out.weighted = *acc;
    if (ov.se_identity) {
      out.fused = out.weighted;
    } else {
      out.se_gate = se_.gate(g, out.weighted);
      out.fused = se_.apply(out.weighted, *out.se_gate);
    }
    return out;
  }

 private:
  std::string prefix_;
  std::vector<std::size_t> in_;
  std::size_t channels_;
  SqueezeExcite se_;
};

/// Additive attention gate on a skip connection:
/// psi = sigmoid(conv1x1(relu(conv1x1(g) + conv1x1(x_e)))), output x_e * psi.
struct AttentionGate {
  std::string prefix;
  std::size_t skip_channels, gate_channels, inter_channels;

  void init(ParameterStore& ps) const {
    diff::add_conv(ps, prefix + ".gate_g", inter_channels, gate_channels, 1);
    diff::add_conv(ps, prefix + ".gate_x", inter_channels, skip_channels, 1);
    diff::add_conv(ps, prefix + ".psi", 1, inter_channels, 1);
  }

  struct Result {
    Var gated;
    Var psi;  // [1, 1, H, W]
  };

  Result forward(Graph& g, Var x_e, Var gate) const {
    const Shape& a = x_e.shape();
    const Shape& b = gate.shape();
    if (a.size() != 4 || b.size() != 4 || a[2] != b[2] || a[3] != b[3]) {
      throw diff::ShapeError("attention gate: skip " + diff::shape_str(a) + " and gate " +
                             diff::shape_str(b) + " are not spatially aligned");
    }
    Var pre = diff::add(diff::conv(g, prefix + ".gate_g", gate), diff::conv(g, prefix + ".gate_x", x_e));
    Var psi = diff::sigmoid(diff::conv(g, prefix + ".psi", diff::relu(pre)));
    return {diff::mul(x_e, psi), psi};
  }
};

/// Attention U-Net over the fused BEV map. Level l has C * 2^l channels at
/// 1 / 2^l resolution; every skip passes through an attention gate driven by
/// the upsampled decoder feature before concatenation.
class AttentionUNet {
 public:
  AttentionUNet(std::string prefix, std::size_t channels, std::size_t depth, std::size_t rows,
                std::size_t cols)
      : prefix_(std::move(prefix)), c_(channels), depth_(depth) {
    const std::size_t f = std::size_t{1} << depth;
    if (depth == 0 || rows % f != 0 || cols % f != 0) {
      throw diff::ShapeError("unet: BEV size " + std::to_string(rows) + "x" + std::to_string(cols) +
                             " is not divisible by 2^" + std::to_string(depth));
    }
  }

  std::size_t width(std::size_t l) const { return c_ << l; }
  ConvBlock encoder(std::size_t l) const {
    return {prefix_ + ".enc" + std::to_string(l), l == 0 ? c_ : width(l - 1), width(l), l == 0 ? 1u : 2u};
  }
  std::string up(std::size_t l) const { return prefix_ + ".up" + std::to_string(l); }
  AttentionGate gate(std::size_t l) const {
    return {prefix_ + ".gate" + std::to_string(l), width(l), width(l), std::max<std::size_t>(1, width(l) / 2)};
  }
  ConvBlock decoder(std::size_t l) const {
    return {prefix_ + ".dec" + std::to_string(l), 2 * width(l), width(l)};
  }

  void init(ParameterStore& ps) const {
    for (std::size_t l = 0; l <= depth_; ++l) encoder(l).init(ps);
    for (std::size_t l = 0; l < depth_; ++l) {
      diff::add_conv(ps, up(l), width(l), width(l + 1), 3);
      gate(l).init(ps);
      decoder(l).init(ps);
    }
  }

  Var forward(Graph& g, Var x) const {
    std::vector<Var> skips;
    Var h = x;
    for (std::size_t l = 0; l <= depth_; ++l) {
      h = encoder(l).forward(g, h);
      skips.push_back(h);
    }
    for (std::size_t l = depth_; l-- > 0;) {
      Var u = diff::relu(diff::conv(g, up(l), diff::upsample_nearest(h, 2)));
      Var gated = gate(l).forward(g, skips[l], u).gated;
      h = decoder(l).forward(g, diff::concat({gated, u}, 1));
    }
    return h;
  }

 private:
  std::string prefix_;
  std::size_t c_, depth_;
};

/// Resample to the output grid, then conv3x3 -> IN -> relu -> conv3x3 to M
/// raw logits.
struct SegmentationHead {
  std::string prefix;
  std::size_t channels, classes;
  geom::GridSpec internal, output;

  void init(ParameterStore& ps) const {
    diff::add_conv(ps, prefix + ".conv0", channels, channels, 3);
    diff::add_conv(ps, prefix + ".conv1", classes, channels, 3);
  }
  Var forward(Graph& g, Var x) const {
    Var r = geom::grid_resample(x, internal, output);
    return diff::conv(g, prefix + ".conv1", diff::conv_norm_relu(g, prefix + ".conv0", r));
  }
};

/// 1x1 logit head on the decoder output at the internal grid.
struct AuxHead {
  std::string prefix;
  std::size_t channels, classes;

  void init(ParameterStore& ps) const { diff::add_conv(ps, prefix, classes, channels, 1); }
  Var forward(Graph& g, Var x) const { return diff::conv(g, prefix, x); }
};

}  // namespace bevfuse::fusion
