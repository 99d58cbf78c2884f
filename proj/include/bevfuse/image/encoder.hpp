#pragma once

#include <array>
#include <string>
#include <vector>

#include "bevfuse/diffcore/layers.hpp"

namespace bevfuse::image {

using diff::Graph;
using diff::ParameterStore;
using diff::Var;

inline constexpr std::array<std::size_t, 3> kLevelStrides{8, 16, 32};

/// Perspective feature pyramid of one camera; levels[l] has stride
/// kLevelStrides[l] and shape [1, C, ceil(H / stride), ceil(W / stride)].
struct MultiScaleFeatures {
  std::vector<Var> levels;

  std::size_t channels() const { return levels.at(0).dim(1); }
};

struct ImageEncoderConfig {
  std::size_t stem_width = 8;
  std::array<std::size_t, 3> stage_widths{16, 32, 64};
  std::size_t c_img = 16;
};

/// Strided convolutional stand-in for the image backbone: a stride-4 stem
/// followed by three (conv s2, conv s1) stages tapped at strides 8/16/32.
class ImageEncoder {
 public:
  ImageEncoder(std::string prefix, ImageEncoderConfig cfg, std::size_t height, std::size_t width)
      : prefix_(std::move(prefix)), cfg_(cfg), height_(height), width_(width) {
    if (height == 0 || width == 0 || height % 32 != 0 || width % 32 != 0) {
      throw diff::ShapeError("image encoder: resolution " + std::to_string(height) + "x" +
                             std::to_string(width) + " is not divisible by 32");
    }
  }

  const ImageEncoderConfig& config() const { return cfg_; }

  void init(ParameterStore& ps) const {
    diff::add_conv(ps, prefix_ + ".stem0", cfg_.stem_width, 3, 3);
    diff::add_conv(ps, prefix_ + ".stem1", cfg_.stem_width, cfg_.stem_width, 3);
    std::size_t in = cfg_.stem_width;
    for (std::size_t s = 0; s < 3; ++s) {
      const std::string p = prefix_ + ".stage" + std::to_string(s);
      diff::add_conv(ps, p + ".down", cfg_.stage_widths[s], in, 3);
      diff::add_conv(ps, p + ".conv", cfg_.stage_widths[s], cfg_.stage_widths[s], 3);
      in = cfg_.stage_widths[s];
    }
  }

  /// image: [1, 3, H, W]
  MultiScaleFeatures encode(Graph& g, Var image) const {
    const auto& s = image.shape();
    if (s.size() != 4 || s[1] != 3 || s[2] != height_ || s[3] != width_) {
      throw diff::ShapeError("image encoder: expected [1, 3, " + std::to_string(height_) + ", " +
                             std::to_string(width_) + "], got " + diff::shape_str(s));
    }
    Var x = diff::conv_norm_relu(g, prefix_ + ".stem0", image, 2);
    x = diff::conv_norm_relu(g, prefix_ + ".stem1", x, 2);
    MultiScaleFeatures out;
    for (std::size_t st = 0; st < 3; ++st) {
      const std::string p = prefix_ + ".stage" + std::to_string(st);
      x = diff::conv_norm_relu(g, p + ".down", x, 2);
      x = diff::conv_norm_relu(g, p + ".conv", x, 1);
      out.levels.push_back(x);
    }
    return out;
  }

 private:
  std::string prefix_;
  ImageEncoderConfig cfg_;
  std::size_t height_, width_;
};

/// Top-down feature pyramid: 1x1 laterals to C_img, nearest-upsample + add
/// from coarse to fine, then a 3x3 output conv per level.
class Fpn {
 public:
  Fpn(std::string prefix, std::array<std::size_t, 3> in_widths, std::size_t c_img)
      : prefix_(std::move(prefix)), in_widths_(in_widths), c_img_(c_img) {}

  void init(ParameterStore& ps) const {
    for (std::size_t l = 0; l < 3; ++l) {
      diff::add_conv(ps, lateral(l), c_img_, in_widths_[l], 1);
      diff::add_conv(ps, output(l), c_img_, c_img_, 3);
    }
  }

  std::string lateral(std::size_t l) const { return prefix_ + ".lateral" + std::to_string(l); }
  std::string output(std::size_t l) const { return prefix_ + ".output" + std::to_string(l); }

  MultiScaleFeatures fuse(Graph& g, const MultiScaleFeatures& in) const {
    if (in.levels.size() != 3) throw diff::ShapeError("fpn: expected three levels");
    std::array<Var, 3> merged;
    merged[2] = diff::conv(g, lateral(2), in.levels[2]);
    for (std::size_t l = 2; l-- > 0;) {
      Var lat = diff::conv(g, lateral(l), in.levels[l]);
      merged[l] = diff::add(lat, diff::upsample_nearest(merged[l + 1], 2));
    }
    MultiScaleFeatures out;
    for (std::size_t l = 0; l < 3; ++l) out.levels.push_back(diff::conv(g, output(l), merged[l]));
    return out;
  }

 private:
  std::string prefix_;
  std::array<std::size_t, 3> in_widths_;
  std::size_t c_img_;
};

}  // namespace bevfuse::image
