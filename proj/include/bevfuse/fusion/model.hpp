#pragma once

#include <memory>
#include <optional>
#include <vector>

#include "bevfuse/fusion/blocks.hpp"
#include "bevfuse/image/encoder.hpp"
#include "bevfuse/image/lift.hpp"
#include "bevfuse/image/msda.hpp"
#include "bevfuse/radar/branch.hpp"

namespace bevfuse::fusion {

struct ModelConfig {
  std::size_t image_height = 64;
  std::size_t image_width = 96;
  image::ImageEncoderConfig encoder;
  image::MsdaConfig msda;
  bool use_msda = true;

  /// Internal BEV grid; its vertical range defines the lift voxels.
  geom::GridSpec internal = geom::GridSpec::centered(16.0, 0.8).with_vertical();
  geom::GridSpec output = geom::GridSpec::centered(15.0, 1.0);

  radar::RadarBranchConfig radar;

  std::size_t fusion_channels = 8;
  std::size_t se_reduction = 4;
  std::size_t unet_depth = 3;
  std::size_t classes = 1;

  bool use_camera = true;
  bool use_radar = true;
};

/// Everything the network consumes for one scene.
struct SceneInput {
  std::vector<Tensor> images;  // [3, H, W] per camera, values in [0, 1]
  std::vector<geom::CameraCalibration> calibs;
  radar::RadarPointCloud cloud;
};

struct ModelOutput {
  Var logits;  // [1, M, out rows, out cols]
  Var aux;     // [1, M, internal rows, internal cols]
  Var omega;   // [1, modalities]
  Var bev;     // fused map before the U-Net
};

/// Camera + radar BEV segmentation network.
class BevFusionModel {
 public:
  explicit BevFusionModel(ModelConfig cfg)
      : cfg_(std::move(cfg)),
        encoder_("image.encoder", cfg_.encoder, cfg_.image_height, cfg_.image_width),
        fpn_("image.fpn", cfg_.encoder.stage_widths, cfg_.encoder.c_img),
        msda_("image.msda", cfg_.encoder.c_img, image::kLevelStrides.size(), cfg_.msda),
        radar_("radar", cfg_.radar, cfg_.internal),
        fusion_("fusion", modal_channels(), cfg_.fusion_channels, cfg_.se_reduction),
        unet_("unet", cfg_.fusion_channels, cfg_.unet_depth, cfg_.internal.rows(), cfg_.internal.cols()),
        head_{"head", cfg_.fusion_channels, cfg_.classes, flat(cfg_.internal), cfg_.output},
        aux_{"aux", cfg_.fusion_channels, cfg_.classes} {
    if (!cfg_.use_camera && !cfg_.use_radar) {
      throw std::invalid_argument("model: at least one modality must be enabled");
    }
    if (!cfg_.internal.vertical) throw geom::GeometryError("model: internal grid needs a vertical range");
  }

  const ModelConfig& config() const { return cfg_; }
  const AdaptiveFusion& fusion() const { return fusion_; }

  void init(ParameterStore& ps) const {
    if (cfg_.use_camera) {
      encoder_.init(ps);
      fpn_.init(ps);
      if (cfg_.use_msda) msda_.init(ps);
    }
    if (cfg_.use_radar) radar_.init(ps);
    fusion_.init(ps);
    unet_.init(ps);
    head_.init(ps);
    aux_.init(ps);
  }

  /// F_I_BEV: [1, Z * C_img, rows, cols].
  Var camera_bev(Graph& g, const SceneInput& in) const {
    if (in.images.empty() || in.images.size() != in.calibs.size()) {
      throw std::invalid_argument("model: need one calibration per camera image");
    }
    std::vector<Var> finest;
    for (const Tensor& img : in.images) {
      Var x = g.constant(img.reshaped({1, 3, img.dim(1), img.dim(2)}));
      image::MultiScaleFeatures f = fpn_.fuse(g, encoder_.encode(g, x));
      if (cfg_.use_msda) f = msda_.forward(g, f);
      finest.push_back(f.levels[0]);
    }
    return image::lift_to_bev(finest, in.calibs, cfg_.internal, image::kLevelStrides[0]);
  }

  Var radar_bev(Graph& g, const SceneInput& in) const { return radar_.forward(g, in.cloud); }

  ModelOutput forward(Graph& g, const SceneInput& in, const FusionOverrides& ov = {}) const {
    std::vector<Var> modal;
    if (cfg_.use_camera) modal.push_back(camera_bev(g, in));
    if (cfg_.use_radar) modal.push_back(radar_bev(g, in));
    FusionOutput fused = fusion_.forward(g, modal, ov);
    Var refined = unet_.forward(g, fused.fused);
    return {head_.forward(g, refined), aux_.forward(g, refined), fused.omega, fused.fused};
  }

 private:
  static geom::GridSpec flat(geom::GridSpec g) {
    g.vertical.reset();
    return g;
  }
  std::vector<std::size_t> modal_channels() const {
    std::vector<std::size_t> ch;
    if (cfg_.use_camera) ch.push_back(cfg_.internal.layers() * cfg_.encoder.c_img);
    if (cfg_.use_radar) ch.push_back(cfg_.radar.bev_channels);
    return ch;
  }

  ModelConfig cfg_;
  image::ImageEncoder encoder_;
  image::Fpn fpn_;
  image::MsdaSelfAttention msda_;
  radar::RadarBranch radar_;
  AdaptiveFusion fusion_;
  AttentionUNet unet_;
  SegmentationHead head_;
  AuxHead aux_;
};

}  // namespace bevfuse::fusion
