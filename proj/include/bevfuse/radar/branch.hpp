#pragma once

#include "bevfuse/radar/bev.hpp"
#include "bevfuse/radar/encoder.hpp"
#include "bevfuse/radar/serialize.hpp"

namespace bevfuse::radar {

struct RadarBranchConfig {
  PointEncoderConfig encoder;
  std::size_t bev_channels = 16;
  std::size_t sweeps = 7;
  TemporalEncoding encoding = TemporalEncoding::kOneHot;
  PointFeatureScale scale;
};

/// Point cloud -> F_R_BEV on the internal grid.
class RadarBranch {
 public:
  RadarBranch(std::string prefix, RadarBranchConfig cfg, geom::GridSpec grid)
      : cfg_(cfg),
        grid_(grid),
        encoder_(prefix + ".points", 5 + (cfg.encoding == TemporalEncoding::kOneHot ? cfg.sweeps : 1),
                 cfg.encoder),
        pyramid_(prefix + ".pyramid", cfg.encoder.channels, cfg.bev_channels, grid.rows(),
                 grid.cols()) {}

  const RadarBranchConfig& config() const { return cfg_; }
  std::size_t out_channels() const { return cfg_.bev_channels; }

  void init(ParameterStore& ps) const {
    encoder_.init(ps);
    pyramid_.init(ps);
  }

  Var forward(Graph& g, const RadarPointCloud& cloud) const {
    if (!cloud.empty() && (cloud.encoding != cfg_.encoding || cloud.num_sweeps != cfg_.sweeps)) {
      throw std::invalid_argument("radar branch: cloud encoding (" +
                                  std::string(encoding_name(cloud.encoding)) + ", " +
                                  std::to_string(cloud.num_sweeps) + " sweeps) does not match the model");
    }
    const auto order = serialize_points(cloud, grid_);
    diff::Tensor raw = cloud.empty() ? diff::Tensor(diff::Shape{0, encoder_channels_in()})
                                     : point_features(cloud, cfg_.scale);
    Var feats = encoder_.encode(g, g.constant(std::move(raw)), order);
    return pyramid_.forward(g, scatter_to_bev(feats, cloud, grid_));
  }

  std::size_t encoder_channels_in() const {
    return 5 + (cfg_.encoding == TemporalEncoding::kOneHot ? cfg_.sweeps : 1);
  }

 private:
  RadarBranchConfig cfg_;
  geom::GridSpec grid_;
  PointEncoder encoder_;
  PyramidAggregator pyramid_;
};

}  // namespace bevfuse::radar
