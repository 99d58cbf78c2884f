#include <gtest/gtest.h>

#include <algorithm>
#include <numbers>
#include <random>

#include "bevfuse/diffcore/fd_check.hpp"
#include "bevfuse/image/encoder.hpp"
#include "bevfuse/image/lift.hpp"
#include "bevfuse/image/msda.hpp"
#include "oracles/oracles.hpp"

using namespace bevfuse;
using namespace bevfuse::image;
using diff::Shape;
using diff::Tensor;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(lo, hi);
  for (double& v : t.values()) v = d(rng);
  return t;
}

Tensor eye(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

Tensor eye_conv(std::size_t n, std::size_t k) {
  Tensor t({n, n, k, k});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i, k / 2, k / 2) = 1.0;
  return t;
}

void randomize(ParameterStore& ps, std::uint64_t seed, double scale = 0.5) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(-scale, scale);
  for (auto& [name, t] : ps) {
    for (double& v : t.values()) v += d(rng);
  }
}

MultiScaleFeatures pyramid(diff::Graph& g, std::size_t C, const std::vector<LevelShape>& shapes,
                           std::uint64_t seed) {
  MultiScaleFeatures f;
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    f.levels.push_back(g.input(random_tensor({1, C, shapes[l].height, shapes[l].width}, seed + l)));
  }
  return f;
}

}  // namespace

TEST(Encoder, DeskLevelSizes) {
  ParameterStore ps(1);
  ImageEncoder enc("enc", {}, 64, 96);
  enc.init(ps);
  diff::Graph g(&ps);
  auto f = enc.encode(g, g.input(random_tensor({1, 3, 64, 96}, 1)));
  ASSERT_EQ(f.levels.size(), 3u);
  EXPECT_EQ(f.levels[0].shape(), (Shape{1, 16, 8, 12}));
  EXPECT_EQ(f.levels[1].shape(), (Shape{1, 32, 4, 6}));
  EXPECT_EQ(f.levels[2].shape(), (Shape{1, 64, 2, 3}));
}

TEST(Encoder, ReferenceResolutionLevelSizes) {
  ParameterStore ps(1);
  ImageEncoderConfig cfg{4, {4, 4, 4}, 4};
  ImageEncoder enc("enc", cfg, 320, 800);
  enc.init(ps);
  diff::Graph g(&ps, false);
  auto f = enc.encode(g, g.input(Tensor({1, 3, 320, 800}, 0.1)));
  EXPECT_EQ(f.levels[0].shape(), (Shape{1, 4, 40, 100}));
  EXPECT_EQ(f.levels[1].shape(), (Shape{1, 4, 20, 50}));
  EXPECT_EQ(f.levels[2].shape(), (Shape{1, 4, 10, 25}));
}

TEST(Encoder, RejectsResolutionNotDivisibleBy32) {
  EXPECT_THROW(ImageEncoder("enc", {}, 64, 100), diff::ShapeError);
  EXPECT_THROW(ImageEncoder("enc", {}, 48, 96), diff::ShapeError);
}

TEST(Encoder, ZeroInputGivesZeroFeatures) {
  ParameterStore ps(3);
  ImageEncoder enc("enc", {}, 64, 64);
  enc.init(ps);
  diff::Graph g(&ps);
  auto f = enc.encode(g, g.input(Tensor({1, 3, 64, 64})));
  for (const auto& l : f.levels) EXPECT_EQ(l.value().max_abs(), 0.0);
}

TEST(Fpn, CoarsePixelPropagatesToAlignedBlock) {
  ParameterStore ps;
  Fpn fpn("fpn", {2, 2, 2}, 2);
  fpn.init(ps);
  for (std::size_t l = 0; l < 3; ++l) {
    ps.set(fpn.lateral(l) + ".w", eye_conv(2, 1));
    ps.set(fpn.output(l) + ".w", eye_conv(2, 3));
  }
  diff::Graph g(&ps);
  MultiScaleFeatures in;
  in.levels.push_back(g.input(Tensor({1, 2, 8, 8})));
  in.levels.push_back(g.input(Tensor({1, 2, 4, 4})));
  Tensor coarse({1, 2, 2, 2});
  coarse.at(0, 1, 1, 0) = 3.0;
  in.levels.push_back(g.input(coarse));
  auto out = fpn.fuse(g, in);
  const Tensor& fine = out.levels[0].value();
  for (std::size_t i = 0; i < 8; ++i) {
    for (std::size_t j = 0; j < 8; ++j) {
      const bool inside = i >= 4 && j < 4;
      EXPECT_EQ(fine.at(0, 1, i, j), inside ? 3.0 : 0.0) << i << "," << j;
      EXPECT_EQ(fine.at(0, 0, i, j), 0.0);
    }
  }
}

TEST(Fpn, ZeroInZeroOutAndChannelContract) {
  ParameterStore ps(2);
  Fpn fpn("fpn", {3, 5, 7}, 6);
  fpn.init(ps);
  diff::Graph g(&ps);
  MultiScaleFeatures zero, rnd;
  const std::size_t w[3] = {3, 5, 7};
  for (std::size_t l = 0; l < 3; ++l) {
    const std::size_t s = 8 >> l;
    zero.levels.push_back(g.input(Tensor({1, w[l], s, s})));
    rnd.levels.push_back(g.input(random_tensor({1, w[l], s, s}, 10 + l)));
  }
  for (const auto& l : fpn.fuse(g, zero).levels) EXPECT_EQ(l.value().max_abs(), 0.0);
  for (const auto& l : fpn.fuse(g, rnd).levels) EXPECT_EQ(l.dim(1), 6u);
}

TEST(Msda, HeadsMustDivideChannels) {
  EXPECT_THROW(MsdaSelfAttention("m", 6, 3, {4, 2}), diff::ShapeError);
  EXPECT_NO_THROW(MsdaSelfAttention("m", 8, 3, {2, 2}));
}

TEST(Msda, DegenerateConfigAveragesReferenceSamples) {
  const std::size_t C = 4;
  const std::vector<LevelShape> shapes{{4, 6}, {2, 3}, {1, 2}};
  MsdaSelfAttention m("m", C, 3, {2, 2});
  ParameterStore ps;
  m.init(ps);
  ps.set(m.offset_name() + ".b", Tensor(ps.get(m.offset_name() + ".b").shape()));
  ps.set(m.value_name() + ".w", eye(C));
  ps.set(m.output_name() + ".w", eye(C));
  diff::Graph g(&ps);
  auto f = pyramid(g, C, shapes, 5);
  Var q = MsdaSelfAttention::flatten_queries(g, f);
  auto att = m.attend(g, q, shapes);
  std::size_t qi = 0;
  for (std::size_t ql = 0; ql < 3; ++ql) {
    for (std::size_t i = 0; i < shapes[ql].height; ++i) {
      for (std::size_t j = 0; j < shapes[ql].width; ++j, ++qi) {
        for (std::size_t c = 0; c < C; ++c) {
          double mean = 0.0;
          for (std::size_t l = 0; l < 3; ++l) {
            const auto [H, W] = shapes[l];
            const double u = (j + 0.5) / shapes[ql].width * W - 0.5;
            const double v = (i + 0.5) / shapes[ql].height * H - 0.5;
            mean += oracle::bilinear(f.levels[l].value().data() + c * H * W, H, W, u, v) / 3.0;
          }
          EXPECT_NEAR(att.output.value().at(qi, c), mean, 1e-12);
        }
      }
    }
  }
}

TEST(Msda, SingleLevelZeroOffsetIsIdentity) {
  const std::size_t C = 4;
  MsdaSelfAttention m("m", C, 1, {2, 1});
  ParameterStore ps;
  m.init(ps);
  ps.set(m.offset_name() + ".b", Tensor(ps.get(m.offset_name() + ".b").shape()));
  ps.set(m.value_name() + ".w", eye(C));
  ps.set(m.output_name() + ".w", eye(C));
  diff::Graph g(&ps);
  auto f = pyramid(g, C, {{5, 7}}, 9);
  auto out = m.forward(g, f);
  EXPECT_LT(diff::max_abs_diff(out.levels[0].value(), diff::scale(f.levels[0], 2.0).value()), 1e-14);
  ps.set(m.output_name() + ".w", Tensor({C, C}));
  diff::Graph g2(&ps);
  auto f2 = pyramid(g2, C, {{5, 7}}, 9);
  EXPECT_EQ(diff::max_abs_diff(m.forward(g2, f2).levels[0].value(), f2.levels[0].value()), 0.0);
}

TEST(Msda, AttentionWeightsAreAProbabilitySimplex) {
  const std::size_t C = 8;
  const std::vector<LevelShape> shapes{{8, 8}, {4, 4}, {2, 2}};
  MsdaSelfAttention m("m", C, 3, {2, 2});
  ParameterStore ps(4);
  m.init(ps);
  randomize(ps, 8, 1.0);
  diff::Graph g(&ps);
  auto f = pyramid(g, C, shapes, 1);
  auto att = m.attend(g, MsdaSelfAttention::flatten_queries(g, f), shapes);
  const Tensor& a = att.attention.value();
  for (std::size_t q = 0; q < a.dim(0); ++q) {
    for (std::size_t h = 0; h < 2; ++h) {
      double s = 0.0;
      for (std::size_t k = 0; k < 6; ++k) {
        EXPECT_GE(a.at(q, h, k), 0.0);
        s += a.at(q, h, k);
      }
      EXPECT_NEAR(s, 1.0, 1e-14);
    }
  }
}

TEST(Msda, MatchesNaiveLoopOracle) {
  const std::size_t C = 8;
  const std::vector<LevelShape> shapes{{8, 8}, {4, 4}, {2, 2}};
  MsdaSelfAttention m("m", C, 3, {2, 2});
  for (std::uint64_t trial = 0; trial < 10; ++trial) {
    ParameterStore ps(trial);
    m.init(ps);
    randomize(ps, 50 + trial, 1.5);
    diff::Graph g(&ps);
    auto f = pyramid(g, C, shapes, 100 * trial);
    auto out = m.forward(g, f);
    std::vector<Tensor> lv;
    for (const auto& l : f.levels) lv.push_back(l.value().reshaped({C, l.dim(2), l.dim(3)}));
    auto ref = oracle::msda(ps, "m", lv, 2, 2);
    for (std::size_t l = 0; l < 3; ++l) {
      EXPECT_LT(diff::max_abs_diff(out.levels[l].value().reshaped(ref[l].shape()), ref[l]), 1e-10);
    }
  }
}

TEST(Msda, GradientMatchesFiniteDifferences) {
  const std::size_t C = 4;
  const std::vector<LevelShape> shapes{{4, 4}, {2, 2}, {1, 1}};
  MsdaSelfAttention m("m", C, 3, {2, 2});
  ParameterStore ps(6);
  m.init(ps);
  randomize(ps, 3, 0.3);
  auto fn = [&](diff::Graph& g, std::span<const Var> v) {
    MultiScaleFeatures f{{v.begin(), v.end()}};
    auto out = m.forward(g, f);
    return diff::concat({diff::reshape(out.levels[0], {C * 16}), diff::reshape(out.levels[1], {C * 4}),
                         diff::reshape(out.levels[2], {C})},
                        0);
  };
  auto rep = diff::fd_check(fn, {random_tensor({1, C, 4, 4}, 1), random_tensor({1, C, 2, 2}, 2),
                                 random_tensor({1, C, 1, 1}, 3)},
                            1e-4, {}, &ps);
  EXPECT_LE(rep.max_rel_error, 1e-3);
  EXPECT_GT(rep.probed, 20u);
  auto pfn = [&](diff::Graph& g) {
    MultiScaleFeatures f;
    f.levels.push_back(g.constant(random_tensor({1, C, 4, 4}, 1)));
    f.levels.push_back(g.constant(random_tensor({1, C, 2, 2}, 2)));
    f.levels.push_back(g.constant(random_tensor({1, C, 1, 1}, 3)));
    return m.forward(g, f).levels[0];
  };
  auto prep = diff::fd_check_params(pfn, ps, 1e-4);
  EXPECT_LE(prep.max_rel_error, 1e-3);
}

namespace {

// Camera at the origin facing +x with a 96x64 image; feature stride 8.
geom::CameraCalibration forward_camera(double yaw = 0.0) {
  return geom::make_horizontal_camera(geom::Vec3(0, 0, 0.5), yaw, 1.8, 64, 96);
}

// Voxel grid holding a single voxel centered at (x, y, z).
geom::GridSpec single_voxel(double x, double y, double z) {
  return geom::GridSpec{x - 0.5, x + 0.5, y - 0.5, y + 0.5, 1.0, geom::VerticalRange{z - 0.5, z + 0.5, 1.0}};
}

}  // namespace

TEST(Lift, SingleCameraCarriesSampledFeature) {
  auto cam = forward_camera();
  auto grid = single_voxel(6.0, 1.0, 1.0);
  const auto px = *cam.project(geom::Vec3(6, 1, 1));
  Tensor feat = random_tensor({1, 3, 8, 12}, 4);
  diff::Graph g;
  Var bev = lift_to_bev({g.input(feat)}, {cam}, grid, 8);
  ASSERT_EQ(bev.shape(), (Shape{1, 3, 1, 1}));
  for (std::size_t c = 0; c < 3; ++c) {
    const double ref = oracle::bilinear(feat.data() + c * 96, 8, 12, (px.x() + 0.5) / 8 - 0.5,
                                        (px.y() + 0.5) / 8 - 0.5);
    EXPECT_NEAR(bev.value()[c], ref, 1e-14);
  }
}

TEST(Lift, OverlappingCamerasAreAveraged) {
  auto a = forward_camera(0.2), b = forward_camera(-0.2);
  auto grid = single_voxel(8.0, 0.0, 0.5);
  ASSERT_TRUE(a.project(geom::Vec3(8, 0, 0.5)) && b.project(geom::Vec3(8, 0, 0.5)));
  Tensor fa = random_tensor({1, 2, 8, 12}, 1), fb = random_tensor({1, 2, 8, 12}, 2);
  diff::Graph g;
  Var only_a = lift_to_bev({g.input(fa)}, {a}, grid, 8);
  Var only_b = lift_to_bev({g.input(fb)}, {b}, grid, 8);
  Var both = lift_to_bev({g.input(fa), g.input(fb)}, {a, b}, grid, 8);
  for (std::size_t c = 0; c < 2; ++c) {
    EXPECT_NEAR(both.value()[c], 0.5 * (only_a.value()[c] + only_b.value()[c]), 1e-15);
  }
}

TEST(Lift, DivisorCountsOnlyCamerasThatSeeTheVoxel) {
  auto front = forward_camera(0.0), back = forward_camera(std::numbers::pi);
  auto grid = single_voxel(8.0, 0.0, 0.5);
  Tensor ff = random_tensor({1, 2, 8, 12}, 1), fr = random_tensor({1, 2, 8, 12}, 2);
  diff::Graph g;
  Var one = lift_to_bev({g.input(ff)}, {front}, grid, 8);
  Var two = lift_to_bev({g.input(ff), g.input(fr)}, {front, back}, grid, 8);
  EXPECT_EQ(one.value(), two.value());
}

TEST(Lift, VoxelBehindAllCamerasIsZero) {
  auto grid = single_voxel(-8.0, 0.0, 0.5);
  diff::Graph g;
  Var bev = lift_to_bev({g.input(random_tensor({1, 2, 8, 12}, 1))}, {forward_camera()}, grid, 8);
  EXPECT_EQ(bev.value().max_abs(), 0.0);
}

TEST(Lift, ChannelBookkeepingAndPermutationInvariance) {
  const geom::GridSpec grid{0, 8, -4, 4, 1.0, geom::VerticalRange{-1, 3, 1}};
  std::vector<geom::CameraCalibration> cams{forward_camera(0.3), forward_camera(-0.3),
                                            forward_camera(0.0)};
  std::vector<Tensor> feats{random_tensor({1, 3, 8, 12}, 1), random_tensor({1, 3, 8, 12}, 2),
                            random_tensor({1, 3, 8, 12}, 3)};
  diff::Graph g;
  Var fwd = lift_to_bev({g.input(feats[0]), g.input(feats[1]), g.input(feats[2])}, cams, grid, 8);
  Var rev = lift_to_bev({g.input(feats[2]), g.input(feats[0]), g.input(feats[1])},
                        {cams[2], cams[0], cams[1]}, grid, 8);
  EXPECT_EQ(fwd.shape(), (Shape{1, 4 * 3, 8, 8}));
  EXPECT_LT(diff::max_abs_diff(fwd.value(), rev.value()), 1e-15);
  EXPECT_GT(fwd.value().max_abs(), 0.0);
  // Channel k * C + c holds layer k, feature channel c.
  auto layer2 = lift_to_bev({g.input(feats[0])}, {cams[0]}, geom::GridSpec{0, 8, -4, 4, 1.0, geom::VerticalRange{1, 2, 1}}, 8);
  Var full = lift_to_bev({g.input(feats[0])}, {cams[0]}, grid, 8);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t p = 0; p < 64; ++p) {
      EXPECT_EQ(full.value()[(2 * 3 + c) * 64 + p], layer2.value()[c * 64 + p]);
    }
  }
}

TEST(Lift, RequiresCameras) {
  diff::Graph g;
  EXPECT_THROW(lift_to_bev({}, {}, single_voxel(1, 1, 1), 8), geom::GeometryError);
}

TEST(Lift, GradientFlowsToCameraFeatures) {
  const geom::GridSpec g4{5, 9, -2, 2, 2.0, geom::VerticalRange{0, 1, 1}};
  ASSERT_EQ(g4.rows() * g4.cols() * g4.layers(), 4u);
  std::vector<geom::CameraCalibration> cams{forward_camera(0.25), forward_camera(-0.25)};
  auto fn = [&](diff::Graph&, std::span<const Var> v) {
    return lift_to_bev({v[0], v[1]}, cams, g4, 8);
  };
  auto rep = diff::fd_check(fn, {random_tensor({1, 2, 8, 12}, 1), random_tensor({1, 2, 8, 12}, 2)}, 1e-4);
  EXPECT_LE(rep.max_rel_error, 1e-3);
}
