// Acceptance suite. Prints one PASS/FAIL line per criterion and exits nonzero
// if any criterion fails. Every threshold below is fixed; nothing is tuned at
// run time.

#include <CLI11.hpp>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "bevfuse/cli/cli.hpp"
#include "bevfuse/diffcore/fd_check.hpp"
#include "oracles/oracles.hpp"
#include "support/fixtures.hpp"
#include "support/op_cases.hpp"

using namespace bevfuse;
namespace fs = std::filesystem;
using diff::Graph;
using diff::ParameterStore;
using diff::Shape;
using diff::Tensor;
using diff::Var;
using fixture::random_tensor;

namespace {

// ---- thresholds -----------------------------------------------------------

constexpr double kFdEps = 1e-4;
constexpr double kFdTol = 1e-3;
constexpr double kFdSeconds = 120.0;
constexpr double kOracleTol = 1e-10;
constexpr std::size_t kOracleInstances = 100;
constexpr double kOmegaHalfTol = 1e-6;
constexpr double kRoundTripTol = 1e-9;
constexpr std::size_t kRoundTripCases = 1000;
constexpr double kOverfitIou = 0.90;
constexpr std::size_t kOverfitMaxSteps = 2000;
constexpr double kOverfitSeconds = 1800.0;
constexpr double kFusionGain = 0.05;

// ---- experiment configs ---------------------------------------------------

// Desk world, overfit run: 16 scenes, batch 2, 125 epochs = 1000 steps.
const char* kOverfitConfig = R"(epochs = 125
effective_batch = 2
peak_lr = 0.003
warmup_epochs = 5
weight_decay = 0
seed = 1
)";

// Flat-shaded world shared by the fusion and camera-only runs.
const char* kFlatBase = R"(shading = flat
epochs = 30
effective_batch = 4
peak_lr = 0.003
warmup_epochs = 2
seed = 1
)";
const char* kFusionExtra = "radar_modality_dropout = 0.2\n";
const char* kCameraExtra = "use_radar = false\n";

constexpr std::size_t kOverfitScenes = 16, kFlatTrainScenes = 64, kFlatHeldOut = 32;
constexpr std::uint64_t kTrainSeed = 1000, kHeldOutSeed = 5000;

// ---- reporting ------------------------------------------------------------

struct Outcome {
  bool pass;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& name, const Outcome& o, double seconds) {
  std::printf("%s [%d] %s: %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", id, name.c_str(), o.detail.c_str(), seconds);
  std::fflush(stdout);
  if (!o.pass) ++failures;
}

void run_criterion(int id, const std::string& name, const std::function<Outcome()>& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = fn();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  report(id, name, o, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void perturb(ParameterStore& ps, std::uint64_t seed, double scale) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(-scale, scale);
  for (auto& [name, t] : ps)
    for (double& v : t.values()) v += d(rng);
}

void copy_prefix(ParameterStore& ps, const std::string& from, const std::string& to) {
  std::vector<std::pair<std::string, Tensor>> copies;
  for (const auto& [name, t] : ps) {
    if (name.rfind(from, 0) == 0) copies.emplace_back(to + name.substr(from.size()), t);
  }
  for (auto& [name, t] : copies) ps.set(name, t);
}

radar::RadarPointCloud random_cloud(std::size_t n, std::uint64_t seed, double extent, std::size_t sweeps) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(-extent, extent), u(-1, 1);
  radar::RadarPointCloud c;
  c.num_sweeps = sweeps;
  c.encoding = radar::TemporalEncoding::kOneHot;
  for (std::size_t p = 0; p < n; ++p) {
    radar::RadarPoint q;
    q.x = d(rng);
    q.y = d(rng);
    q.z = u(rng);
    q.radial_velocity = 3 * u(rng);
    q.rcs = 5 * u(rng);
    q.sweep = static_cast<std::size_t>(rng() % sweeps);
    c.points.push_back(q);
  }
  return c;
}

Tensor binary_tensor(Shape shape, std::uint64_t seed) {
  Tensor t(std::move(shape));
  std::mt19937_64 rng(seed);
  for (double& v : t.values()) v = static_cast<double>(rng() & 1u);
  return t;
}

// ---- 1: gradients ---------------------------------------------------------

struct FdTally {
  double worst = 0.0;
  std::string worst_name;
  std::size_t checks = 0, probed = 0;

  void add(const std::string& name, const diff::FdReport& r) {
    ++checks;
    probed += r.probed;
    if (r.probed == 0 || !(r.max_rel_error <= worst)) {
      if (r.probed == 0 || !std::isfinite(r.max_rel_error)) {
        worst = std::numeric_limits<double>::infinity();
      } else {
        worst = r.max_rel_error;
      }
      worst_name = name;
    }
  }
};

Outcome gradient_checks() {
  FdTally t;
  using V = std::span<const Var>;

  for (const auto& c : fixture::op_cases()) {
    for (std::uint64_t probe = 0; probe < 3; ++probe) {
      std::vector<Tensor> inputs;
      for (std::size_t k = 0; k < c.shapes.size(); ++k) {
        Tensor x = random_tensor(c.shapes[k], 7000 + 100 * probe + k);
        if (c.relu_margin > 0) x = fixture::away_from_zero(x, c.relu_margin);
        inputs.push_back(x);
      }
      diff::FdOptions opt;
      opt.seed = probe + 11;
      t.add(c.name, diff::fd_check(c.fn, inputs, kFdEps, opt));
    }
  }

  {
    const Tensor y = binary_tensor({1, 1, 6, 6}, 3);
    t.add("bce_loss", diff::fd_check([&](Graph&, V v) { return train::bce_loss(v[0], y); },
                                     {random_tensor({1, 1, 6, 6}, 4, -3, 3)}, kFdEps));
    t.add("dice_loss", diff::fd_check([&](Graph&, V v) { return train::dice_loss(v[0], y, 1.0); },
                                      {random_tensor({1, 1, 6, 6}, 5, -3, 3)}, kFdEps));
  }

  {
    const std::size_t C = 4;
    image::MsdaSelfAttention m("m", C, 3, {2, 2});
    ParameterStore ps(6);
    m.init(ps);
    perturb(ps, 3, 0.3);
    const std::vector<Tensor> lv{random_tensor({1, C, 4, 4}, 1), random_tensor({1, C, 2, 2}, 2),
                                 random_tensor({1, C, 1, 1}, 3)};
    auto fn = [&](Graph& g, V v) {
      auto out = m.forward(g, image::MultiScaleFeatures{{v.begin(), v.end()}});
      return diff::concat({diff::reshape(out.levels[0], {C * 16}), diff::reshape(out.levels[1], {C * 4}),
                           diff::reshape(out.levels[2], {C})},
                          0);
    };
    t.add("msda.inputs", diff::fd_check(fn, lv, kFdEps, {}, &ps));
    auto pfn = [&](Graph& g) {
      image::MultiScaleFeatures f;
      for (const auto& l : lv) f.levels.push_back(g.constant(l));
      return m.forward(g, f).levels[0];
    };
    t.add("msda.params", diff::fd_check_params(pfn, ps, kFdEps));
  }

  {
    image::ImageEncoder enc("enc", {4, {4, 4, 4}, 4}, 32, 64);
    image::Fpn fpn("fpn", {4, 4, 4}, 4);
    ParameterStore ps(8);
    enc.init(ps);
    fpn.init(ps);
    const Tensor img = random_tensor({1, 3, 32, 64}, 9, 0, 1);
    auto pfn = [&](Graph& g) {
      auto f = fpn.fuse(g, enc.encode(g, g.constant(img)));
      return diff::reshape(f.levels[0], {f.levels[0].value().size()});
    };
    diff::FdOptions opt;
    opt.max_coords = 4;
    t.add("encoder_fpn.params", diff::fd_check_params(pfn, ps, kFdEps, opt));
  }

  {
    const geom::GridSpec g4{5, 9, -2, 2, 2.0, geom::VerticalRange{0, 1, 1}};
    std::vector<geom::CameraCalibration> cams{geom::make_horizontal_camera(geom::Vec3(0, 0, 0.5), 0.25, 1.8, 64, 96),
                                              geom::make_horizontal_camera(geom::Vec3(0, 0, 0.5), -0.25, 1.8, 64, 96)};
    auto fn = [&](Graph&, V v) { return image::lift_to_bev({v[0], v[1]}, cams, g4, 8); };
    t.add("lift_to_bev", diff::fd_check(fn, {random_tensor({1, 2, 8, 12}, 1), random_tensor({1, 2, 8, 12}, 2)}, kFdEps));
  }

  {
    const auto src = geom::GridSpec::centered(3.2, 0.8), dst = geom::GridSpec::centered(3.0, 0.5);
    auto fn = [&](Graph&, V v) { return geom::grid_resample(v[0], src, dst); };
    t.add("grid_resample", diff::fd_check(fn, {random_tensor({1, 2, 8, 8}, 4)}, kFdEps));
  }

  {
    const geom::GridSpec grid = geom::GridSpec::centered(4, 1);
    radar::RadarBranchConfig cfg;
    cfg.encoder = {4, 4, 2};
    cfg.bev_channels = 3;
    cfg.sweeps = 3;
    radar::RadarBranch branch("radar", cfg, grid);
    ParameterStore ps(5);
    branch.init(ps);
    const auto cloud = random_cloud(12, 77, 4.5, 3);
    radar::PointEncoder enc("radar.points", 8, cfg.encoder);
    radar::PyramidAggregator pyr("radar.pyramid", 4, 3, 8, 8);
    const auto order = radar::serialize_points(cloud, grid);
    auto fn = [&](Graph& g, V v) { return pyr.forward(g, radar::scatter_to_bev(enc.encode(g, v[0], order), cloud, grid)); };
    t.add("radar_chain.inputs", diff::fd_check(fn, {radar::point_features(cloud)}, kFdEps, {}, &ps));
    diff::FdOptions opt;
    opt.max_coords = 12;
    t.add("radar_branch.params", diff::fd_check_params([&](Graph& g) { return branch.forward(g, cloud); }, ps, kFdEps, opt));
  }

  {
    fusion::AttentionGate gate{"a", 3, 4, 2};
    ParameterStore ps(12);
    gate.init(ps);
    perturb(ps, 13, 0.5);
    const Tensor x = random_tensor({1, 3, 5, 4}, 14), gg = random_tensor({1, 4, 5, 4}, 15);
    t.add("attention_gate.inputs",
          diff::fd_check([&](Graph& g, V v) { return gate.forward(g, v[0], v[1]).gated; }, {x, gg}, kFdEps, {}, &ps));
    t.add("attention_gate.params", diff::fd_check_params(
                                       [&](Graph& g) { return gate.forward(g, g.constant(x), g.constant(gg)).gated; }, ps, kFdEps));
  }

  {
    fusion::AdaptiveFusion fuse("f", {6, 3}, 8);
    ParameterStore ps(16);
    fuse.init(ps);
    perturb(ps, 17, 0.2);
    const Tensor a = random_tensor({1, 6, 6, 6}, 18), b = random_tensor({1, 3, 6, 6}, 19);
    auto fn = [&](Graph& g, V v) { return fuse.forward(g, {v[0], v[1]}).fused; };
    diff::FdOptions opt;
    opt.max_coords = 60;
    t.add("adaptive_fusion.inputs", diff::fd_check(fn, {a, b}, kFdEps, opt, &ps));
    opt.max_coords = 10;
    t.add("adaptive_fusion.params",
          diff::fd_check_params([&](Graph& g) { return fuse.forward(g, {g.constant(a), g.constant(b)}).fused; }, ps, kFdEps,
                                opt));
  }

  {
    fusion::AttentionUNet unet("u", 8, 3, 16, 16);
    ParameterStore ps(11);
    unet.init(ps);
    const Tensor x = random_tensor({1, 8, 16, 16}, 12);
    diff::FdOptions opt;
    opt.max_coords = 200;
    t.add("attention_unet.inputs", diff::fd_check([&](Graph& g, V v) { return unet.forward(g, v[0]); }, {x}, kFdEps, opt, &ps));
    opt.max_coords = 4;
    t.add("attention_unet.params",
          diff::fd_check_params([&](Graph& g) { return unet.forward(g, g.constant(x)); }, ps, kFdEps, opt));
  }

  {
    fusion::SegmentationHead head{"h", 3, 1, geom::GridSpec::centered(3.2, 0.4), geom::GridSpec::centered(3.0, 0.5)};
    ParameterStore ps(20);
    head.init(ps);
    const Tensor x = random_tensor({1, 3, 16, 16}, 21);
    diff::FdOptions opt;
    opt.max_coords = 100;
    t.add("segmentation_head.inputs", diff::fd_check([&](Graph& g, V v) { return head.forward(g, v[0]); }, {x}, kFdEps, opt, &ps));
    t.add("segmentation_head.params",
          diff::fd_check_params([&](Graph& g) { return head.forward(g, g.constant(x)); }, ps, kFdEps));
  }

  {
    const auto cfg = fixture::micro_config();
    fusion::BevFusionModel model(cfg);
    ParameterStore ps(21);
    model.init(ps);
    const train::Sample s = fixture::micro_sample(4);
    diff::FdOptions opt;
    opt.max_coords = 2;
    t.add("end_to_end_loss.params",
          diff::fd_check_params([&](Graph& g) { return train::forward_loss(g, model, s, train::LossWeights{}).total; }, ps,
                                kFdEps, opt));
  }

  const bool ok = t.worst <= kFdTol;
  return {ok, fmt("%zu checks, %zu coordinates, worst rel error %.3g (%s) vs <= %.0e", t.checks, t.probed, t.worst,
                  t.worst_name.c_str(), kFdTol)};
}

// ---- 2: kernel oracles ----------------------------------------------------

Outcome kernel_oracles() {
  std::vector<std::pair<std::string, double>> worst;

  {
    double w = 0;
    for (std::size_t k = 0; k < kOracleInstances; ++k) {
      const geom::GridSpec grid = geom::GridSpec::centered(4.0 + (k % 3), 0.5);
      const auto cloud = random_cloud(20 + k % 50, 100 + k, 6.0, 3);
      const Tensor f = random_tensor({cloud.size(), 5}, 200 + k);
      Graph g;
      const Tensor y = radar::scatter_to_bev(g.input(f), cloud, grid).value();
      w = std::max(w, diff::max_abs_diff(y, oracle::scatter(f, radar::point_cells(cloud, grid), grid.rows(), grid.cols())));
    }
    worst.emplace_back("scatter_to_bev", w);
  }
  {
    double w = 0;
    for (std::size_t k = 0; k < kOracleInstances; ++k) {
      const std::size_t H = 3 + k % 5, W = 4 + k % 7;
      const Tensor m = random_tensor({2, H, W}, 300 + k);
      const Tensor coords = random_tensor({30, 2}, 400 + k, -1.5, static_cast<double>(std::max(H, W)) + 0.5);
      Graph g;
      const Tensor y = geom::bilinear_sample(g.input(m), g.input(coords)).value();
      for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t p = 0; p < 30; ++p) {
          const double ref = oracle::bilinear(m.data() + c * H * W, H, W, coords[2 * p], coords[2 * p + 1]);
          w = std::max(w, std::abs(y[c * 30 + p] - ref));
        }
    }
    worst.emplace_back("bilinear_sample", w);
  }
  {
    double w = 0;
    const std::size_t C = 8;
    const std::vector<image::LevelShape> shapes{{8, 8}, {4, 4}, {2, 2}};
    image::MsdaSelfAttention m("m", C, 3, {2, 2});
    for (std::size_t k = 0; k < kOracleInstances; ++k) {
      ParameterStore ps(k);
      m.init(ps);
      perturb(ps, 500 + k, 1.5);
      Graph g(&ps);
      image::MultiScaleFeatures f;
      for (std::size_t l = 0; l < 3; ++l) {
        f.levels.push_back(g.input(random_tensor({1, C, shapes[l].height, shapes[l].width}, 600 + 10 * k + l)));
      }
      const auto out = m.forward(g, f);
      std::vector<Tensor> lv;
      for (const auto& l : f.levels) lv.push_back(l.value().reshaped({C, l.dim(2), l.dim(3)}));
      const auto ref = oracle::msda(ps, "m", lv, 2, 2);
      for (std::size_t l = 0; l < 3; ++l) {
        w = std::max(w, diff::max_abs_diff(out.levels[l].value().reshaped(ref[l].shape()), ref[l]));
      }
    }
    worst.emplace_back("msda", w);
  }
  {
    double w = 0;
    fusion::AttentionGate gate{"a", 3, 4, 2};
    for (std::size_t k = 0; k < kOracleInstances; ++k) {
      ParameterStore ps(k);
      gate.init(ps);
      perturb(ps, 700 + k, 1.0);
      Graph g(&ps);
      const Tensor x = random_tensor({1, 3, 6, 5}, 800 + 2 * k), gg = random_tensor({1, 4, 6, 5}, 801 + 2 * k);
      const auto r = gate.forward(g, g.input(x), g.input(gg));
      Tensor psi;
      const Tensor ref = oracle::attention_gate(ps, "a", x, gg, &psi);
      w = std::max({w, diff::max_abs_diff(r.gated.value(), ref), diff::max_abs_diff(r.psi.value(), psi)});
    }
    worst.emplace_back("attention_gate", w);
  }
  {
    double wb = 0, wd = 0;
    for (std::size_t k = 0; k < kOracleInstances; ++k) {
      const Tensor x = random_tensor({1, 1, 5, 6}, 900 + k, -6, 6), y = binary_tensor({1, 1, 5, 6}, 1000 + k);
      Graph g;
      wb = std::max(wb, std::abs(train::bce_loss(g.input(x), y).value()[0] - oracle::bce(x, y)));
      wd = std::max(wd, std::abs(train::dice_loss(g.input(x), y, 1.0).value()[0] - oracle::dice(x, y, 1.0)));
    }
    worst.emplace_back("bce", wb);
    worst.emplace_back("dice", wd);
  }

  bool ok = true;
  std::string detail;
  for (const auto& [name, w] : worst) {
    ok = ok && w <= kOracleTol;
    detail += fmt("%s %.2g, ", name.c_str(), w);
  }
  detail += fmt("%zu instances each vs <= %.0e", kOracleInstances, kOracleTol);
  return {ok, detail};
}

// ---- 3: adaptive fusion weights -------------------------------------------

Outcome fusion_weights() {
  std::size_t exact = 0, total = 0;
  double half_err = 0;
  for (std::uint64_t k = 0; k < 20; ++k) {
    const std::size_t ci = 2 + k % 5, cr = 1 + k % 3, C = 4 * (1 + k % 3), S = 4 + k % 5;
    {
      fusion::AdaptiveFusion fuse("f", {ci, cr}, C);
      ParameterStore ps(k);
      fuse.init(ps);
      perturb(ps, 100 + k, 0.3);
      Graph g(&ps);
      Var fi = g.input(random_tensor({1, ci, S, S}, 200 + k));
      Var fr = g.input(random_tensor({1, cr, S, S}, 300 + k));
      fusion::FusionOverrides ov;
      ov.omega = std::vector<double>{1.0, 0.0};
      const auto out = fuse.forward(g, {fi, fr}, ov);
      const Var ref = fuse.se().forward(g, fuse.block(0).forward(g, fi));
      ++total;
      exact += out.fused.value() == ref.value();
    }
    {
      fusion::AdaptiveFusion fuse("f", {ci, ci}, C);
      ParameterStore ps(k + 50);
      fuse.init(ps);
      perturb(ps, 400 + k, 0.3);
      copy_prefix(ps, "f.modal0.", "f.modal1.");
      Graph g(&ps);
      Var x = g.input(random_tensor({1, ci, S, S}, 500 + k));
      const auto out = fuse.forward(g, {x, x});
      half_err = std::max({half_err, std::abs(out.omega.value()[0] - 0.5), std::abs(out.omega.value()[1] - 0.5)});
    }
  }
  const bool ok = exact == total && half_err <= kOmegaHalfTol;
  return {ok, fmt("omega=(1,0) bit-exact in %zu/%zu, shared-params |omega-0.5| max %.2g vs <= %.0e", exact, total, half_err,
                  kOmegaHalfTol)};
}

// ---- 4: projection round trip ---------------------------------------------

geom::CameraCalibration random_camera(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1, 1), f(80, 600), yaw(-3.14, 3.14);
  geom::CameraCalibration c;
  c.height = 64 + static_cast<int>(rng() % 256);
  c.width = 96 + static_cast<int>(rng() % 512);
  c.intrinsics << f(rng), 0, 0.5 * c.width * (1 + 0.3 * u(rng)), 0, f(rng), 0.5 * c.height * (1 + 0.3 * u(rng)), 0, 0, 1;
  // Heading, pitch and roll around a horizontal camera.
  const Eigen::Matrix3d R =
      (Eigen::AngleAxisd(0.3 * u(rng), Eigen::Vector3d::UnitZ()) * Eigen::AngleAxisd(0.3 * u(rng), Eigen::Vector3d::UnitX()))
          .toRotationMatrix() *
      geom::make_horizontal_camera(geom::Vec3::Zero(), yaw(rng), 1.0, 2, 2).extrinsics.topLeftCorner<3, 3>();
  const geom::Vec3 pos(2 * u(rng), 2 * u(rng), 1.5 + 0.5 * u(rng));
  c.extrinsics.topLeftCorner<3, 3>() = R;
  c.extrinsics.topRightCorner<3, 1>() = -R * pos;
  c.validate();
  return c;
}

Outcome projection_round_trip() {
  std::mt19937_64 rng(2024);
  const geom::GridSpec grid{-16, 16, -16, 16, 1.0, geom::VerticalRange{-1, 3, 1}};
  double worst = 0;
  std::size_t cases = 0, attempts = 0;
  while (cases < kRoundTripCases && attempts < 100 * kRoundTripCases) {
    ++attempts;
    const auto cam = random_camera(rng);
    const auto pv = geom::project_voxels(grid, cam);
    std::vector<std::size_t> valid;
    for (std::size_t v = 0; v < pv.valid.size(); ++v)
      if (pv.valid[v]) valid.push_back(v);
    if (valid.empty()) continue;
    const std::size_t v = valid[rng() % valid.size()];
    const std::size_t per_layer = grid.rows() * grid.cols();
    const std::size_t layer = v / per_layer, i = (v % per_layer) / grid.cols(), j = v % grid.cols();
    const geom::Vec3 center(grid.row_center(i), grid.col_center(j), grid.layer_center(layer));
    const geom::Vec3 back = cam.unproject(pv.pixels[v], pv.depth[v]);
    worst = std::max(worst, (back - center).norm());
    ++cases;
  }

  // Principal point: a point on the optical axis lands on (cx, cy) exactly.
  std::size_t pp_exact = 0, pp_total = 0;
  for (int k = 0; k < 200; ++k) {
    std::uniform_real_distribution<double> u(-5, 5), d(0.5, 80);
    geom::CameraCalibration c;
    c.height = 200;
    c.width = 320;
    c.intrinsics << 100 + 10 * (k % 40), 0, 150 + k % 17, 0, 120 + 5 * (k % 30), 90 + k % 13, 0, 0, 1;
    const double tx = u(rng), ty = u(rng), tz = u(rng);
    c.extrinsics.topRightCorner<3, 1>() = geom::Vec3(tx, ty, tz);
    const auto px = c.project(geom::Vec3(-tx, -ty, d(rng) - tz));
    ++pp_total;
    pp_exact += px && px->x() == c.cx() && px->y() == c.cy();
  }

  // Behind the camera: never projects, never a valid voxel.
  std::size_t behind_ok = 0, behind_total = 0;
  for (int k = 0; k < 200; ++k) {
    const auto cam = random_camera(rng);
    const geom::Mat3 R = cam.extrinsics.topLeftCorner<3, 3>();
    const geom::Vec3 center = cam.center_ego();
    std::uniform_real_distribution<double> u(-1, 1), d(0.0, 30.0);
    // Camera-frame point with z <= 0 mapped back to ego.
    const geom::Vec3 pc(10 * u(rng), 10 * u(rng), -d(rng));
    const geom::Vec3 p = R.transpose() * pc + center;
    ++behind_total;
    const geom::GridSpec one{p.x() - 0.5, p.x() + 0.5, p.y() - 0.5, p.y() + 0.5, 1.0,
                             geom::VerticalRange{p.z() - 0.5, p.z() + 0.5, 1.0}};
    const bool rejected = !cam.project(p) && cam.to_camera(p).z() <= geom::kNearPlane + 1e-9;
    behind_ok += rejected && !geom::project_voxels(one, cam).valid[0];
  }

  const bool ok = cases == kRoundTripCases && worst <= kRoundTripTol && pp_exact == pp_total && behind_ok == behind_total;
  return {ok, fmt("%zu voxels, max error %.2g m vs <= %.0e; principal point exact %zu/%zu; behind-camera rejected %zu/%zu",
                  cases, worst, kRoundTripTol, pp_exact, pp_total, behind_ok, behind_total)};
}

// ---- 8: IoU metric --------------------------------------------------------

Outcome iou_metric() {
  auto logits = [](std::initializer_list<int> on) {
    Tensor t({1, 1, 4, 4}, -5.0);
    for (int i : on) t[i] = 5.0;
    return t;
  };
  auto target = [](std::initializer_list<int> on) {
    Tensor t({1, 1, 4, 4});
    for (int i : on) t[i] = 1.0;
    return t;
  };
  const double one = train::iou(logits({0, 1, 2, 3}), target({0, 1, 2, 3}));
  const double zero = train::iou(logits({0, 1}), target({4, 5}));
  const double third = train::iou(logits({0, 1, 2, 3}), target({2, 3, 4, 5}));

  // Probability exactly 0.5 counts as positive; just below does not.
  const bool threshold = train::kIouThreshold == 0.5 && train::iou(Tensor({1}, 0.0), Tensor({1}, 1.0)) == 1.0 &&
                         train::iou(Tensor({1}, -1e-12), Tensor({1}, 1.0)) == 0.0;

  // Ignored cells count in neither intersection nor union.
  Tensor lg({1, 1, 2, 4}, -5.0), tg({1, 1, 2, 4}), ig({1, 1, 2, 4});
  lg[0] = lg[1] = 5.0;
  tg[0] = 1.0;
  ig[1] = 1.0;
  const bool ignore = train::iou(lg, tg) == 0.5 && train::iou(lg, tg, 0.5, &ig) == 1.0;

  // Visibility cut at 40%: 0.39 goes to the ignore mask, 0.40 to the target.
  synth::Scene s;
  synth::VehicleBox a, b;
  a.center = geom::Vec3(4, 4, 0.8);
  b.center = geom::Vec3(-4, -4, 0.8);
  a.visibility = 0.39;
  b.visibility = 0.40;
  s.vehicles = {a, b};
  const auto grid = geom::GridSpec::centered(8.0, 0.5);
  const auto gt = synth::rasterize_gt(s, grid);
  const auto ca = *grid.cell_of(4, 4), cb = *grid.cell_of(-4, -4);
  const std::size_t C = grid.cols();
  const bool cut = synth::kVisibilityCut == 0.4 && gt.ignore[ca.row * C + ca.col] == 1.0 && gt.gt[ca.row * C + ca.col] == 0.0 &&
                   gt.gt[cb.row * C + cb.col] == 1.0 && gt.ignore[cb.row * C + cb.col] == 0.0;

  const bool ok = one == 1.0 && zero == 0.0 && third == 1.0 / 3.0 && threshold && ignore && cut;
  return {ok, fmt("analytic %.17g / %.17g / %.17g (want 1, 0, 1/3 exactly); threshold 0.5 %s; ignore mask %s; 40%% cut %s", one,
                  zero, third, threshold ? "ok" : "wrong", ignore ? "ok" : "wrong", cut ? "ok" : "wrong")};
}

// ---- CLI-driven experiments (5, 6, 7, 9) ----------------------------------

struct Cli {
  fs::path log_path;

  std::string operator()(const std::vector<std::string>& args) const {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    std::ofstream log(log_path, std::ios::app);
    log << "$ bevfuse";
    for (const auto& a : args) log << ' ' << a;
    log << "\n" << out.str() << err.str();
    if (code != 0) throw std::runtime_error("bevfuse " + args.at(0) + " exited " + std::to_string(code) + ": " + err.str());
    return out.str();
  }
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(is), {}};
}

double parse_value(const std::string& text, const std::string& key) {
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.rfind(key + " ", 0) == 0) return std::stod(line.substr(key.size() + 1));
  }
  throw std::runtime_error("no '" + key + "' line in output");
}

bool has_line(const std::string& text, const std::string& line) {
  return ("\n" + text).find("\n" + line + "\n") != std::string::npos;
}

std::size_t last_step(const std::string& csv) {
  std::istringstream is(csv);
  std::string line, last;
  while (std::getline(is, line))
    if (!line.empty()) last = line;
  const auto c0 = last.find(','), c1 = last.find(',', c0 + 1);
  return std::stoul(last.substr(c0 + 1, c1 - c0 - 1));
}

bool same_directory(const fs::path& a, const fs::path& b, std::size_t& files) {
  files = 0;
  std::vector<fs::path> names;
  for (const auto& e : fs::directory_iterator(a)) names.push_back(e.path().filename());
  std::size_t nb = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(b)) ++nb;
  if (names.size() != nb) return false;
  for (const auto& n : names) {
    if (!fs::exists(b / n) || slurp(a / n) != slurp(b / n)) return false;
    ++files;
  }
  return true;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::string work = "acceptance_work";
  app.add_option("--work-dir", work, "Scratch directory for datasets and runs");
  CLI11_PARSE(app, argc, argv);

  const fs::path root(work);
  fs::remove_all(root);
  fs::create_directories(root);
  const Cli bevfuse{root / "cli.log"};
  std::ofstream(root / "overfit.cfg") << kOverfitConfig;
  std::ofstream(root / "fusion.cfg") << kFlatBase << kFusionExtra;
  std::ofstream(root / "camera.cfg") << kCameraExtra << kFlatBase;
  auto p = [&](const char* rel) { return (root / rel).string(); };

  run_criterion(1, "finite-difference gradients", [] {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o = gradient_checks();
    const double s = seconds_since(t0);
    o.detail += fmt("; %.1f s vs < %.0f s", s, kFdSeconds);
    o.pass = o.pass && s < kFdSeconds;
    return o;
  });
  run_criterion(2, "kernel oracles", kernel_oracles);
  run_criterion(3, "adaptive fusion weights", fusion_weights);
  run_criterion(4, "projection round trip", projection_round_trip);

  // 5 + 9: overfit run, generated and trained twice.
  bool gen_identical = false, train_identical = false;
  std::string gen_detail, train_detail;
  run_criterion(5, "overfit 16 desk scenes", [&] {
    const std::string seed = std::to_string(kTrainSeed), n = std::to_string(kOverfitScenes);
    bevfuse({"gen", "--config", p("overfit.cfg"), "--out", p("overfit_a"), "--num-scenes", n, "--seed", seed});
    bevfuse({"gen", "--config", p("overfit.cfg"), "--out", p("overfit_b"), "--num-scenes", n, "--seed", seed});
    std::size_t files = 0;
    gen_identical = same_directory(root / "overfit_a", root / "overfit_b", files);
    gen_detail = fmt("gen: %zu files %s", files, gen_identical ? "bit-identical" : "DIFFER");

    const auto t0 = std::chrono::steady_clock::now();
    bevfuse({"train", "--config", p("overfit.cfg"), "--data", p("overfit_a"), "--out", p("run_overfit_a")});
    const double train_s = seconds_since(t0);
    bevfuse({"train", "--config", p("overfit.cfg"), "--data", p("overfit_a"), "--out", p("run_overfit_b")});
    const std::string csv = slurp(root / "run_overfit_a" / cli::kMetricsName);
    train_identical = csv == slurp(root / "run_overfit_b" / cli::kMetricsName) &&
                      slurp(root / "run_overfit_a" / cli::kCheckpointName) ==
                          slurp(root / "run_overfit_b" / cli::kCheckpointName);
    train_detail = fmt("train: metrics.csv and checkpoint %s", train_identical ? "bit-identical" : "DIFFER");

    const std::string ev = bevfuse({"eval", "--checkpoint", p("run_overfit_a/checkpoint.bfk"), "--data", p("overfit_a"), "--out",
                                    p("overfit_eval.csv")});
    const double iou = parse_value(ev, "iou");
    const std::size_t steps = last_step(csv);
    const bool ok = iou >= kOverfitIou && steps <= kOverfitMaxSteps && train_s <= kOverfitSeconds && train_identical;
    return Outcome{ok, fmt("train IoU %.4f vs >= %.2f; %zu steps vs <= %zu; %.0f s vs <= %.0f s; deterministic %s", iou,
                           kOverfitIou, steps, kOverfitMaxSteps, train_s, kOverfitSeconds, train_identical ? "yes" : "no")};
  });

  // 6 + 7: flat-shaded fusion vs camera-only.
  run_criterion(6, "radar gain on held-out flat scenes", [&] {
    bevfuse({"gen", "--config", p("fusion.cfg"), "--out", p("flat_train"), "--num-scenes", std::to_string(kFlatTrainScenes),
             "--seed", std::to_string(kTrainSeed)});
    bevfuse({"gen", "--config", p("fusion.cfg"), "--out", p("flat_heldout"), "--num-scenes", std::to_string(kFlatHeldOut),
             "--seed", std::to_string(kHeldOutSeed)});
    bevfuse({"train", "--config", p("fusion.cfg"), "--data", p("flat_train"), "--out", p("run_fusion")});
    bevfuse({"train", "--config", p("camera.cfg"), "--data", p("flat_train"), "--out", p("run_camera")});
    const double fused = parse_value(bevfuse({"eval", "--checkpoint", p("run_fusion/checkpoint.bfk"), "--data", p("flat_heldout"),
                                              "--out", p("fusion_eval.csv")}),
                                     "iou");
    const double camera = parse_value(bevfuse({"eval", "--checkpoint", p("run_camera/checkpoint.bfk"), "--data",
                                               p("flat_heldout"), "--out", p("camera_eval.csv")}),
                                      "iou");
    return Outcome{fused >= camera + kFusionGain,
                   fmt("camera+radar %.4f vs camera-only %.4f: gain %+.4f vs >= %+.2f", fused, camera, fused - camera, kFusionGain)};
  });

  run_criterion(7, "eval with full radar dropout", [&] {
    const std::string out = bevfuse({"eval", "--checkpoint", p("run_fusion/checkpoint.bfk"), "--data", p("flat_heldout"),
                                     "--radar-dropout", "1.0", "--out", p("dropout_eval.csv")});
    const double iou = parse_value(out, "iou");
    const bool finite = has_line(out, "finite yes");
    return Outcome{finite && iou > 0.0, fmt("finite %s, IoU %.4f vs > 0", finite ? "yes" : "no", iou)};
  });

  run_criterion(8, "IoU metric", iou_metric);

  run_criterion(9, "reproducibility", [&] {
    if (gen_detail.empty() || train_detail.empty()) return Outcome{false, "overfit run did not complete"};
    return Outcome{gen_identical && train_identical, gen_detail + "; " + train_detail};
  });

  std::printf("%s: %d failing criteria\n", failures ? "FAILED" : "ALL PASSED", failures);
  return failures ? 1 : 0;
}
