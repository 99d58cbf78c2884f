#pragma once

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "bevfuse/synth/dataset.hpp"

namespace bevfuse::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;

inline constexpr const char* kConfigAttachment = "__config__";
inline constexpr const char* kCheckpointName = "checkpoint.bfk";
inline constexpr const char* kMetricsName = "metrics.csv";

/// Model plus weights restored from a checkpoint written by `train`.
struct LoadedModel {
  synth::ProjectConfig config;
  std::unique_ptr<fusion::BevFusionModel> model;
  diff::ParameterStore params;
};

inline LoadedModel load_model(const std::string& path) {
  const diff::LoadedCheckpoint ckpt = diff::load_checkpoint(path);
  auto it = ckpt.attachments.find(kConfigAttachment);
  if (it == ckpt.attachments.end()) {
    throw diff::FormatError("checkpoint '" + path + "' carries no configuration");
  }
  LoadedModel out;
  out.config = synth::parse_config_text(it->second);
  out.model = std::make_unique<fusion::BevFusionModel>(out.config.model());
  out.params = diff::ParameterStore(out.config.train.seed);
  out.model->init(out.params);
  diff::restore_parameters(out.params, ckpt);
  return out;
}

inline void save_model(const std::string& path, const synth::ProjectConfig& cfg, const diff::ParameterStore& ps) {
  diff::save_checkpoint(path, ps, {{kConfigAttachment, synth::to_config_text(cfg)}});
}

inline synth::ProjectConfig config_or_default(const std::string& path) {
  if (path.empty()) {
    synth::ProjectConfig c;
    synth::validate_config(c);
    return c;
  }
  return synth::load_config(path);
}

namespace detail {

inline void gen(const std::string& config, const std::string& out_dir, std::size_t n,
                std::optional<std::uint64_t> seed, std::ostream& out) {
  const synth::ProjectConfig cfg = config_or_default(config);
  if (n == 0) throw synth::ConfigError("gen: --num-scenes must be at least 1");
  const auto names = synth::generate_dataset(out_dir, cfg, n, seed.value_or(cfg.train.seed));
  out << "wrote " << names.size() << " scenes to " << out_dir << "\n";
}

inline void train(const std::string& config, const std::string& data, const std::string& val_dir,
                  const std::string& out_dir, std::ostream& out) {
  const synth::ProjectConfig cfg = config_or_default(config);
  const auto samples = synth::load_dataset(data, cfg.model());
  std::vector<train::Sample> val;
  if (!val_dir.empty()) val = synth::load_dataset(val_dir, cfg.model());
  std::filesystem::create_directories(out_dir);
  const std::filesystem::path dir(out_dir);
  {
    std::ofstream os(dir / "config.txt");
    os << synth::to_config_text(cfg);
  }
  fusion::BevFusionModel model(cfg.model());
  diff::ParameterStore ps(cfg.train.seed);
  model.init(ps);
  train::MetricLog log((dir / kMetricsName).string());
  train::TrainHooks hooks;
  hooks.on_epoch = [&](const train::MetricRow& r) {
    log.append(r);
    save_model((dir / kCheckpointName).string(), cfg, ps);
    out << "epoch " << r.epoch << "/" << cfg.train.epochs << "  step " << r.step << "  loss " << r.train_loss;
    if (!std::isnan(r.val_iou)) out << "  val_iou " << r.val_iou;
    out << std::endl;
  };
  train::train_loop(cfg.train, model, ps, samples, val.empty() ? nullptr : &val, hooks);
  out << "checkpoint: " << (dir / kCheckpointName).string() << "\n";
}

inline void eval(const std::string& checkpoint, const std::string& data, double dropout, bool no_radar,
                 std::uint64_t seed, const std::string& csv, std::ostream& out) {
  if (dropout < 0 || dropout > 1) throw synth::ConfigError("eval: --radar-dropout must lie in [0, 1]");
  LoadedModel m = load_model(checkpoint);
  const auto samples = synth::load_dataset(data, m.config.model());
  train::EvalOptions opt;
  opt.radar_dropout = dropout;
  opt.no_radar = no_radar;
  opt.seed = seed;
  const train::EvalResult r = train::evaluate(*m.model, m.params, samples, opt);
  const auto paths = synth::read_manifest(data);
  std::ofstream os(csv);
  if (!os) throw std::runtime_error("cannot write '" + csv + "'");
  os << "scene,iou,intersection,union,finite\n";
  char buf[64];
  for (std::size_t i = 0; i < r.scenes.size(); ++i) {
    const auto& s = r.scenes[i];
    std::snprintf(buf, sizeof buf, "%.17g", s.iou);
    os << paths[i].filename().string() << ',' << buf << ',' << s.intersection << ',' << s.union_count << ','
       << (s.finite ? 1 : 0) << '\n';
  }
  out << "scenes " << samples.size() << "\n";
  out << "iou " << r.iou << "\n";
  out << "finite " << (r.all_finite ? "yes" : "no") << "\n";
  out << "per-scene csv: " << csv << "\n";
}

inline void infer(const std::string& checkpoint, const std::string& scene, const std::string& out_dir,
                  std::ostream& out) {
  LoadedModel m = load_model(checkpoint);
  const train::Sample s = synth::to_sample(synth::load_scene(scene), m.config.model());
  diff::Graph g(&m.params, false);
  const diff::Tensor logits = m.model->forward(g, s.input).logits.value();
  const auto& grid = m.config.model().output;
  diff::Tensor prob(logits.shape()), pred(logits.shape());
  for (std::size_t k = 0; k < logits.size(); ++k) {
    prob[k] = 1.0 / (1.0 + std::exp(-logits[k]));
    pred[k] = prob[k] >= train::kIouThreshold ? 1.0 : 0.0;
  }
  std::filesystem::create_directories(out_dir);
  const std::filesystem::path dir(out_dir);
  synth::write_pgm((dir / "pred.pgm").string(), synth::map_to_pgm(pred, grid));
  synth::write_pgm((dir / "prob.pgm").string(), synth::map_to_pgm(prob, grid));
  train::IouAccumulator acc;
  acc.add(logits, s.target, &s.ignore);
  out << "wrote " << (dir / "pred.pgm").string() << " and prob.pgm\n";
  out << "iou " << acc.value() << "\n";
}

inline void render(const std::string& scene, const std::string& pred_path, const std::string& out_path,
                   std::size_t scale, std::ostream& out) {
  if (scale == 0) throw synth::ConfigError("render: --scale must be positive");
  const synth::SceneRecord rec = synth::load_scene(scene);
  const synth::GrayImage pred = synth::read_pgm(pred_path);
  const auto grid = synth::parse_grid_comment(pred.comments);
  if (!grid) throw diff::FormatError("'" + pred_path + "' has no grid comment; was it written by infer?");
  if (grid->rows() != static_cast<std::size_t>(pred.height) || grid->cols() != static_cast<std::size_t>(pred.width)) {
    throw diff::FormatError("'" + pred_path + "': grid comment does not match the image size");
  }
  const synth::GroundTruth gt = synth::rasterize_gt(rec.scene, *grid);
  const auto cls = synth::classify(gt.gt, gt.ignore, synth::pgm_to_mask(pred));
  const auto rgb = synth::overlay_pixels(cls, grid->rows(), grid->cols(), scale);
  synth::write_ppm(out_path, static_cast<int>(grid->rows() * scale), static_cast<int>(grid->cols() * scale), rgb);
  std::size_t counts[5] = {};
  for (auto c : cls) ++counts[static_cast<int>(c)];
  out << "correct " << counts[1] << "  missing " << counts[2] << "  wrong " << counts[3] << "  ignored "
      << counts[4] << "\n";
}

}  // namespace detail

/// Entry point shared by the executable and the tests. `args` excludes the
/// program name.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Camera + radar BEV vehicle segmentation on synthetic scenes", "bevfuse"};
  app.require_subcommand(1);

  std::string config, out_dir, data, val_dir, checkpoint, scene, pred, csv;
  std::size_t num_scenes = 0, scale = 8;
  std::uint64_t seed_value = 0, eval_seed = 0;
  double dropout = 0.0;
  bool no_radar = false;

  auto* gen = app.add_subcommand("gen", "Generate a synthetic dataset");
  gen->add_option("--config", config, "Config file (key=value)")->check(CLI::ExistingFile);
  gen->add_option("--out", out_dir, "Output directory")->required();
  gen->add_option("--num-scenes", num_scenes, "Number of scenes")->required();
  auto* seed_opt = gen->add_option("--seed", seed_value, "Dataset seed (default: config seed)");

  auto* tr = app.add_subcommand("train", "Train a model");
  tr->add_option("--config", config, "Config file (key=value)")->check(CLI::ExistingFile);
  tr->add_option("--data", data, "Training dataset directory")->required();
  tr->add_option("--val", val_dir, "Optional validation dataset directory");
  tr->add_option("--out", out_dir, "Run directory for checkpoint and metrics")->required();

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  ev->add_option("--checkpoint", checkpoint, "Checkpoint written by train")->required();
  ev->add_option("--data", data, "Dataset directory")->required();
  ev->add_option("--radar-dropout", dropout, "Per-point radar dropout probability");
  ev->add_flag("--no-radar", no_radar, "Feed an empty radar cloud");
  ev->add_option("--seed", eval_seed, "Seed for radar dropout");
  ev->add_option("--out", csv, "Per-scene CSV (default: eval.csv beside the checkpoint)");

  auto* inf = app.add_subcommand("infer", "Predict one scene");
  inf->add_option("--checkpoint", checkpoint, "Checkpoint written by train")->required();
  inf->add_option("--scene", scene, "Scene file")->required();
  inf->add_option("--out", out_dir, "Output directory")->required();

  auto* rd = app.add_subcommand("render", "Draw a prediction overlay");
  rd->add_option("--scene", scene, "Scene file")->required();
  rd->add_option("--pred", pred, "pred.pgm written by infer")->required();
  rd->add_option("--out", out_dir, "Output PPM image")->required();
  rd->add_option("--scale", scale, "Pixels per grid cell");

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (gen->parsed()) {
      std::optional<std::uint64_t> seed;
      if (seed_opt->count()) seed = seed_value;
      detail::gen(config, out_dir, num_scenes, seed, out);
    } else if (tr->parsed()) {
      detail::train(config, data, val_dir, out_dir, out);
    } else if (ev->parsed()) {
      if (csv.empty()) csv = (std::filesystem::path(checkpoint).parent_path() / "eval.csv").string();
      detail::eval(checkpoint, data, dropout, no_radar, eval_seed, csv, out);
    } else if (inf->parsed()) {
      detail::infer(checkpoint, scene, out_dir, out);
    } else if (rd->parsed()) {
      detail::render(scene, pred, out_dir, scale, out);
    }
  } catch (const synth::ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace bevfuse::cli
