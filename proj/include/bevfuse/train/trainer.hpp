#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "bevfuse/train/augment.hpp"
#include "bevfuse/train/losses.hpp"
#include "bevfuse/train/metrics.hpp"
#include "bevfuse/train/optim.hpp"

namespace bevfuse::train {

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t effective_batch = 4;  // samples per optimizer update
  double peak_lr = 3e-4;
  double weight_decay = 0.01;
  std::size_t warmup_epochs = 1;
  std::uint64_t seed = 0;
  LossWeights loss;
  AugmentConfig augment;
  /// Probability of feeding an empty radar cloud to a training sample.
  double radar_modality_dropout = 0.0;
  bool shuffle = true;
  /// Validate every n epochs (and always after the last); 0 = last only.
  std::size_t eval_every = 1;
  fusion::ModelConfig model;

  void validate() const {
    if (epochs == 0 || effective_batch == 0) throw std::invalid_argument("train: epochs and batch must be positive");
    if (!(peak_lr > 0) || weight_decay < 0) throw std::invalid_argument("train: bad learning rate or weight decay");
    if (warmup_epochs > epochs) throw std::invalid_argument("train: warmup longer than training");
    if (radar_modality_dropout < 0 || radar_modality_dropout > 1) {
      throw std::invalid_argument("train: radar_modality_dropout must lie in [0, 1]");
    }
    loss.validate();
  }
};

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Independent stream per (seed, sample, epoch, purpose).
inline std::mt19937_64 sample_rng(std::uint64_t seed, std::uint64_t index, std::uint64_t epoch,
                                  std::uint64_t purpose = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(purpose)};
  return std::mt19937_64(seq);
}

inline LossTerms forward_loss(Graph& g, const fusion::BevFusionModel& model, const Sample& s,
                              const LossWeights& w) {
  fusion::ModelOutput out = model.forward(g, s.input);
  return total_loss(out.logits, out.aux, training_target(s.target, s.ignore),
                    training_target(s.aux_target, s.aux_ignore), w);
}

struct MetricRow {
  std::size_t epoch = 0;
  std::size_t step = 0;  // optimizer updates completed
  double lr = 0.0;       // last learning rate applied
  double train_loss = 0.0;
  double val_iou = std::numeric_limits<double>::quiet_NaN();
};

inline std::string csv_header() { return "epoch,step,lr,train_loss,val_iou\n"; }

inline std::string format_row(const MetricRow& r) {
  auto num = [](double v) {
    if (std::isnan(v)) return std::string("nan");
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  return std::to_string(r.epoch) + "," + std::to_string(r.step) + "," + num(r.lr) + "," +
         num(r.train_loss) + "," + num(r.val_iou) + "\n";
}

/// Append-only metric log.
class MetricLog {
 public:
  explicit MetricLog(const std::string& path) : os_(path, std::ios::trunc) {
    if (!os_) throw std::runtime_error("cannot open metric log '" + path + "'");
    os_ << csv_header();
    os_.flush();
  }
  void append(const MetricRow& r) {
    os_ << format_row(r);
    os_.flush();
  }

 private:
  std::ofstream os_;
};

struct EvalOptions {
  double radar_dropout = 0.0;  // per-point removal probability
  bool no_radar = false;       // feed an empty cloud
  std::uint64_t seed = 0;
  double threshold = kIouThreshold;
};

struct SceneScore {
  double iou = 0.0;
  std::uint64_t intersection = 0, union_count = 0;
  bool finite = true;
};

struct EvalResult {
  double iou = 0.0;
  bool all_finite = true;
  std::vector<SceneScore> scenes;
};

inline fusion::SceneInput degrade_radar(const fusion::SceneInput& in, const EvalOptions& opt,
                                        std::uint64_t index) {
  fusion::SceneInput out = in;
  if (opt.no_radar || opt.radar_dropout >= 1.0) {
    out.cloud.points.clear();
  } else if (opt.radar_dropout > 0.0) {
    auto rng = sample_rng(opt.seed, index, 0, 0xD40F);
    std::bernoulli_distribution drop(opt.radar_dropout);
    std::erase_if(out.cloud.points, [&](const radar::RadarPoint&) { return drop(rng); });
  }
  return out;
}

inline EvalResult evaluate(const fusion::BevFusionModel& model, const diff::ParameterStore& ps,
                           const std::vector<Sample>& samples, const EvalOptions& opt = {}) {
  if (opt.radar_dropout < 0 || opt.radar_dropout > 1) {
    throw std::invalid_argument("eval: radar dropout must lie in [0, 1]");
  }
  EvalResult res;
  IouAccumulator total(opt.threshold);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    Graph g(&ps, false);
    const Sample& s = samples[i];
    const Tensor& logits = model.forward(g, degrade_radar(s.input, opt, i)).logits.value();
    SceneScore sc;
    sc.finite = logits.all_finite();
    IouAccumulator one(opt.threshold);
    one.add(logits, s.target, &s.ignore);
    total.add(logits, s.target, &s.ignore);
    sc.iou = one.value();
    sc.intersection = one.intersection();
    sc.union_count = one.union_count();
    res.all_finite = res.all_finite && sc.finite;
    res.scenes.push_back(sc);
  }
  res.iou = total.value();
  return res;
}

struct TrainHooks {
  std::function<void(const MetricRow&)> on_epoch;
  std::function<void(std::size_t step, double loss)> on_step;
};

/// Runs the full schedule in place on `ps` and returns one row per epoch.
inline std::vector<MetricRow> train_loop(const TrainConfig& cfg, const fusion::BevFusionModel& model,
                                         diff::ParameterStore& ps, const std::vector<Sample>& train,
                                         const std::vector<Sample>* val = nullptr,
                                         const TrainHooks& hooks = {}) {
  cfg.validate();
  if (train.empty()) throw std::invalid_argument("train: dataset is empty");
  const std::size_t n = train.size();
  const std::size_t per_epoch = (n + cfg.effective_batch - 1) / cfg.effective_batch;
  const OneCycleSchedule sched{cfg.peak_lr, std::max<std::size_t>(1, cfg.warmup_epochs * per_epoch),
                               cfg.epochs * per_epoch};
  AdamW opt({0.9, 0.999, 1e-8, cfg.weight_decay});
  std::vector<MetricRow> rows;
  std::size_t step = 0;
  double lr = 0.0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    if (cfg.shuffle) {
      auto rng = sample_rng(cfg.seed, ~std::uint64_t{0}, epoch, 0x5F);
      std::shuffle(order.begin(), order.end(), rng);
    }
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      const std::size_t lo = b * cfg.effective_batch, hi = std::min(n, lo + cfg.effective_batch);
      diff::GradMap grads;
      double batch_loss = 0.0;
      for (std::size_t k = lo; k < hi; ++k) {
        const std::size_t idx = order[k];
        auto rng = sample_rng(cfg.seed, idx, epoch);
        Sample s = train[idx];
        if (cfg.augment.enabled) {
          s = augment_sample(s, draw_augmentation(cfg.augment, s.input.images.size(), rng),
                             cfg.model.internal, cfg.model.output);
        }
        if (cfg.radar_modality_dropout > 0.0 &&
            std::bernoulli_distribution(cfg.radar_modality_dropout)(rng)) {
          s.input.cloud.points.clear();
        }
        Graph g(&ps, true);
        LossTerms L = forward_loss(g, model, s, cfg.loss);
        const double v = L.total.value()[0];
        if (!std::isfinite(v)) {
          std::ostringstream msg;
          msg << "non-finite loss at epoch " << epoch << ", step " << step << ", sample " << idx
              << " (bce " << L.bce << ", aux " << L.aux << ", dice " << L.dice << ")";
          throw NonFiniteLoss(msg.str());
        }
        g.backward(L.total);
        diff::accumulate(grads, g.param_grads(), 1.0 / static_cast<double>(hi - lo));
        batch_loss += v;
        loss_sum += v;
      }
      lr = sched(step);
      opt.step(ps, grads, lr);
      ++step;
      if (hooks.on_step) hooks.on_step(step, batch_loss / static_cast<double>(hi - lo));
    }
    MetricRow row;
    row.epoch = epoch + 1;
    row.step = step;
    row.lr = lr;
    row.train_loss = loss_sum / static_cast<double>(n);
    const bool last = epoch + 1 == cfg.epochs;
    const bool due = cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0;
    if (val && !val->empty() && (last || due)) row.val_iou = evaluate(model, ps, *val).iou;
    rows.push_back(row);
    if (hooks.on_epoch) hooks.on_epoch(row);
  }
  return rows;
}

}  // namespace bevfuse::train
