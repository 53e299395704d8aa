#pragma once

#include <array>
#include <chrono>

#include "iff/metrics.hpp"
#include "iff/parallel.hpp"

namespace iff {

/// Score threshold used when collecting detections for mAP; the PR curve needs low-score detections too.
inline constexpr double kEvalScoreThresh = 0.01;

inline std::vector<std::vector<Detection>> run_detection(const DetectorModel& m, const std::vector<SyntheticScene>& scenes,
                                                         const IffConfig& cfg, const DetectOptions& opt) {
  std::vector<std::vector<Detection>> out(scenes.size());
  parallel_for(scenes.size(), [&](std::size_t i) { out[i] = detect(m, scenes[i].image, cfg, opt); });
  return out;
}

inline double evaluate_map(const DetectorModel& m, const std::vector<SyntheticScene>& scenes, const IffConfig& cfg) {
  std::vector<std::vector<SceneObject>> gts;
  gts.reserve(scenes.size());
  for (const auto& s : scenes) gts.push_back(s.objects);
  return eval_map(run_detection(m, scenes, cfg, {kEvalScoreThresh, 0.5}), gts);
}

enum class LrSchedule { Constant, Cosine };

struct TrainConfig {
  std::uint32_t epochs = 10;
  double lr = 0.005;
  double momentum = 0.9;
  std::size_t batch_size = 16;
  std::uint64_t seed = 1;
  LrSchedule schedule = LrSchedule::Cosine;
  std::size_t map_subset = 64;  ///< scenes used for the per-epoch mAP estimate
  double early_stop_tol = 1e-4;
  std::uint32_t early_stop_window = 5;
  double grad_clip = 10.0;  ///< global gradient-norm cap per step; 0 disables
};

struct EpochStat {
  std::uint32_t epoch = 0;  ///< 0 is the untrained model
  double loss = 0.0;        ///< mean per-image loss
  double map_estimate = 0.0;
};

struct TrainResult {
  DetectorModel model;
  std::vector<EpochStat> curve;
  bool early_stopped = false;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline double mean_loss(const DetectorModel& m, const std::vector<SyntheticScene>& scenes,
                        const std::vector<DetectionTargets>& targets) {
  std::vector<double> losses(scenes.size());
  parallel_for(scenes.size(), [&](std::size_t i) {
    losses[i] = detector_loss(m.params, m.config, scenes[i].image, targets[i]);
  });
  double s = 0.0;
  for (double l : losses) s += l;
  return scenes.empty() ? 0.0 : s / double(scenes.size());
}

/// Mini-batch SGD over the unrolled feedback loop. The loss is taken on y^[M_I] only.
inline TrainResult train(DetectorModel model, const std::vector<SyntheticScene>& scenes, const TrainConfig& tc) {
  if (scenes.empty()) throw std::invalid_argument("train: empty dataset");
  if (tc.batch_size == 0) throw std::invalid_argument("train: batch_size must be positive");
  model.config.validate();
  std::vector<DetectionTargets> targets;
  targets.reserve(scenes.size());
  for (const auto& s : scenes) targets.push_back(make_targets(s.objects));
  const std::vector<SyntheticScene> probe(scenes.begin(), scenes.begin() + std::ptrdiff_t(std::min(tc.map_subset, scenes.size())));

  TrainResult res;
  res.curve.push_back({0, mean_loss(model, scenes, targets), evaluate_map(model, probe, model.config)});

  SgdMomentum opt(tc.lr, tc.momentum);
  std::vector<std::size_t> order(scenes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t steps_per_epoch = (scenes.size() + tc.batch_size - 1) / tc.batch_size;
  const double total_steps = double(steps_per_epoch) * tc.epochs;
  std::size_t step = 0;

  for (std::uint32_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    Rng shuffle(tc.seed * 0x100000001b3ULL + epoch);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[std::size_t(shuffle.uniform_int(0, std::int64_t(i) - 1))]);

    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < order.size(); b += tc.batch_size, ++step) {
      const std::size_t n = std::min(tc.batch_size, order.size() - b);
      std::vector<LossAndGrad> parts(n);
      try {
        parallel_for(n, [&](std::size_t i) {
          const std::size_t idx = order[b + i];
          parts[i] = detector_loss_and_grad(model.params, model.config, scenes[idx].image, targets[idx]);
        });
      } catch (const std::domain_error& e) {
        throw TrainingDiverged("train: non-finite activations at epoch " + std::to_string(epoch) + ", step " +
                               std::to_string(step) + " (" + e.what() + "); lower --lr");
      }
      ModelParams grads = model.params.zeros_like();
      double batch_loss = 0.0;
      for (const auto& p : parts) {
        batch_loss += p.loss;
        for (const auto& [name, g] : p.grads.entries()) {
          Tensor acc = grads.get(name);
          for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += g[k] / double(n);
          grads.set(name, std::move(acc));
        }
      }
      if (!std::isfinite(batch_loss))
        throw TrainingDiverged("train: loss became non-finite at epoch " + std::to_string(epoch) + ", step " +
                               std::to_string(step) + "; lower --lr");
      epoch_loss += batch_loss;
      if (tc.grad_clip > 0.0) {
        double sq = 0.0;
        for (const auto& [_, g] : grads.entries())
          for (double v : g.data()) sq += v * v;
        const double norm = std::sqrt(sq);
        if (norm > tc.grad_clip)
          for (const auto& [name, g] : grads.entries()) grads.set(name, scaled(g, tc.grad_clip / norm));
      }
      if (tc.schedule == LrSchedule::Cosine)
        opt.set_lr(tc.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * double(step) / total_steps)));
      opt.step(model.params, grads);
    }
    res.curve.push_back({epoch, epoch_loss / double(scenes.size()), evaluate_map(model, probe, model.config)});

    const std::size_t w = tc.early_stop_window;
    if (w > 0 && res.curve.size() > w + 1) {
      const double prev = res.curve[res.curve.size() - 1 - w].loss;
      if (std::abs(res.curve.back().loss - prev) < tc.early_stop_tol * std::abs(prev)) {
        res.early_stopped = true;
        break;
      }
    }
  }
  res.model = std::move(model);
  return res;
}

struct SweepRow {
  std::uint32_t iterations = 0;
  double test_map = 0.0;
  double final_loss = 0.0;
  std::uint32_t epochs_run = 0;
};

/// Trains one detector per M_I from the same initialisation seed and evaluates each on `test`.
inline std::vector<SweepRow> sweep_mi(const std::vector<SyntheticScene>& train_set, const std::vector<SyntheticScene>& test,
                                      const std::vector<std::uint32_t>& mi_list, const TrainConfig& tc,
                                      IffConfig base = {}) {
  if (mi_list.empty()) throw std::invalid_argument("sweep_mi: empty M_I list");
  std::vector<SweepRow> rows;
  for (auto mi : mi_list) {
    base.iterations = mi;
    auto res = train(DetectorModel::initialize(tc.seed, base), train_set, tc);
    rows.push_back({mi, evaluate_map(res.model, test, res.model.config), res.curve.back().loss,
                    res.curve.back().epoch});
  }
  return rows;
}

/// Mean per-image detect() latency for each M_I in `iterations`, in seconds. Settings are
/// interleaved per image so drift affects them alike; the best of `repeats` passes is kept.
inline std::vector<double> measure_latency(const DetectorModel& m, const std::vector<Tensor>& images, const IffConfig& cfg,
                                           const std::vector<std::uint32_t>& iterations, int repeats = 3) {
  using clock = std::chrono::steady_clock;
  std::vector<double> best(iterations.size(), 1e300);
  std::size_t sink = 0;
  for (int rep = 0; rep < repeats; ++rep) {
    std::vector<double> total(iterations.size(), 0.0);
    for (const auto& img : images)
      for (std::size_t k = 0; k < iterations.size(); ++k) {
        IffConfig c = cfg;
        c.iterations = iterations[k];
        const auto t0 = clock::now();
        sink += detect(m, img, c).size();
        total[k] += std::chrono::duration<double>(clock::now() - t0).count();
      }
    for (std::size_t k = 0; k < total.size(); ++k) best[k] = std::min(best[k], total[k] / double(images.size()));
  }
  if (sink == std::size_t(-1)) best[0] += 0.0;
  return best;
}

struct TimingReport {
  double latency_mi0 = 0.0;  ///< seconds per image
  double latency_mi1 = 0.0;
  double latency_mi2 = 0.0;
  double ratio() const { return latency_mi1 / latency_mi0; }
};

/// Latency at M_I = 0, 1, 2 over at least 100 images.
inline TimingReport timing_probe(const DetectorModel& m, const std::vector<Tensor>& images, const IffConfig& cfg,
                                 int repeats = 3) {
  if (images.size() < 100) throw std::invalid_argument("timing_probe: needs at least 100 images");
  auto t = measure_latency(m, images, cfg, {0, 1, 2}, repeats);
  return {t[0], t[1], t[2]};
}

}  // namespace iff
