#include <gtest/gtest.h>

#include "iff/analysis.hpp"
#include "iff/train.hpp"

using namespace iff;

namespace {

TrainConfig quick(std::uint32_t epochs) {
  TrainConfig tc;
  tc.epochs = epochs;
  tc.map_subset = 8;
  tc.early_stop_window = 0;
  return tc;
}

DetectorModel model(std::uint32_t mi, std::uint64_t seed = 1) {
  IffConfig cfg;
  cfg.iterations = mi;
  return DetectorModel::initialize(seed, cfg);
}

// A detector trained once for the tests that need sensible predictions.
const DetectorModel& trained() {
  static const DetectorModel m = [] {
    TrainConfig tc = quick(12);
    tc.lr = 0.01;
    return train(model(1), gen_dataset(600, 21, 0.1), tc).model;
  }();
  return m;
}

}  // namespace

TEST(Train, ZeroLearningRateLeavesParameters) {
  const auto data = gen_dataset(20, 2, 0.25);
  TrainConfig tc = quick(2);
  tc.lr = 0.0;
  const auto m = model(1);
  EXPECT_EQ(train(m, data, tc).model.params, m.params);
}

TEST(Train, OpenLoopNeverTouchesFeedback) {
  const auto res = train(model(0), gen_dataset(32, 3, 0.25), quick(2));
  for (double v : res.model.params.get(param::kFeedbackW).data()) EXPECT_EQ(v, 0.0);
}

TEST(Train, ClosedLoopLearnsFeedback) {
  const auto res = train(model(2), gen_dataset(32, 3, 0.25), quick(2));
  double s = 0.0;
  for (double v : res.model.params.get(param::kFeedbackW).data()) s += std::abs(v);
  EXPECT_GT(s, 0.0);
}

TEST(Train, LossHalvesOnSmallSet) {
  const auto res = train(model(1), gen_dataset(64, 4, 0.25), quick(30));
  ASSERT_EQ(res.curve.size(), 31u);
  EXPECT_LE(res.curve.back().loss, 0.5 * res.curve.front().loss);
  for (const auto& e : res.curve) {
    EXPECT_GE(e.map_estimate, 0.0);
    EXPECT_LE(e.map_estimate, 1.0);
  }
}

TEST(Train, Deterministic) {
  const auto data = gen_dataset(40, 5, 0.25);
  const auto a = train(model(1), data, quick(2)), b = train(model(1), data, quick(2));
  EXPECT_EQ(a.model.params, b.model.params);
  EXPECT_EQ(a.curve.back().loss, b.curve.back().loss);
}

TEST(Train, EarlyStopOnFlatLoss) {
  TrainConfig tc = quick(20);
  tc.lr = 0.0;
  tc.early_stop_window = 5;
  const auto res = train(model(1), gen_dataset(10, 6, 0.25), tc);
  EXPECT_TRUE(res.early_stopped);
  EXPECT_EQ(res.curve.back().epoch, 6u);
}

TEST(Train, HugeLearningRateDiverges) {
  TrainConfig tc = quick(3);
  tc.lr = 1e300;
  EXPECT_THROW(train(model(1), gen_dataset(32, 7, 0.25), tc), TrainingDiverged);
}

TEST(Train, RejectsBadInput) {
  EXPECT_THROW(train(model(1), {}, quick(1)), std::invalid_argument);
  TrainConfig tc = quick(1);
  tc.batch_size = 0;
  EXPECT_THROW(train(model(1), gen_dataset(4, 1, 0.25), tc), std::invalid_argument);
}

TEST(Sweep, OneRowPerSetting) {
  const auto data = gen_dataset(24, 8, 0.25);
  const auto rows = sweep_mi(data, data, {0, 2}, quick(1));
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].iterations, 0u);
  EXPECT_EQ(rows[1].iterations, 2u);
  EXPECT_EQ(rows[1].epochs_run, 1u);
  EXPECT_THROW(sweep_mi(data, data, {}, quick(1)), std::invalid_argument);
}

TEST(Timing, NeedsHundredImages) {
  std::vector<Tensor> images(99, Tensor({1, 48, 48}));
  EXPECT_THROW(timing_probe(model(1), images, IffConfig{}), std::invalid_argument);
}

TEST(Timing, LatencyGrowsWithIterations) {
  std::vector<Tensor> images;
  for (const auto& s : gen_dataset(40, 9, 0.25)) images.push_back(s.image);
  const auto same = measure_latency(model(0), images, IffConfig{}, {0, 0}, 3);
  EXPECT_NEAR(same[1] / same[0], 1.0, 0.5);
  const auto t = measure_latency(model(1), images, IffConfig{}, {0, 10, 40}, 2);
  EXPECT_LT(t[0], t[1] * 1.1);
  EXPECT_LT(t[1], t[2] * 1.1);
}

TEST(Trained, FindsSingleDisc) {
  const SceneObject disc{ShapeClass::Disc, Box{16, 16, 16, 16}};
  const Tensor img = render_scene({disc}, 0.1, 5);
  const auto dets = detect(trained(), img, trained().config, {0.3, 0.5});
  ASSERT_FALSE(dets.empty());
  EXPECT_GE(iou(dets.front().box, disc.box), 0.5);
  EXPECT_EQ(dets.front().cls, ShapeClass::Disc);
}

TEST(Trained, HeatmapPeaksInsideObject) {
  const SceneObject sq{ShapeClass::Square, Box{8, 24, 16, 16}};
  const Tensor img = render_scene({sq}, 0.1, 6);
  const auto traj = detector_forward(trained(), img, trained().config);
  const auto heat = heatmap_export(traj.final_feature(), 48, 48);
  std::size_t best = 0;
  for (std::size_t i = 1; i < heat.pixels.size(); ++i)
    if (heat.pixels[i] > heat.pixels[best]) best = i;
  const double r = double(best / 48) + 0.5, c = double(best % 48) + 0.5;
  EXPECT_TRUE(c >= sq.box.x - 4 && c <= sq.box.x + sq.box.w + 4 && r >= sq.box.y - 4 && r <= sq.box.y + sq.box.h + 4)
      << "peak at " << r << "," << c;
}

TEST(Trained, EvaluatesReasonably) {
  const auto test = gen_dataset(100, 22, 0.1);
  EXPECT_GT(evaluate_map(trained(), test, trained().config), 0.5);
}
