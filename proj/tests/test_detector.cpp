#include <gtest/gtest.h>

#include "iff/detector.hpp"
#include "oracles.hpp"

using namespace iff;

namespace {

Detection det(double x, double y, double w, double score, ShapeClass cls = ShapeClass::Disc) {
  return Detection{Box{x, y, w, w}, cls, score};
}

std::vector<Detection> random_dets(Rng& rng, std::size_t n, bool coarse_scores) {
  std::vector<Detection> out;
  for (std::size_t i = 0; i < n; ++i) {
    const double score = coarse_scores ? double(rng.uniform_int(1, 4)) / 4.0 : rng.uniform();
    out.push_back(det(rng.uniform(0, 30), rng.uniform(0, 30), rng.uniform(6, 18), score,
                      rng.uniform_int(0, 1) ? ShapeClass::Square : ShapeClass::Disc));
  }
  return out;
}

}  // namespace

TEST(Model, LayoutAndOverhead) {
  const auto m = DetectorModel::initialize(1, IffConfig{});
  EXPECT_EQ(m.params.get(param::kFeedbackW).shape(), (Shape{16, 7, 1, 1}));
  EXPECT_EQ(m.feedback_parameter_count(), 112u);
  EXPECT_LT(50 * m.feedback_parameter_count(), m.params.parameter_count());
  for (double v : m.params.get(param::kFeedbackW).data()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(m.params.get(param::kHeadB)[head_layout::kObj], -3.0);
}

TEST(Model, WideFeedbackKernelBreaksBudget) {
  IffConfig cfg;
  cfg.feedback_kernel = 3;
  EXPECT_THROW(DetectorModel::zeros(cfg), std::logic_error);
}

TEST(Model, InitializationIsSeeded) {
  EXPECT_EQ(DetectorModel::initialize(3, {}).params, DetectorModel::initialize(3, {}).params);
  EXPECT_FALSE(DetectorModel::initialize(3, {}).params == DetectorModel::initialize(4, {}).params);
}

TEST(Forward, ShapesAndZeroModel) {
  const auto m = DetectorModel::zeros(IffConfig{});
  const auto scene = gen_scene(1);
  EXPECT_EQ(backbone_forward(m, scene.image).shape(), (Shape{16, 12, 12}));
  const auto traj = detector_forward(m, scene.image, m.config);
  EXPECT_EQ(traj.final_output().shape(), (Shape{7, 12, 12}));
  // every cell scores sigmoid(0) * 1/2 = 0.25
  EXPECT_TRUE(detect(m, scene.image, m.config).empty());
  EXPECT_EQ(decode(traj.final_output(), 0.25).size(), 144u);
  EXPECT_THROW(backbone_forward(m, Tensor({1, 32, 32})), std::invalid_argument);
}

TEST(Forward, ZeroFeedbackMakesIterationsIrrelevant) {
  const auto m = DetectorModel::initialize(2, IffConfig{});
  const auto img = gen_scene(5).image;
  IffConfig c0, c3;
  c0.iterations = 0;
  c3.iterations = 3;
  EXPECT_EQ(detector_forward(m, img, c0).final_output(), detector_forward(m, img, c3).final_output());
}

TEST(Decode, ConstructedCell) {
  Tensor y({7, 12, 12}, 0.0);
  for (std::size_t i = 0; i < 144; ++i) y[i] = -20.0;  // objectness off
  y.at(head_layout::kObj, 3, 5) = 20.0;
  y.at(head_layout::kCls + 1, 3, 5) = 20.0;
  y.at(head_layout::kDw, 3, 5) = std::log(0.5);
  const auto d = decode(y, 0.5);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d[0].cls, ShapeClass::Square);
  EXPECT_NEAR(d[0].score, 1.0, 1e-8);
  EXPECT_NEAR(d[0].box.cx(), (5 + 0.5) * 4, 1e-12);
  EXPECT_NEAR(d[0].box.cy(), (3 + 0.5) * 4, 1e-12);
  EXPECT_NEAR(d[0].box.w, 8.0, 1e-12);
  EXPECT_NEAR(d[0].box.h, 16.0, 1e-12);
}

TEST(Targets, OneCellPerObject) {
  const SceneObject o{ShapeClass::Square, Box{10, 20, 12, 12}};
  const auto t = make_targets({o});
  // centre (16, 26) -> cell (row 6, col 4)
  double total = 0.0;
  for (double v : t.objectness.data()) total += v;
  EXPECT_EQ(total, 1.0);
  EXPECT_EQ(t.objectness.at(0, 6, 4), 1.0);
  EXPECT_DOUBLE_EQ(t.offsets.at(0, 6, 4), 0.0);
  EXPECT_DOUBLE_EQ(t.offsets.at(1, 6, 4), 0.5);
  EXPECT_DOUBLE_EQ(t.log_extent.at(0, 6, 4), std::log(12.0 / 16.0));
  EXPECT_EQ(t.labels[6 * 12 + 4], 1u);
}

TEST(Nms, Examples) {
  EXPECT_TRUE(nms({}, 0.5).empty());
  const auto overlapping = nms({det(0, 0, 10, 0.6), det(1, 0, 10, 0.9)}, 0.5);
  ASSERT_EQ(overlapping.size(), 1u);
  EXPECT_EQ(overlapping[0].score, 0.9);
  EXPECT_EQ(nms({det(0, 0, 10, 0.6), det(1, 0, 10, 0.9, ShapeClass::Square)}, 0.5).size(), 2u);
  EXPECT_EQ(nms({det(0, 0, 10, 0.6), det(30, 30, 10, 0.9)}, 0.5).size(), 2u);
  EXPECT_THROW(nms({}, 1.0), std::invalid_argument);
}

TEST(Nms, ChainSuppressionIsGreedy) {
  // b overlaps a and c; a wins, b goes, so c survives
  const auto kept = nms({det(0, 0, 10, 0.9), det(4, 0, 10, 0.8), det(8, 0, 10, 0.7)}, 0.3);
  ASSERT_EQ(kept.size(), 2u);
  EXPECT_EQ(kept[1].score, 0.7);
}

TEST(Nms, AgreesWithExhaustiveFixedPoint) {
  Rng rng(9);
  for (int t = 0; t < 300; ++t) {
    const auto dets = random_dets(rng, std::size_t(rng.uniform_int(1, 9)), t % 2 == 0);
    const double thr = rng.uniform(0.1, 0.9);
    const auto want = oracle::exhaustive_nms(dets, thr);
    ASSERT_TRUE(want.has_value());
    const auto got = nms(dets, thr);
    ASSERT_EQ(got.size(), want->size());
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_EQ(got[i], dets[(*want)[i]]);
  }
}

TEST(Nms, IdempotentAndScaleInvariant) {
  Rng rng(10);
  for (int t = 0; t < 50; ++t) {
    auto dets = random_dets(rng, 50, false);
    const auto once = nms(dets, 0.5);
    EXPECT_EQ(nms(once, 0.5), once);
    for (auto& d : dets) d.score *= 0.37;
    const auto rescaled = nms(dets, 0.5);
    ASSERT_EQ(rescaled.size(), once.size());
    for (std::size_t i = 0; i < once.size(); ++i) EXPECT_EQ(rescaled[i].box, once[i].box);
    for (std::size_t i = 0; i < once.size(); ++i)
      for (std::size_t j = 0; j < i; ++j)
        if (once[i].cls == once[j].cls) {
          EXPECT_LT(iou(once[i].box, once[j].box), 0.5);
        }
  }
}

TEST(Nms, IdenticalBoxesCollapse) {
  std::vector<Detection> dets(5, det(3, 3, 10, 0.8));
  EXPECT_EQ(nms(dets, 0.5).size(), 1u);
}

TEST(Loss, MatchesRecordedValueAndIsPositive) {
  const auto m = DetectorModel::initialize(4, IffConfig{});
  const auto scene = gen_scene(11);
  const auto targets = make_targets(scene.objects);
  const auto lg = detector_loss_and_grad(m.params, m.config, scene.image, targets);
  EXPECT_GT(lg.loss, 0.0);
  EXPECT_DOUBLE_EQ(lg.loss, detector_loss(m.params, m.config, scene.image, targets));
  EXPECT_EQ(lg.grads.size(), m.params.size());
}
