#pragma once

#include "iff/autograd.hpp"
#include "iff/feedback.hpp"
#include "iff/scene.hpp"

namespace iff {

/// Channel layout of the head output y: objectness, dx, dy, tw, th, class logits.
namespace head_layout {
inline constexpr std::size_t kObj = 0;
inline constexpr std::size_t kDx = 1;
inline constexpr std::size_t kDw = 3;
inline constexpr std::size_t kCls = 5;
inline constexpr std::size_t kChannels = 5 + kNumClasses;
}  // namespace head_layout

inline constexpr std::size_t kImageSize = 48;
inline constexpr std::size_t kGrid = 12;
inline constexpr std::size_t kCell = kImageSize / kGrid;
inline constexpr double kPrior = 16.0;
inline constexpr std::size_t kFeatureChannels = 16;

namespace param {
inline const std::string kConv1W = "backbone.conv1.weight";
inline const std::string kConv1B = "backbone.conv1.bias";
inline const std::string kConv2W = "backbone.conv2.weight";
inline const std::string kConv2B = "backbone.conv2.bias";
inline const std::string kConv3W = "backbone.conv3.weight";
inline const std::string kConv3B = "backbone.conv3.bias";
inline const std::string kHeadW = "head.weight";
inline const std::string kHeadB = "head.bias";
inline const std::string kFeedbackW = "feedback.weight";
}  // namespace param

/// Tiny single-scale detector:
///   image [1,48,48] -> conv3x3(8) -> pool -> conv3x3(16) -> pool -> conv5x5(16) = x^[0] [16,12,12]
///   head w1: 16 -> 7 (3x3, bias);  feedback w2: 7 -> 16 (k x k, no bias, zero-initialised)
struct DetectorModel {
  ModelParams params;
  IffConfig config;

  static ModelParams layout(std::size_t feedback_kernel) {
    ModelParams p;
    p.add(param::kConv1W, Tensor::zeros({8, 1, 3, 3}));
    p.add(param::kConv1B, Tensor::zeros({8}));
    p.add(param::kConv2W, Tensor::zeros({16, 8, 3, 3}));
    p.add(param::kConv2B, Tensor::zeros({16}));
    p.add(param::kConv3W, Tensor::zeros({kFeatureChannels, 16, 5, 5}));
    p.add(param::kConv3B, Tensor::zeros({kFeatureChannels}));
    p.add(param::kHeadW, Tensor::zeros({head_layout::kChannels, kFeatureChannels, 3, 3}));
    p.add(param::kHeadB, Tensor::zeros({head_layout::kChannels}));
    p.add(param::kFeedbackW, Tensor::zeros({kFeatureChannels, head_layout::kChannels, feedback_kernel, feedback_kernel}));
    return p;
  }

  /// All-zero parameters.
  static DetectorModel zeros(const IffConfig& cfg) {
    cfg.validate();
    DetectorModel m{layout(cfg.feedback_kernel), cfg};
    m.check_overhead();
    return m;
  }

  /// He-normal backbone and head; the feedback filter starts at zero.
  static DetectorModel initialize(std::uint64_t seed, const IffConfig& cfg) {
    DetectorModel m = zeros(cfg);
    Rng rng(seed);
    auto fill = [&](const std::string& name, double sd) {
      Tensor t = m.params.get(name);
      for (double& v : t.data()) v = rng.normal(0.0, sd);
      m.params.set(name, std::move(t));
    };
    auto fan_in = [&](const std::string& name) {
      const auto& s = m.params.get(name).shape();
      return double(s[1] * s[2] * s[3]);
    };
    for (const auto* n : {&param::kConv1W, &param::kConv2W, &param::kConv3W})
      fill(*n, std::sqrt(2.0 / fan_in(*n)));
    fill(param::kHeadW, 0.5 * std::sqrt(1.0 / fan_in(param::kHeadW)));
    Tensor hb = m.params.get(param::kHeadB);
    hb[head_layout::kObj] = -3.0;
    m.params.set(param::kHeadB, std::move(hb));
    return m;
  }

  std::size_t feedback_parameter_count() const { return params.get(param::kFeedbackW).size(); }

  void check_overhead() const {
    if (50 * feedback_parameter_count() >= params.parameter_count())
      throw std::logic_error("DetectorModel: feedback filter exceeds 2% of parameters");
  }

  ConvFilter head() const { return ConvFilter(params.get(param::kHeadW), params.get(param::kHeadB)); }
  ConvFilter feedback() const { return ConvFilter(params.get(param::kFeedbackW)); }
};

/// x^[0] for one image.
inline Tensor backbone_forward(const DetectorModel& m, const Tensor& image) {
  if (image.shape() != Shape{1, kImageSize, kImageSize})
    throw std::invalid_argument("backbone_forward: expected image [1,48,48], got " + shape_str(image.shape()));
  const double s = m.config.slope;
  const auto& p = m.params;
  Tensor h = leaky_relu(conv2d(image, ConvFilter(p.get(param::kConv1W), p.get(param::kConv1B))), s);
  h = avg_pool2(h);
  h = leaky_relu(conv2d(h, ConvFilter(p.get(param::kConv2W), p.get(param::kConv2B))), s);
  h = avg_pool2(h);
  return leaky_relu(conv2d(h, ConvFilter(p.get(param::kConv3W), p.get(param::kConv3B))), s);
}

inline IffTrajectory detector_forward(const DetectorModel& m, const Tensor& image, const IffConfig& cfg) {
  return iff_forward(backbone_forward(m, image), m.head(), m.feedback(), cfg);
}

struct Detection {
  Box box;
  ShapeClass cls = ShapeClass::Disc;
  double score = 0.0;
  bool operator==(const Detection&) const = default;
};

/// Decodes every grid cell of y into a detection; keeps those with score >= score_thresh.
inline std::vector<Detection> decode(const Tensor& y, double score_thresh) {
  namespace hl = head_layout;
  if (y.shape() != Shape{hl::kChannels, kGrid, kGrid})
    throw std::invalid_argument("decode: unexpected head output " + shape_str(y.shape()));
  std::vector<Detection> out;
  for (std::size_t r = 0; r < kGrid; ++r)
    for (std::size_t c = 0; c < kGrid; ++c) {
      const double obj = ops::sigmoid(y.at(hl::kObj, r, c));
      double m = y.at(hl::kCls, r, c);
      for (std::size_t k = 1; k < kNumClasses; ++k) m = std::max(m, y.at(hl::kCls + k, r, c));
      double z = 0.0;
      std::size_t best = 0;
      double best_p = -1.0;
      std::vector<double> e(kNumClasses);
      for (std::size_t k = 0; k < kNumClasses; ++k) z += (e[k] = std::exp(y.at(hl::kCls + k, r, c) - m));
      for (std::size_t k = 0; k < kNumClasses; ++k)
        if (e[k] / z > best_p) {
          best_p = e[k] / z;
          best = k;
        }
      Detection d;
      d.score = obj * best_p;
      if (!(d.score >= score_thresh)) continue;
      d.cls = static_cast<ShapeClass>(best);
      const double cx = (double(c) + ops::sigmoid(y.at(hl::kDx, r, c))) * kCell;
      const double cy = (double(r) + ops::sigmoid(y.at(hl::kDx + 1, r, c))) * kCell;
      d.box.w = kPrior * std::exp(std::clamp(y.at(hl::kDw, r, c), -8.0, 8.0));
      d.box.h = kPrior * std::exp(std::clamp(y.at(hl::kDw + 1, r, c), -8.0, 8.0));
      d.box.x = cx - 0.5 * d.box.w;
      d.box.y = cy - 0.5 * d.box.h;
      out.push_back(d);
    }
  return out;
}

/// Greedy same-class suppression in descending score order (ties keep input order).
inline std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh) {
  if (!(iou_thresh > 0.0 && iou_thresh < 1.0)) throw std::invalid_argument("nms: iou_thresh must be in (0,1)");
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<Detection> kept;
  for (const auto& d : dets) {
    bool keep = true;
    for (const auto& k : kept)
      if (k.cls == d.cls && iou(k.box, d.box) >= iou_thresh) {
        keep = false;
        break;
      }
    if (keep) kept.push_back(d);
  }
  return kept;
}

struct DetectOptions {
  double score_thresh = 0.5;
  double nms_iou = 0.5;
};

/// backbone -> feedback loop -> decode y^[M_I] -> NMS
inline std::vector<Detection> detect(const DetectorModel& m, const Tensor& image, const IffConfig& cfg,
                                     const DetectOptions& opt = {}) {
  auto traj = detector_forward(m, image, cfg);
  return nms(decode(traj.final_output(), opt.score_thresh), opt.nms_iou);
}

/// Per-cell regression and classification targets for one scene.
struct DetectionTargets {
  Tensor objectness;     ///< [1,G,G]
  Tensor offsets;        ///< [2,G,G] centre fraction within the cell
  Tensor log_extent;     ///< [2,G,G] log(w / prior), log(h / prior)
  Tensor positive;       ///< [1,G,G] 1 at responsible cells
  Tensor positive2;      ///< [2,G,G] positive mask broadcast to two channels
  Tensor positive_hw;    ///< [G,G]
  std::vector<std::size_t> labels;  ///< per cell
};

inline DetectionTargets make_targets(const std::vector<SceneObject>& objects) {
  DetectionTargets t;
  t.objectness = Tensor({1, kGrid, kGrid});
  t.offsets = Tensor({2, kGrid, kGrid});
  t.log_extent = Tensor({2, kGrid, kGrid});
  t.positive2 = Tensor({2, kGrid, kGrid});
  t.positive_hw = Tensor({kGrid, kGrid});
  t.labels.assign(kGrid * kGrid, 0);
  for (const auto& o : objects) {
    const double gx = o.box.cx() / kCell, gy = o.box.cy() / kCell;
    const auto c = std::min(kGrid - 1, std::size_t(gx));
    const auto r = std::min(kGrid - 1, std::size_t(gy));
    t.objectness.at(0, r, c) = 1.0;
    t.offsets.at(0, r, c) = gx - double(c);
    t.offsets.at(1, r, c) = gy - double(r);
    t.log_extent.at(0, r, c) = std::log(o.box.w / kPrior);
    t.log_extent.at(1, r, c) = std::log(o.box.h / kPrior);
    t.positive2.at(0, r, c) = t.positive2.at(1, r, c) = 1.0;
    t.positive_hw[r * kGrid + c] = 1.0;
    t.labels[r * kGrid + c] = std::size_t(o.cls);
  }
  t.positive = t.objectness;
  return t;
}

inline constexpr double kBoxLossWeight = 5.0;

/// Nodes recorded for one image: parameter leaves, trajectory and loss.
struct DetectorGraph {
  std::vector<std::pair<std::string, Var>> params;
  Var x0;
  std::vector<Var> xs;
  std::vector<Var> ys;
  Var loss;
};

/// Records the closed-loop forward pass and the detection loss on y^[M_I] into tape.
inline DetectorGraph record_detector(GradTape& tape, const ModelParams& params, const IffConfig& cfg,
                                     const Tensor& image, const DetectionTargets& targets) {
  namespace hl = head_layout;
  DetectorGraph g;
  auto P = [&](const std::string& name) {
    for (auto& [n, v] : g.params)
      if (n == name) return v;
    throw std::out_of_range(name);
  };
  for (const auto& [name, value] : params.entries()) g.params.emplace_back(name, tape.leaf(value, true));
  const double s = cfg.slope;
  const PaddingMode zero = PaddingMode::Zero;
  Var h = tape.leaf(image);
  h = ops::leaky_relu(tape, ops::conv2d(tape, h, P(param::kConv1W), P(param::kConv1B), zero), s);
  h = ops::avg_pool2(tape, h);
  h = ops::leaky_relu(tape, ops::conv2d(tape, h, P(param::kConv2W), P(param::kConv2B), zero), s);
  h = ops::avg_pool2(tape, h);
  g.x0 = ops::leaky_relu(tape, ops::conv2d(tape, h, P(param::kConv3W), P(param::kConv3B), zero), s);

  g.xs.push_back(g.x0);
  g.ys.push_back(ops::conv2d(tape, g.x0, P(param::kHeadW), P(param::kHeadB), cfg.pad));
  for (std::uint32_t k = 0; k < cfg.iterations; ++k) {
    Var fb = ops::conv2d(tape, ops::leaky_relu(tape, g.ys.back(), s), P(param::kFeedbackW), std::nullopt, cfg.pad);
    Var x = ops::add(tape, g.x0, fb);
    g.xs.push_back(x);
    g.ys.push_back(ops::conv2d(tape, x, P(param::kHeadW), P(param::kHeadB), cfg.pad));
  }

  const Var y = g.ys.back();
  Var obj = ops::slice_channels(tape, y, hl::kObj, hl::kObj + 1);
  Var off = ops::sigmoid(tape, ops::slice_channels(tape, y, hl::kDx, hl::kDx + 2));
  Var ext = ops::slice_channels(tape, y, hl::kDw, hl::kDw + 2);
  Var cls = ops::slice_channels(tape, y, hl::kCls, hl::kCls + kNumClasses);
  Var l_obj = ops::bce_with_logits(tape, obj, targets.objectness, Tensor::ones({1, kGrid, kGrid}));
  Var l_off = ops::weighted_squared_error(tape, off, targets.offsets, targets.positive2);
  Var l_ext = ops::weighted_squared_error(tape, ext, targets.log_extent, targets.positive2);
  Var l_cls = ops::softmax_cross_entropy(tape, cls, targets.labels, targets.positive_hw);
  Var box = ops::scale(tape, kBoxLossWeight, ops::add(tape, l_off, l_ext));
  g.loss = ops::add(tape, ops::add(tape, l_obj, box), l_cls);
  return g;
}

/// Loss for one image without recording gradients of interest.
inline double detector_loss(const ModelParams& params, const IffConfig& cfg, const Tensor& image,
                            const DetectionTargets& targets) {
  GradTape tape;
  auto g = record_detector(tape, params, cfg, image, targets);
  return tape.value(g.loss)[0];
}

struct LossAndGrad {
  double loss = 0.0;
  ModelParams grads;
};

inline LossAndGrad detector_loss_and_grad(const ModelParams& params, const IffConfig& cfg, const Tensor& image,
                                          const DetectionTargets& targets) {
  GradTape tape;
  auto g = record_detector(tape, params, cfg, image, targets);
  tape.backward(g.loss);
  LossAndGrad out;
  out.loss = tape.value(g.loss)[0];
  for (const auto& [name, v] : g.params) out.grads.add(name, tape.grad(v));
  return out;
}

}  // namespace iff
