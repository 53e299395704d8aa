#pragma once

#include "iff/detector.hpp"

namespace iff {

/// VOC-style average precision with 11-point interpolation over a precision/recall curve.
/// tp flags must be ordered by descending score.
inline double average_precision_11pt(const std::vector<bool>& tp_sorted, std::size_t num_gt) {
  if (num_gt == 0) return 0.0;
  std::vector<double> prec, rec;
  std::size_t tp = 0, fp = 0;
  for (bool t : tp_sorted) {
    (t ? tp : fp) += 1;
    prec.push_back(double(tp) / double(tp + fp));
    rec.push_back(double(tp) / double(num_gt));
  }
  double ap = 0.0;
  for (int i = 0; i <= 10; ++i) {
    const double thr = i / 10.0;
    double best = 0.0;
    for (std::size_t k = 0; k < prec.size(); ++k)
      if (rec[k] >= thr - 1e-12) best = std::max(best, prec[k]);
    ap += best / 11.0;
  }
  return ap;
}

struct MapResult {
  double map = 0.0;
  std::vector<double> per_class_ap;  ///< NaN for classes without ground truth
};

/// Per-class AP with greedy matching at IoU >= iou_thresh (each ground truth matched at most once,
/// detections visited in descending score), averaged over classes that have ground truth.
inline MapResult eval_map_detailed(const std::vector<std::vector<Detection>>& dets,
                                   const std::vector<std::vector<SceneObject>>& gts, double iou_thresh = 0.5) {
  if (dets.size() != gts.size()) throw std::invalid_argument("eval_map: detections and ground truth differ in image count");
  MapResult res;
  double sum = 0.0;
  std::size_t classes_with_gt = 0;
  for (std::size_t k = 0; k < kNumClasses; ++k) {
    const auto cls = static_cast<ShapeClass>(k);
    struct Entry {
      double score;
      std::size_t image;
      Box box;
    };
    std::vector<Entry> entries;
    std::size_t num_gt = 0;
    std::vector<std::vector<bool>> used(gts.size());
    for (std::size_t i = 0; i < gts.size(); ++i) {
      used[i].assign(gts[i].size(), false);
      for (const auto& g : gts[i]) num_gt += g.cls == cls;
      for (const auto& d : dets[i])
        if (d.cls == cls) entries.push_back({d.score, i, d.box});
    }
    std::stable_sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) { return a.score > b.score; });
    std::vector<bool> tp;
    tp.reserve(entries.size());
    for (const auto& e : entries) {
      double best = 0.0;
      std::ptrdiff_t best_j = -1;
      for (std::size_t j = 0; j < gts[e.image].size(); ++j) {
        const auto& g = gts[e.image][j];
        if (g.cls != cls || used[e.image][j]) continue;
        const double o = iou(e.box, g.box);
        if (o > best) {
          best = o;
          best_j = std::ptrdiff_t(j);
        }
      }
      const bool hit = best_j >= 0 && best >= iou_thresh;
      if (hit) used[e.image][std::size_t(best_j)] = true;
      tp.push_back(hit);
    }
    if (num_gt == 0) {
      res.per_class_ap.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    const double ap = average_precision_11pt(tp, num_gt);
    res.per_class_ap.push_back(ap);
    sum += ap;
    ++classes_with_gt;
  }
  res.map = classes_with_gt ? sum / double(classes_with_gt) : 0.0;
  return res;
}

inline double eval_map(const std::vector<std::vector<Detection>>& dets, const std::vector<std::vector<SceneObject>>& gts,
                       double iou_thresh = 0.5) {
  return eval_map_detailed(dets, gts, iou_thresh).map;
}

}  // namespace iff
