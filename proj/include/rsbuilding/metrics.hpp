#pragma once

// Confusion counts and IoU / precision / recall / F1.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "rsbuilding/image.hpp"
#include "rsbuilding/ops.hpp"

namespace rsb {

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

  std::uint64_t total() const { return tp + fp + fn + tn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
  bool operator==(const ConfusionCounts&) const = default;
};

struct SegmentationScores {
  double iou = 0, precision = 0, recall = 0, f1 = 0;
};

// A pixel is predicted positive when sigmoid(logit) > threshold.
template <Real T>
ConfusionCounts accumulate(const Tensor<T>& logits, const Mask& gt, double threshold = 0.5) {
  if (logits.rank() != 2 || logits.dim(0) != gt.height || logits.dim(1) != gt.width) {
    throw ShapeError("accumulate: prediction " + shape_str(logits.shape()) + " vs mask [" + std::to_string(gt.height) +
                     "x" + std::to_string(gt.width) + "]");
  }
  ConfusionCounts c;
  const auto x = logits.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (gt.values[i] > 1) throw DataError("accumulate: ground-truth mask is not binary");
    const bool pred = static_cast<double>(ops::sigmoid_value(x[i])) > threshold;
    const bool truth = gt.values[i] == 1;
    if (pred && truth) ++c.tp;
    else if (pred) ++c.fp;
    else if (truth) ++c.fn;
    else ++c.tn;
  }
  return c;
}

// Zero denominators yield 0.
inline SegmentationScores compute(const ConfusionCounts& c) {
  auto ratio = [](double num, double den) { return den == 0 ? 0.0 : num / den; };
  const double tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp), fn = static_cast<double>(c.fn);
  SegmentationScores s;
  s.iou = ratio(tp, tp + fp + fn);
  s.precision = ratio(tp, tp + fp);
  s.recall = ratio(tp, tp + fn);
  s.f1 = ratio(2 * tp, 2 * tp + fp + fn);
  return s;
}

// Mean of per-image scores, the alternative to summing counts first.
inline SegmentationScores per_image_average(const std::vector<ConfusionCounts>& per_image) {
  SegmentationScores mean;
  if (per_image.empty()) return mean;
  for (const auto& c : per_image) {
    const auto s = compute(c);
    mean.iou += s.iou;
    mean.precision += s.precision;
    mean.recall += s.recall;
    mean.f1 += s.f1;
  }
  const double n = static_cast<double>(per_image.size());
  mean.iou /= n;
  mean.precision /= n;
  mean.recall /= n;
  mean.f1 /= n;
  return mean;
}

struct TaskCounts {
  ConfusionCounts bx1, bx2, cd;
};

inline nlohmann::json to_json(const SegmentationScores& s) {
  return {{"iou", s.iou}, {"p", s.precision}, {"r", s.recall}, {"f1", s.f1}};
}

// {"bx1": {...}, "bx2": {...}, "cd": {...}} with micro-averaged scores.
inline nlohmann::json metrics_report(const TaskCounts& c) {
  return {{"bx1", to_json(compute(c.bx1))}, {"bx2", to_json(compute(c.bx2))}, {"cd", to_json(compute(c.cd))}};
}

inline double mean_iou(const TaskCounts& c) {
  return (compute(c.bx1).iou + compute(c.bx2).iou + compute(c.cd).iou) / 3.0;
}

}  // namespace rsb
