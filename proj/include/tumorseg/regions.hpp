#pragma once

// Region utilities shared by the proposal stage and the detection heads:
// IoU filtering, non-maximum suppression and box-delta coding.

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "tumorseg/geometry.hpp"

namespace tumorseg {

/// Candidates whose best IoU against any reference is strictly greater than
/// `threshold`, in their original order.
template <typename T>
std::vector<BasicBox<T>> filter_regions_by_iou(std::span<const BasicBox<T>> candidates,
                                               std::span<const BasicBox<T>> references, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("filter_regions_by_iou: threshold must be in (0,1)");
  std::vector<BasicBox<T>> kept;
  for (const auto& c : candidates) {
    double best = 0.0;
    for (const auto& r : references) best = std::max(best, box_iou(c, r));
    if (best > threshold) kept.push_back(c);
  }
  return kept;
}

template <typename T>
std::vector<BasicBox<T>> filter_regions_by_iou(const std::vector<BasicBox<T>>& candidates,
                                               const std::vector<BasicBox<T>>& references, double threshold) {
  return filter_regions_by_iou(std::span<const BasicBox<T>>(candidates), std::span<const BasicBox<T>>(references),
                               threshold);
}

/// IoU that treats degenerate boxes as non-overlapping instead of throwing;
/// decoded proposals can collapse to zero area.
template <typename T>
double safe_box_iou(const BasicBox<T>& a, const BasicBox<T>& b) {
  if (a.is_empty() || b.is_empty()) return 0.0;
  return box_iou(a, b);
}

/// Greedy NMS over boxes sorted by the caller's score order. Returns indices
/// (into `order`'s referents) of the kept boxes, at most `max_keep`.
template <typename T>
std::vector<std::size_t> nms(std::span<const BasicBox<T>> boxes, std::span<const double> scores, double iou_threshold,
                             std::size_t max_keep) {
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<std::size_t> keep;
  std::vector<bool> dead(boxes.size(), false);
  for (std::size_t oi = 0; oi < order.size() && keep.size() < max_keep; ++oi) {
    const std::size_t i = order[oi];
    if (dead[i]) continue;
    keep.push_back(i);
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const std::size_t j = order[oj];
      if (!dead[j] && safe_box_iou(boxes[i], boxes[j]) > iou_threshold) dead[j] = true;
    }
  }
  return keep;
}

/// Scale applied to encoded deltas (dy, dx, dh, dw).
inline constexpr std::array<double, 4> kBoxDeltaStd{0.1, 0.1, 0.2, 0.2};

/// Deltas that move `from` onto `to`, divided by kBoxDeltaStd.
template <typename T>
std::array<double, 4> encode_box_delta(const BasicBox<T>& from, const BasicBox<T>& to) {
  const double fh = from.height(), fw = from.width(), th = to.height(), tw = to.width();
  const double fcy = from.r0 + 0.5 * fh, fcx = from.c0 + 0.5 * fw;
  const double tcy = to.r0 + 0.5 * th, tcx = to.c0 + 0.5 * tw;
  return {(tcy - fcy) / fh / kBoxDeltaStd[0], (tcx - fcx) / fw / kBoxDeltaStd[1],
          std::log(th / fh) / kBoxDeltaStd[2], std::log(tw / fw) / kBoxDeltaStd[3]};
}

template <typename T>
BoxF decode_box_delta(const BasicBox<T>& from, std::span<const double, 4> d) {
  const double fh = from.height(), fw = from.width();
  const double cy = from.r0 + 0.5 * fh + d[0] * kBoxDeltaStd[0] * fh;
  const double cx = from.c0 + 0.5 * fw + d[1] * kBoxDeltaStd[1] * fw;
  // Cap the log-scale so a wild delta cannot overflow.
  const double h = fh * std::exp(std::min(d[2] * kBoxDeltaStd[2], 4.0));
  const double w = fw * std::exp(std::min(d[3] * kBoxDeltaStd[3], 4.0));
  return {static_cast<float>(cy - 0.5 * h), static_cast<float>(cx - 0.5 * w), static_cast<float>(cy + 0.5 * h),
          static_cast<float>(cx + 0.5 * w)};
}

inline BoxF clip_box(const BoxF& b, float rows, float cols) {
  return {std::clamp(b.r0, 0.0f, rows), std::clamp(b.c0, 0.0f, cols), std::clamp(b.r1, 0.0f, rows),
          std::clamp(b.c1, 0.0f, cols)};
}

}  // namespace tumorseg
