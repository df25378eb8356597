#pragma once

// Evaluation math: overlap ratios, greedy detection matching, precision-recall
// curves, all-points interpolated average precision and mean IoU. Everything
// except evaluate() is a pure function.

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tumorseg/detection.hpp"
#include "tumorseg/geometry.hpp"

namespace tumorseg {

struct Dataset;

/// |a & b| / |a | b|. Two empty masks count as perfect agreement (1.0).
inline double mask_iou(const BinaryMask& a, const BinaryMask& b) {
  if (!a.same_shape(b))
    throw ValidationError("mask_iou: shape mismatch " + std::to_string(a.rows) + "x" + std::to_string(a.cols) +
                          " vs " + std::to_string(b.rows) + "x" + std::to_string(b.cols));
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const bool x = a.data[i] != 0, y = b.data[i] != 0;
    inter += x && y;
    uni += x || y;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

enum class MatchKind { TP, FP };

inline std::string_view to_string(MatchKind k) { return k == MatchKind::TP ? "TP" : "FP"; }

struct MatchRecord {
  std::string scan_id;
  std::size_t prediction_index = 0;  // index into the caller's prediction list
  double score = 0.0;
  std::optional<std::size_t> matched_gt_index;
  double iou = 0.0;  // IoU with the claimed ground truth, or best unclaimed overlap for FP
  MatchKind kind = MatchKind::FP;
};

struct ImageMatches {
  std::string scan_id;
  std::vector<MatchRecord> records;  // in descending score order
  std::size_t gt_count = 0;
  std::size_t false_negatives = 0;

  std::size_t true_positives() const {
    return static_cast<std::size_t>(
        std::count_if(records.begin(), records.end(), [](const MatchRecord& r) { return r.kind == MatchKind::TP; }));
  }
};

/// Greedy matching on mask IoU. Predictions are visited by descending score
/// (ties keep input order); each claims the unclaimed ground truth with the
/// highest IoU when that IoU is strictly above `iou_threshold`.
inline ImageMatches match_detections(std::string scan_id, std::span<const Detection> predictions,
                                     std::span<const BinaryMask> ground_truths, double iou_threshold) {
  ImageMatches out;
  out.scan_id = std::move(scan_id);
  out.gt_count = ground_truths.size();

  std::vector<std::size_t> order(predictions.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return predictions[a].score > predictions[b].score; });

  std::vector<bool> claimed(ground_truths.size(), false);
  for (std::size_t pi : order) {
    const Detection& det = predictions[pi];
    double best = 0.0;
    std::optional<std::size_t> best_gt;
    for (std::size_t g = 0; g < ground_truths.size(); ++g) {
      if (claimed[g]) continue;
      const double iou = mask_iou(det.mask, ground_truths[g]);
      if (!best_gt || iou > best) {
        best = iou;
        best_gt = g;
      }
    }
    MatchRecord rec{out.scan_id, pi, det.score, std::nullopt, best_gt ? best : 0.0, MatchKind::FP};
    if (best_gt && best > iou_threshold) {
      claimed[*best_gt] = true;
      rec.matched_gt_index = best_gt;
      rec.kind = MatchKind::TP;
    }
    out.records.push_back(std::move(rec));
  }
  out.false_negatives = static_cast<std::size_t>(std::count(claimed.begin(), claimed.end(), false));
  return out;
}

struct PRPoint {
  double threshold = 0.0;
  double precision = 1.0;
  double recall = 0.0;
};

/// One point per distinct score, visited from the highest score down.
/// Precision 0/0 is 1; recall is 0 when there is no ground truth.
inline std::vector<PRPoint> pr_curve(std::span<const MatchRecord> records, std::size_t total_gt) {
  std::vector<const MatchRecord*> sorted;
  sorted.reserve(records.size());
  for (const auto& r : records) sorted.push_back(&r);
  std::stable_sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->score > b->score; });

  std::vector<PRPoint> curve;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < sorted.size();) {
    const double s = sorted[i]->score;
    for (; i < sorted.size() && sorted[i]->score == s; ++i) (sorted[i]->kind == MatchKind::TP ? tp : fp)++;
    PRPoint p;
    p.threshold = s;
    p.precision = tp + fp == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
    p.recall = total_gt == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(total_gt);
    curve.push_back(p);
  }
  return curve;
}

/// All-points interpolation: sum of recall increments times the best precision
/// reachable at that recall or beyond.
inline double average_precision(std::span<const PRPoint> curve) {
  if (curve.empty()) return 0.0;
  std::vector<double> envelope(curve.size());
  double run = 0.0;
  for (std::size_t i = curve.size(); i-- > 0;) {
    run = std::max(run, curve[i].precision);
    envelope[i] = run;
  }
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < curve.size(); ++i) {
    ap += (curve[i].recall - prev_recall) * envelope[i];
    prev_recall = curve[i].recall;
  }
  return ap;
}

struct MeanIou {
  double value = 0.0;
  bool empty = true;  // no ground truth contributed
};

/// Mean over ground truths of their best-match IoU; unmatched entries count 0.
inline MeanIou mean_iou(std::span<const std::optional<double>> best_match) {
  if (best_match.empty()) return {};
  double sum = 0.0;
  for (const auto& v : best_match) sum += v.value_or(0.0);
  return {sum / static_cast<double>(best_match.size()), false};
}

struct EvalConfig {
  double iou_threshold = 0.5;    // TP requires mask IoU strictly above this
  double score_threshold = 0.5;  // detections kept for the mean-IoU figure
};

struct EvalReport {
  double mean_iou = 0.0;
  bool mean_iou_empty = true;
  double ap = 0.0;  // AP at iou_threshold, all-points interpolation
  double iou_threshold = 0.5;
  std::vector<PRPoint> pr_curve;
  std::vector<ImageMatches> per_image;
  std::vector<std::optional<double>> gt_best_iou;  // one entry per ground-truth instance
  std::size_t tp = 0, fp = 0, fn = 0;
};

/// Runs the predictor on every scan and assembles the report. Scans without
/// ground truth raise DataError.
EvalReport evaluate(const Predictor& model, const Dataset& test_set, const EvalConfig& config = {});

std::string to_json_string(const EvalReport& report);

}  // namespace tumorseg
