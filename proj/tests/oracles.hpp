#pragma once

// Brute-force reference implementations for the evaluation math. They take a
// deliberately different route from the library (per-pixel membership tests,
// exhaustive assignment search, per-threshold recounting) so agreement between
// the two is meaningful. Shared by the unit tests and the acceptance binary.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <set>
#include <vector>

#include "tumorseg/metrics.hpp"
#include "tumorseg/random.hpp"

namespace tumorseg::oracle {

inline double pixel_iou(const BinaryMask& a, const BinaryMask& b) {
  long inter = 0, uni = 0;
  for (int r = 0; r < a.rows; ++r)
    for (int c = 0; c < a.cols; ++c) {
      const bool x = a.at(r, c) != 0, y = b.at(r, c) != 0;
      if (x && y) ++inter;
      if (x || y) ++uni;
    }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

/// IoU of two boxes by testing every pixel of a frame for membership.
inline double raster_box_iou(const Box& a, const Box& b, int rows, int cols) {
  auto inside = [](const Box& x, int r, int c) { return r >= x.r0 && r < x.r1 && c >= x.c0 && c < x.c1; };
  long inter = 0, uni = 0;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      const bool x = inside(a, r, c), y = inside(b, r, c);
      inter += x && y;
      uni += x || y;
    }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline Box brute_box(const BinaryMask& m) {
  Box b{m.rows, m.cols, 0, 0};
  bool any = false;
  for (int r = 0; r < m.rows; ++r)
    for (int c = 0; c < m.cols; ++c)
      if (m.at(r, c)) {
        any = true;
        b.r0 = std::min(b.r0, r);
        b.c0 = std::min(b.c0, c);
        b.r1 = std::max(b.r1, r + 1);
        b.c1 = std::max(b.c1, c + 1);
      }
  return any ? b : Box{};
}

/// Largest one-to-one assignment where a pair qualifies when iou > threshold.
inline std::size_t max_assignment(const std::vector<std::vector<double>>& iou, double threshold) {
  const std::size_t np = iou.size(), ng = np ? iou[0].size() : 0;
  std::vector<bool> used(ng, false);
  std::function<std::size_t(std::size_t)> go = [&](std::size_t p) -> std::size_t {
    if (p == np) return 0;
    std::size_t best = go(p + 1);  // leave p unassigned
    for (std::size_t g = 0; g < ng; ++g) {
      if (used[g] || !(iou[p][g] > threshold)) continue;
      used[g] = true;
      best = std::max(best, 1 + go(p + 1));
      used[g] = false;
    }
    return best;
  };
  return go(0);
}

/// Recounts TP and FP among records scoring at or above every distinct score.
inline std::vector<PRPoint> cumulative_pr(const std::vector<MatchRecord>& records, std::size_t total_gt) {
  std::set<double, std::greater<>> scores;
  for (const auto& r : records) scores.insert(r.score);
  std::vector<PRPoint> out;
  for (double t : scores) {
    std::size_t tp = 0, fp = 0;
    for (const auto& r : records)
      if (r.score >= t) (r.kind == MatchKind::TP ? tp : fp)++;
    PRPoint p;
    p.threshold = t;
    p.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    p.recall = total_gt ? static_cast<double>(tp) / static_cast<double>(total_gt) : 0.0;
    out.push_back(p);
  }
  return out;
}

/// Area under the interpolated curve: each recall step weighted by the best
/// precision among all points whose recall reaches that step.
inline double interpolated_ap(const std::vector<PRPoint>& curve) {
  std::set<double> recalls;
  for (const auto& p : curve) recalls.insert(p.recall);
  double ap = 0.0, prev = 0.0;
  for (double r : recalls) {
    double best = 0.0;
    for (const auto& p : curve)
      if (p.recall >= r) best = std::max(best, p.precision);
    ap += (r - prev) * best;
    prev = r;
  }
  return ap;
}

// Random small cases --------------------------------------------------------------

/// Filled axis-aligned ellipse or rectangle inside [r0,r1) x [c0,c1).
inline BinaryMask random_blob(Rng& rng, int rows, int cols, int r0, int c0, int r1, int c1) {
  BinaryMask m(rows, cols);
  const int h = static_cast<int>(rng.uniform_int(1, r1 - r0)), w = static_cast<int>(rng.uniform_int(1, c1 - c0));
  const int top = static_cast<int>(rng.uniform_int(r0, r1 - h)), left = static_cast<int>(rng.uniform_int(c0, c1 - w));
  const bool round = rng.uniform() < 0.5 && h > 2 && w > 2;
  for (int r = top; r < top + h; ++r)
    for (int c = left; c < left + w; ++c) {
      if (round) {
        const double y = (r + 0.5 - top - h / 2.0) / (h / 2.0), x = (c + 0.5 - left - w / 2.0) / (w / 2.0);
        if (y * y + x * x > 1.0) continue;
      }
      m.at(r, c) = 1;
    }
  if (m.empty()) m.at(top, left) = 1;
  return m;
}

/// Moves a mask by a few pixels and flips some pixels near its border.
inline BinaryMask jitter(Rng& rng, const BinaryMask& src) {
  BinaryMask m(src.rows, src.cols);
  const int dr = static_cast<int>(rng.uniform_int(-2, 2)), dc = static_cast<int>(rng.uniform_int(-2, 2));
  for (int r = 0; r < src.rows; ++r)
    for (int c = 0; c < src.cols; ++c) {
      const int sr = r - dr, sc = c - dc;
      if (sr >= 0 && sr < src.rows && sc >= 0 && sc < src.cols && src.at(sr, sc)) m.at(r, c) = 1;
    }
  for (int k = 0; k < 6; ++k) {
    const int r = static_cast<int>(rng.uniform_int(0, src.rows - 1)), c = static_cast<int>(rng.uniform_int(0, src.cols - 1));
    m.at(r, c) = !m.at(r, c);
  }
  return m;
}

struct MatchCase {
  int rows = 0, cols = 0;
  std::vector<BinaryMask> gts;  // pairwise disjoint
  std::vector<Detection> preds;
};

/// Up to 4 disjoint ground truths (one per quadrant) and up to 4 predictions
/// that are jittered copies of ground truths or unrelated blobs. Scores are
/// drawn from a coarse grid so ties occur.
inline MatchCase random_match_case(Rng& rng) {
  MatchCase mc;
  mc.rows = static_cast<int>(rng.uniform_int(4, 64));
  mc.cols = static_cast<int>(rng.uniform_int(4, 64));
  const int hr = mc.rows / 2, hc = mc.cols / 2;
  const int quads[4][4] = {{0, 0, hr, hc}, {0, hc, hr, mc.cols}, {hr, 0, mc.rows, hc}, {hr, hc, mc.rows, mc.cols}};
  const auto n_gt = rng.uniform_int(0, 4);
  std::vector<int> qi{0, 1, 2, 3};
  rng.shuffle(std::span<int>(qi));
  for (int k = 0; k < n_gt; ++k) {
    const auto* q = quads[qi[k]];
    mc.gts.push_back(random_blob(rng, mc.rows, mc.cols, q[0], q[1], q[2], q[3]));
  }
  const auto n_pred = rng.uniform_int(0, 4);
  for (int k = 0; k < n_pred; ++k) {
    Detection d;
    if (!mc.gts.empty() && rng.uniform() < 0.7)
      d.mask = jitter(rng, mc.gts[static_cast<std::size_t>(rng.uniform_int(0, n_gt - 1))]);
    else
      d.mask = random_blob(rng, mc.rows, mc.cols, 0, 0, mc.rows, mc.cols);
    if (d.mask.empty()) d.mask.at(0, 0) = 1;
    d.box = derive_box_from_mask(d.mask);
    d.score = static_cast<double>(rng.uniform_int(1, 10)) / 10.0;
    mc.preds.push_back(std::move(d));
  }
  return mc;
}

/// Mismatch summary of one oracle comparison.
struct Agreement {
  double max_abs_error = 0.0;
  std::size_t count_mismatches = 0;

  void value(double got, double want) { max_abs_error = std::max(max_abs_error, std::abs(got - want)); }
  void count(std::size_t got, std::size_t want) { count_mismatches += got != want; }
  bool ok(double tol) const { return count_mismatches == 0 && max_abs_error <= tol; }
};

/// Runs every metric of one random case against the oracles.
inline void compare_case(Rng& rng, Agreement& agg) {
  MatchCase mc = random_match_case(rng);

  // mask_iou on every pred/gt pair and a pair of fresh random masks.
  std::vector<std::vector<double>> table(mc.preds.size(), std::vector<double>(mc.gts.size()));
  for (std::size_t p = 0; p < mc.preds.size(); ++p)
    for (std::size_t g = 0; g < mc.gts.size(); ++g) {
      table[p][g] = pixel_iou(mc.preds[p].mask, mc.gts[g]);
      agg.value(mask_iou(mc.preds[p].mask, mc.gts[g]), table[p][g]);
    }
  const auto a = random_blob(rng, mc.rows, mc.cols, 0, 0, mc.rows, mc.cols);
  const auto b = random_blob(rng, mc.rows, mc.cols, 0, 0, mc.rows, mc.cols);
  agg.value(mask_iou(a, b), pixel_iou(a, b));

  // box_iou against rasterized membership counting.
  const Box ba = brute_box(a), bb = brute_box(b);
  agg.value(box_iou(ba, bb), raster_box_iou(ba, bb, mc.rows, mc.cols));

  // Greedy matching: TP count equals the best possible assignment.
  for (double thr : {0.5, 0.75}) {
    const auto m = match_detections("case", mc.preds, mc.gts, thr);
    agg.count(m.true_positives(), max_assignment(table, thr));
    agg.count(m.false_negatives, mc.gts.size() - m.true_positives());
    for (const auto& r : m.records)
      if (r.matched_gt_index) agg.value(r.iou, table[r.prediction_index][*r.matched_gt_index]);

    const auto curve = pr_curve(m.records, mc.gts.size());
    const auto want = cumulative_pr(m.records, mc.gts.size());
    agg.count(curve.size(), want.size());
    for (std::size_t i = 0; i < std::min(curve.size(), want.size()); ++i) {
      agg.value(curve[i].threshold, want[i].threshold);
      agg.value(curve[i].precision, want[i].precision);
      agg.value(curve[i].recall, want[i].recall);
    }
    agg.value(average_precision(curve), interpolated_ap(want));
  }
}

}  // namespace tumorseg::oracle
