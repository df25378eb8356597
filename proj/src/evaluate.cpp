#include <json.hpp>

#include "tumorseg/data.hpp"
#include "tumorseg/metrics.hpp"

namespace tumorseg {

EvalReport evaluate(const Predictor& model, const Dataset& test_set, const EvalConfig& config) {
  for (const auto& scan : test_set.scans)
    if (!scan.ground_truth) throw DataError(scan.scan_id + ": scan has no ground truth");

  EvalReport report;
  report.iou_threshold = config.iou_threshold;
  std::vector<MatchRecord> all_records;
  std::size_t total_gt = 0;
  for (const auto& scan : test_set.scans) {
    const auto& gt = scan.ground_truth->masks;
    const auto detections = model.predict(scan.image);
    auto matches = match_detections(scan.scan_id, detections, gt, config.iou_threshold);

    for (const auto& g : gt) {
      std::optional<double> best;
      for (const auto& d : detections) {
        if (d.score < config.score_threshold) continue;
        const double iou = mask_iou(d.mask, g);
        if (!best || iou > *best) best = iou;
      }
      report.gt_best_iou.push_back(best);
    }
    total_gt += gt.size();
    report.tp += matches.true_positives();
    report.fp += matches.records.size() - matches.true_positives();
    report.fn += matches.false_negatives;
    all_records.insert(all_records.end(), matches.records.begin(), matches.records.end());
    report.per_image.push_back(std::move(matches));
  }
  report.pr_curve = pr_curve(all_records, total_gt);
  report.ap = average_precision(report.pr_curve);
  const auto miou = mean_iou(report.gt_best_iou);
  report.mean_iou = miou.value;
  report.mean_iou_empty = miou.empty;
  return report;
}

std::string to_json_string(const EvalReport& report) {
  using nlohmann::json;
  json curve = json::array();
  for (const auto& p : report.pr_curve)
    curve.push_back({{"threshold", p.threshold}, {"precision", p.precision}, {"recall", p.recall}});
  json images = json::array();
  for (const auto& im : report.per_image) {
    json recs = json::array();
    for (const auto& r : im.records) {
      recs.push_back({{"prediction_index", r.prediction_index},
                      {"score", r.score},
                      {"matched_gt_index", r.matched_gt_index ? json(*r.matched_gt_index) : json(nullptr)},
                      {"iou", r.iou},
                      {"kind", to_string(r.kind)}});
    }
    images.push_back({{"scan_id", im.scan_id},
                      {"gt_count", im.gt_count},
                      {"false_negatives", im.false_negatives},
                      {"records", std::move(recs)}});
  }
  json doc{{"mean_iou", report.mean_iou},
           {"mean_iou_empty", report.mean_iou_empty},
           {"ap", report.ap},
           {"ap_iou_threshold", report.iou_threshold},
           {"counts", {{"tp", report.tp}, {"fp", report.fp}, {"fn", report.fn}}},
           {"pr_curve", std::move(curve)},
           {"per_image", std::move(images)}};
  return doc.dump(2);
}

}  // namespace tumorseg
