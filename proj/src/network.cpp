#include "network.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <opencv2/imgproc.hpp>

#include "tumorseg/nn/layers.hpp"

namespace tumorseg::detail {

using nn::Tensor;
using Grads = nn::ParamSet<float>;

namespace {

constexpr double kRpnPositiveIou = 0.6;
constexpr double kRpnNegativeIou = 0.3;
constexpr std::size_t kRpnSamples = 64;
constexpr std::size_t kPreNmsTop = 256;
constexpr std::size_t kTrainProposals = 32;
constexpr std::size_t kInferProposals = 16;
constexpr double kRpnNms = 0.7;
constexpr double kDetectionNms = 0.3;
constexpr std::size_t kMaxPositiveRois = 8;
constexpr std::size_t kRoisPerImage = 24;

const Tensor<float>& param(const Model& m, const std::string& name) { return m.params().at(name); }

float sample_clamped(const std::vector<float>& grid, int size, double y, double x) {
  y = std::clamp(y, 0.0, size - 1.0);
  x = std::clamp(x, 0.0, size - 1.0);
  const int y0 = static_cast<int>(y), x0 = static_cast<int>(x);
  const int y1 = std::min(y0 + 1, size - 1), x1 = std::min(x0 + 1, size - 1);
  const double ly = y - y0, lx = x - x0;
  auto at = [&](int r, int c) { return static_cast<double>(grid[static_cast<std::size_t>(r) * size + c]); };
  return static_cast<float>((1 - ly) * ((1 - lx) * at(y0, x0) + lx * at(y0, x1)) +
                            ly * ((1 - lx) * at(y1, x0) + lx * at(y1, x1)));
}

// --- backbone --------------------------------------------------------------

struct BackboneCache {
  Tensor<float> a1, p1, a2, feat;
  std::vector<std::size_t> pool_idx;
};

BackboneCache backbone_forward(const Model& m, const Tensor<float>& x) {
  BackboneCache c;
  c.a1 = nn::conv2d(x, param(m, "backbone.conv1.weight"), param(m, "backbone.conv1.bias"), 1);
  nn::relu_inplace(c.a1);
  c.p1 = nn::maxpool2(c.a1, c.pool_idx);
  c.a2 = nn::conv2d(c.p1, param(m, "backbone.conv2.weight"), param(m, "backbone.conv2.bias"), 1);
  nn::relu_inplace(c.a2);
  c.feat = nn::conv2d(c.a2, param(m, "backbone.conv3.weight"), param(m, "backbone.conv3.bias"), 1);
  nn::relu_inplace(c.feat);
  return c;
}

void backbone_backward(const Model& m, const Tensor<float>& x, const BackboneCache& c, Tensor<float>& dfeat,
                       Grads& g) {
  nn::relu_backward(c.feat, dfeat);
  Tensor<float> da2 = c.a2.zeros_like();
  nn::conv2d_backward(c.a2, param(m, "backbone.conv3.weight"), dfeat, 1, &da2, g.at("backbone.conv3.weight"),
                      g.at("backbone.conv3.bias"));
  nn::relu_backward(c.a2, da2);
  Tensor<float> dp1 = c.p1.zeros_like();
  nn::conv2d_backward(c.p1, param(m, "backbone.conv2.weight"), da2, 1, &dp1, g.at("backbone.conv2.weight"),
                      g.at("backbone.conv2.bias"));
  Tensor<float> da1 = c.a1.zeros_like();
  nn::maxpool2_backward(c.pool_idx, dp1, da1);
  nn::relu_backward(c.a1, da1);
  nn::conv2d_backward(x, param(m, "backbone.conv1.weight"), da1, 1, static_cast<Tensor<float>*>(nullptr),
                      g.at("backbone.conv1.weight"), g.at("backbone.conv1.bias"));
}

// --- region proposal stage -------------------------------------------------

struct RpnCache {
  Tensor<float> hidden, cls, bbox;  // cls [A,h,w], bbox [4A,h,w]
};

RpnCache rpn_forward(const Model& m, const Tensor<float>& feat) {
  RpnCache c;
  c.hidden = nn::conv2d(feat, param(m, "rpn.conv.weight"), param(m, "rpn.conv.bias"), 1);
  nn::relu_inplace(c.hidden);
  c.cls = nn::conv2d(c.hidden, param(m, "rpn.cls.weight"), param(m, "rpn.cls.bias"), 0);
  c.bbox = nn::conv2d(c.hidden, param(m, "rpn.bbox.weight"), param(m, "rpn.bbox.bias"), 0);
  return c;
}

void rpn_backward(const Model& m, const Tensor<float>& feat, const RpnCache& c, const Tensor<float>& dcls,
                  const Tensor<float>& dbbox, Tensor<float>& dfeat, Grads& g) {
  Tensor<float> dh = c.hidden.zeros_like();
  nn::conv2d_backward(c.hidden, param(m, "rpn.cls.weight"), dcls, 0, &dh, g.at("rpn.cls.weight"), g.at("rpn.cls.bias"));
  nn::conv2d_backward(c.hidden, param(m, "rpn.bbox.weight"), dbbox, 0, &dh, g.at("rpn.bbox.weight"),
                      g.at("rpn.bbox.bias"));
  nn::relu_backward(c.hidden, dh);
  nn::conv2d_backward(feat, param(m, "rpn.conv.weight"), dh, 1, &dfeat, g.at("rpn.conv.weight"), g.at("rpn.conv.bias"));
}

struct AnchorRef {
  int a, y, x;
};

AnchorRef anchor_ref(std::size_t n, int A, int fw) {
  const int cell = static_cast<int>(n) / A;
  return {static_cast<int>(n) % A, cell / fw, cell % fw};
}

struct Proposals {
  std::vector<BoxF> boxes;
  std::vector<double> scores;
};

Proposals propose(const Architecture& arch, const std::vector<BoxF>& anchors, const RpnCache& rc, float limit_r,
                  float limit_c, std::size_t keep) {
  const int A = arch.anchors_per_cell(), fw = rc.cls.dim(2);
  std::vector<BoxF> boxes;
  std::vector<double> scores;
  boxes.reserve(anchors.size());
  scores.reserve(anchors.size());
  for (std::size_t n = 0; n < anchors.size(); ++n) {
    const auto [a, y, x] = anchor_ref(n, A, fw);
    const std::array<double, 4> d{rc.bbox.at(4 * a, y, x), rc.bbox.at(4 * a + 1, y, x), rc.bbox.at(4 * a + 2, y, x),
                                  rc.bbox.at(4 * a + 3, y, x)};
    const BoxF b = clip_box(decode_box_delta(anchors[n], std::span<const double, 4>(d)), limit_r, limit_c);
    if (b.height() < 1.0f || b.width() < 1.0f) continue;
    boxes.push_back(b);
    scores.push_back(nn::sigmoid(static_cast<double>(rc.cls.at(a, y, x))));
  }
  // Highest scores first, then suppress overlaps.
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t top = std::min(kPreNmsTop, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(top), order.end(),
                    [&](std::size_t i, std::size_t j) { return scores[i] > scores[j] || (scores[i] == scores[j] && i < j); });
  order.resize(top);
  std::vector<BoxF> top_boxes;
  std::vector<double> top_scores;
  for (auto i : order) {
    top_boxes.push_back(boxes[i]);
    top_scores.push_back(scores[i]);
  }
  Proposals out;
  for (auto i : nms<float>(top_boxes, top_scores, kRpnNms, keep)) {
    out.boxes.push_back(top_boxes[i]);
    out.scores.push_back(top_scores[i]);
  }
  return out;
}

// --- heads -----------------------------------------------------------------

nn::RoiBox to_feature(const BoxF& b, int stride) {
  return {b.r0 / static_cast<double>(stride), b.c0 / static_cast<double>(stride), b.r1 / static_cast<double>(stride),
          b.c1 / static_cast<double>(stride)};
}

struct HeadCache {
  nn::RoiAlignPlan plan;
  Tensor<float> pooled;
  std::vector<float> hidden, logits, deltas;
};

HeadCache head_forward(const Model& m, const Tensor<float>& feat, const BoxF& roi) {
  const auto& arch = m.architecture();
  HeadCache c;
  c.plan = nn::roi_align_plan(to_feature(roi, arch.stride), feat.dim(1), feat.dim(2), arch.pool_size);
  c.pooled = nn::roi_align(feat, c.plan);
  c.hidden = nn::linear<float>(c.pooled.data, param(m, "head.fc.weight"), param(m, "head.fc.bias"));
  for (auto& v : c.hidden) v = std::max(v, 0.0f);
  c.logits = nn::linear<float>(c.hidden, param(m, "head.cls.weight"), param(m, "head.cls.bias"));
  c.deltas = nn::linear<float>(c.hidden, param(m, "head.bbox.weight"), param(m, "head.bbox.bias"));
  return c;
}

void head_backward(const Model& m, const HeadCache& c, std::span<const float> dlogits, std::span<const float> ddeltas,
                   Tensor<float>& dfeat, Grads& g) {
  std::vector<float> dhidden(c.hidden.size(), 0.0f);
  nn::linear_backward<float>(c.hidden, param(m, "head.cls.weight"), dlogits, dhidden, g.at("head.cls.weight"),
                             g.at("head.cls.bias"));
  nn::linear_backward<float>(c.hidden, param(m, "head.bbox.weight"), ddeltas, dhidden, g.at("head.bbox.weight"),
                             g.at("head.bbox.bias"));
  for (std::size_t i = 0; i < dhidden.size(); ++i)
    if (!(c.hidden[i] > 0.0f)) dhidden[i] = 0.0f;
  Tensor<float> dpooled = c.pooled.zeros_like();
  nn::linear_backward<float>(c.pooled.data, param(m, "head.fc.weight"), dhidden, dpooled.data, g.at("head.fc.weight"),
                             g.at("head.fc.bias"));
  nn::roi_align_backward(c.plan, dpooled, dfeat);
}

struct MaskCache {
  nn::RoiAlignPlan plan;
  Tensor<float> pooled, m1, m2, logits;  // logits [K, M, M]
};

MaskCache mask_forward(const Model& m, const Tensor<float>& feat, const BoxF& roi) {
  const auto& arch = m.architecture();
  MaskCache c;
  c.plan = nn::roi_align_plan(to_feature(roi, arch.stride), feat.dim(1), feat.dim(2), arch.mask_size);
  c.pooled = nn::roi_align(feat, c.plan);
  c.m1 = nn::conv2d(c.pooled, param(m, "mask.conv1.weight"), param(m, "mask.conv1.bias"), 1);
  nn::relu_inplace(c.m1);
  c.m2 = nn::conv2d(c.m1, param(m, "mask.conv2.weight"), param(m, "mask.conv2.bias"), 1);
  nn::relu_inplace(c.m2);
  c.logits = nn::conv2d(c.m2, param(m, "mask.logits.weight"), param(m, "mask.logits.bias"), 0);
  return c;
}

void mask_backward(const Model& m, const MaskCache& c, const Tensor<float>& dlogits, Tensor<float>& dfeat, Grads& g) {
  Tensor<float> dm2 = c.m2.zeros_like();
  nn::conv2d_backward(c.m2, param(m, "mask.logits.weight"), dlogits, 0, &dm2, g.at("mask.logits.weight"),
                      g.at("mask.logits.bias"));
  nn::relu_backward(c.m2, dm2);
  Tensor<float> dm1 = c.m1.zeros_like();
  nn::conv2d_backward(c.m1, param(m, "mask.conv2.weight"), dm2, 1, &dm1, g.at("mask.conv2.weight"),
                      g.at("mask.conv2.bias"));
  nn::relu_backward(c.m1, dm1);
  Tensor<float> dpooled = c.pooled.zeros_like();
  nn::conv2d_backward(c.pooled, param(m, "mask.conv1.weight"), dm1, 1, &dpooled, g.at("mask.conv1.weight"),
                      g.at("mask.conv1.bias"));
  nn::roi_align_backward(c.plan, dpooled, dfeat);
}

template <typename T>
void take_prefix_shuffled(std::vector<T>& v, std::size_t n, Rng& rng) {
  rng.shuffle(std::span<T>(v));
  if (v.size() > n) v.resize(n);
}

}  // namespace

// --- input preparation ------------------------------------------------------

PreparedInput prepare_input(const Image& image, const Normalization& norm, int S) {
  validate_image(image);
  const Image rgb = to_three_channels(image);
  PreparedInput p;
  p.rows = image.rows;
  p.cols = image.cols;
  const double scale = static_cast<double>(S) / std::max(image.rows, image.cols);
  const int rr = std::clamp(static_cast<int>(std::lround(image.rows * scale)), 1, S);
  const int rc = std::clamp(static_cast<int>(std::lround(image.cols * scale)), 1, S);
  p.scale_r = static_cast<double>(rr) / image.rows;
  p.scale_c = static_cast<double>(rc) / image.cols;

  cv::Mat src(rgb.rows, rgb.cols, CV_8UC3, const_cast<std::uint8_t*>(rgb.pixels.data()));
  cv::Mat resized = src;
  if (rr != rgb.rows || rc != rgb.cols)
    cv::resize(src, resized, cv::Size(rc, rr), 0, 0, rr < rgb.rows ? cv::INTER_AREA : cv::INTER_LINEAR);

  p.input = Tensor<float>({3, S, S});
  for (int ch = 0; ch < 3; ++ch) {
    const float pad = (0.0f - norm.mean[ch]) / norm.std[ch];
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) {
        float v = pad;
        if (y < rr && x < rc) v = (resized.at<cv::Vec3b>(y, x)[ch] / 255.0f - norm.mean[ch]) / norm.std[ch];
        p.input.at(ch, y, x) = v;
      }
  }
  return p;
}

TrainSample prepare_sample(const Image& image, const std::vector<BinaryMask>& masks, const std::vector<int>& classes,
                           const Normalization& norm, int S) {
  TrainSample s;
  s.in = prepare_input(image, norm, S);
  const int rr = static_cast<int>(std::lround(s.in.scale_r * image.rows));
  const int rc = static_cast<int>(std::lround(s.in.scale_c * image.cols));
  for (std::size_t k = 0; k < masks.size(); ++k) {
    const auto& m = masks[k];
    const Box b = derive_box_from_mask(m);
    s.target.boxes.push_back({static_cast<float>(b.r0 * s.in.scale_r), static_cast<float>(b.c0 * s.in.scale_c),
                              static_cast<float>(b.r1 * s.in.scale_r), static_cast<float>(b.c1 * s.in.scale_c)});
    cv::Mat src(m.rows, m.cols, CV_32F);
    for (int r = 0; r < m.rows; ++r)
      for (int c = 0; c < m.cols; ++c) src.at<float>(r, c) = m.at(r, c) ? 1.0f : 0.0f;
    cv::Mat dst = src;
    if (rr != m.rows || rc != m.cols) cv::resize(src, dst, cv::Size(rc, rr), 0, 0, cv::INTER_LINEAR);
    std::vector<float> soft(static_cast<std::size_t>(S) * S, 0.0f);
    for (int y = 0; y < rr; ++y)
      for (int x = 0; x < rc; ++x) soft[static_cast<std::size_t>(y) * S + x] = dst.at<float>(y, x);
    s.target.masks.push_back(std::move(soft));
    s.target.classes.push_back(classes.at(k));
  }
  return s;
}

std::vector<BoxF> make_anchors(const Architecture& arch, int feature_size) {
  std::vector<BoxF> out;
  out.reserve(static_cast<std::size_t>(feature_size) * feature_size * arch.anchor_sizes.size());
  for (int y = 0; y < feature_size; ++y)
    for (int x = 0; x < feature_size; ++x)
      for (double size : arch.anchor_sizes) {
        const double cy = (y + 0.5) * arch.stride, cx = (x + 0.5) * arch.stride, h = 0.5 * size;
        out.push_back({static_cast<float>(cy - h), static_cast<float>(cx - h), static_cast<float>(cy + h),
                       static_cast<float>(cx + h)});
      }
  return out;
}

// --- training ---------------------------------------------------------------

LossBreakdown train_step(const Model& model, const TrainSample& sample, Rng& rng, Grads* grads) {
  const auto& arch = model.architecture();
  const auto& cfg = model.config();
  const auto& gt = sample.target.boxes;
  const int A = arch.anchors_per_cell();
  LossBreakdown loss;

  const auto bb = backbone_forward(model, sample.in.input);
  const auto rc = rpn_forward(model, bb.feat);
  const int fw = bb.feat.dim(2);
  const auto anchors = make_anchors(arch, fw);
  Tensor<float> dfeat = bb.feat.zeros_like();

  // Anchor labels: positive above kRpnPositiveIou or best for some ground truth.
  std::vector<int> best_gt(anchors.size(), -1);
  std::vector<std::size_t> pos, neg;
  {
    std::vector<signed char> label(anchors.size(), -1);
    std::vector<double> best_iou(anchors.size(), 0.0);
    for (std::size_t n = 0; n < anchors.size(); ++n) {
      for (std::size_t g = 0; g < gt.size(); ++g) {
        const double iou = safe_box_iou(anchors[n], gt[g]);
        if (iou > best_iou[n]) {
          best_iou[n] = iou;
          best_gt[n] = static_cast<int>(g);
        }
      }
      if (best_iou[n] >= kRpnPositiveIou)
        label[n] = 1;
      else if (best_iou[n] < kRpnNegativeIou)
        label[n] = 0;
    }
    for (std::size_t g = 0; g < gt.size(); ++g) {
      std::size_t arg = 0;
      double best = -1.0;
      for (std::size_t n = 0; n < anchors.size(); ++n) {
        const double iou = safe_box_iou(anchors[n], gt[g]);
        if (iou > best) {
          best = iou;
          arg = n;
        }
      }
      label[arg] = 1;
      best_gt[arg] = static_cast<int>(g);
    }
    for (std::size_t n = 0; n < anchors.size(); ++n) {
      if (label[n] == 1) pos.push_back(n);
      if (label[n] == 0) neg.push_back(n);
    }
  }
  take_prefix_shuffled(pos, kRpnSamples / 2, rng);
  take_prefix_shuffled(neg, kRpnSamples - pos.size(), rng);

  Tensor<float> dcls = rc.cls.zeros_like(), dbbox = rc.bbox.zeros_like();
  const double n_sampled = static_cast<double>(pos.size() + neg.size());
  auto add_objectness = [&](std::size_t n, float target) {
    const auto [a, y, x] = anchor_ref(n, A, fw);
    float g = 0.0f;
    loss.rpn_class += nn::bce_with_logits(rc.cls.at(a, y, x), target, g) / n_sampled;
    dcls.at(a, y, x) = static_cast<float>(g / n_sampled);
  };
  for (auto n : pos) add_objectness(n, 1.0f);
  for (auto n : neg) add_objectness(n, 0.0f);
  for (auto n : pos) {
    const auto [a, y, x] = anchor_ref(n, A, fw);
    const auto target = encode_box_delta(anchors[n], gt[static_cast<std::size_t>(best_gt[n])]);
    for (int j = 0; j < 4; ++j) {
      float g = 0.0f;
      loss.rpn_box += nn::smooth_l1(static_cast<float>(rc.bbox.at(4 * a + j, y, x) - target[j]), g) / pos.size();
      dbbox.at(4 * a + j, y, x) = g / static_cast<float>(pos.size());
    }
  }

  // Region supervision: proposals plus ground truth, positives by strict IoU filter.
  const float limit_r = static_cast<float>(sample.in.rows * sample.in.scale_r);
  const float limit_c = static_cast<float>(sample.in.cols * sample.in.scale_c);
  auto rois = propose(arch, anchors, rc, limit_r, limit_c, kTrainProposals).boxes;
  rois.insert(rois.end(), gt.begin(), gt.end());
  const auto kept = filter_regions_by_iou(rois, gt, cfg.roi_iou_threshold);
  std::vector<std::size_t> roi_pos, roi_neg;
  for (std::size_t i = 0, j = 0; i < rois.size(); ++i) {
    if (j < kept.size() && rois[i] == kept[j]) {
      roi_pos.push_back(i);
      ++j;
    } else {
      roi_neg.push_back(i);
    }
  }
  take_prefix_shuffled(roi_pos, kMaxPositiveRois, rng);
  take_prefix_shuffled(roi_neg, kRoisPerImage - roi_pos.size(), rng);

  const int K = cfg.num_classes;
  const int M = arch.mask_size;
  const double n_rois = static_cast<double>(roi_pos.size() + roi_neg.size());
  auto run_head = [&](std::size_t i, bool positive) {
    const BoxF& roi = rois[i];
    int g_idx = -1;
    double best = -1;
    if (positive)
      for (std::size_t g = 0; g < gt.size(); ++g) {
        const double iou = safe_box_iou(roi, gt[g]);
        if (iou > best) {
          best = iou;
          g_idx = static_cast<int>(g);
        }
      }
    const int cls = positive ? sample.target.classes[static_cast<std::size_t>(g_idx)] : 0;
    auto hc = head_forward(model, bb.feat, roi);
    std::vector<float> dlogits(static_cast<std::size_t>(K)), ddeltas(hc.deltas.size(), 0.0f);
    loss.head_class += nn::softmax_cross_entropy<float>(hc.logits, cls, dlogits) / n_rois;
    for (auto& v : dlogits) v = static_cast<float>(v / n_rois);
    if (positive) {
      const auto target = encode_box_delta(roi, gt[static_cast<std::size_t>(g_idx)]);
      for (int j = 0; j < 4; ++j) {
        float g = 0.0f;
        const std::size_t k = static_cast<std::size_t>(4 * cls + j);
        loss.head_box += nn::smooth_l1(static_cast<float>(hc.deltas[k] - target[j]), g) / roi_pos.size();
        ddeltas[k] = g / static_cast<float>(roi_pos.size());
      }
    }
    if (grads) head_backward(model, hc, dlogits, ddeltas, dfeat, *grads);
    if (!positive) return;

    auto mc = mask_forward(model, bb.feat, roi);
    const auto& soft = sample.target.masks[static_cast<std::size_t>(g_idx)];
    const int S = cfg.input_size;
    Tensor<float> dml = mc.logits.zeros_like();
    const double denom = static_cast<double>(M) * M * roi_pos.size();
    for (int i2 = 0; i2 < M; ++i2)
      for (int j2 = 0; j2 < M; ++j2) {
        const double y = roi.r0 + (i2 + 0.5) * roi.height() / M;
        const double x = roi.c0 + (j2 + 0.5) * roi.width() / M;
        const float t = sample_clamped(soft, S, y - 0.5, x - 0.5) >= 0.5f ? 1.0f : 0.0f;
        float g = 0.0f;
        loss.mask += nn::bce_with_logits(mc.logits.at(cls, i2, j2), t, g) / denom;
        dml.at(cls, i2, j2) = static_cast<float>(g / denom);
      }
    if (grads) mask_backward(model, mc, dml, dfeat, *grads);
  };
  for (auto i : roi_pos) run_head(i, true);
  for (auto i : roi_neg) run_head(i, false);

  if (grads) {
    rpn_backward(model, bb.feat, rc, dcls, dbbox, dfeat, *grads);
    backbone_backward(model, sample.in.input, bb, dfeat, *grads);
  }
  return loss;
}

// --- inference --------------------------------------------------------------

std::vector<RawDetection> infer(const Model& model, const PreparedInput& in) {
  const auto& arch = model.architecture();
  const auto& cfg = model.config();
  const int K = cfg.num_classes;
  const auto bb = backbone_forward(model, in.input);
  const auto rc = rpn_forward(model, bb.feat);
  const auto anchors = make_anchors(arch, bb.feat.dim(2));
  const float limit_r = static_cast<float>(in.rows * in.scale_r);
  const float limit_c = static_cast<float>(in.cols * in.scale_c);
  const auto props = propose(arch, anchors, rc, limit_r, limit_c, kInferProposals);

  std::vector<BoxF> boxes;
  std::vector<double> scores;
  std::vector<int> classes;
  for (const auto& roi : props.boxes) {
    const auto hc = head_forward(model, bb.feat, roi);
    const auto probs = nn::softmax<float>(hc.logits);
    int best = 1;
    for (int k = 2; k < K; ++k)
      if (probs[static_cast<std::size_t>(k)] > probs[static_cast<std::size_t>(best)]) best = k;
    const double score = probs[static_cast<std::size_t>(best)];
    if (score < cfg.min_detection_score) continue;
    const std::array<double, 4> d{hc.deltas[4 * best], hc.deltas[4 * best + 1], hc.deltas[4 * best + 2],
                                  hc.deltas[4 * best + 3]};
    const BoxF refined = clip_box(decode_box_delta(roi, std::span<const double, 4>(d)), limit_r, limit_c);
    if (refined.height() < 1.0f || refined.width() < 1.0f) continue;
    boxes.push_back(refined);
    scores.push_back(score);
    classes.push_back(best);
  }
  std::vector<RawDetection> out;
  for (auto i : nms<float>(boxes, scores, kDetectionNms, static_cast<std::size_t>(cfg.max_detections_per_image))) {
    RawDetection det{boxes[i], scores[i], classes[i], {}};
    const auto mc = mask_forward(model, bb.feat, det.box);
    const int M = arch.mask_size;
    det.mask_probs.resize(static_cast<std::size_t>(M) * M);
    for (int y = 0; y < M; ++y)
      for (int x = 0; x < M; ++x)
        det.mask_probs[static_cast<std::size_t>(y) * M + x] = nn::sigmoid(mc.logits.at(det.class_id, y, x));
    out.push_back(std::move(det));
  }
  return out;
}

BinaryMask paste_mask(const RawDetection& det, const PreparedInput& in, int M, double threshold) {
  BinaryMask mask(in.rows, in.cols);
  const BoxF& b = det.box;
  const int r_lo = std::max(0, static_cast<int>(std::floor(b.r0 / in.scale_r)) - 1);
  const int r_hi = std::min(in.rows, static_cast<int>(std::ceil(b.r1 / in.scale_r)) + 1);
  const int c_lo = std::max(0, static_cast<int>(std::floor(b.c0 / in.scale_c)) - 1);
  const int c_hi = std::min(in.cols, static_cast<int>(std::ceil(b.c1 / in.scale_c)) + 1);
  for (int r = r_lo; r < r_hi; ++r) {
    const double y = (r + 0.5) * in.scale_r;
    if (y < b.r0 || y >= b.r1) continue;
    const double u = (y - b.r0) / b.height() * M - 0.5;
    for (int c = c_lo; c < c_hi; ++c) {
      const double x = (c + 0.5) * in.scale_c;
      if (x < b.c0 || x >= b.c1) continue;
      const double v = (x - b.c0) / b.width() * M - 0.5;
      if (sample_clamped(det.mask_probs, M, u, v) >= threshold) mask.at(r, c) = 1;
    }
  }
  return mask;
}

void init_tensor(const std::string& name, Tensor<float>& t, int num_classes, Rng& rng) {
  const bool is_bias = name.size() > 5 && name.compare(name.size() - 5, 5, ".bias") == 0;
  if (is_bias) {
    t.fill(0.0f);
    // Background prior of 0.99 keeps untrained heads and proposals quiet.
    if (name == "head.cls.bias") t[0] = static_cast<float>(std::log(99.0 * (num_classes - 1)));
    if (name == "rpn.cls.bias") t.fill(static_cast<float>(-std::log(99.0)));
    return;
  }
  double stddev = std::sqrt(2.0 / (static_cast<double>(t.numel()) / t.dim(0)));
  if (name == "head.cls.weight" || name == "rpn.cls.weight" || name == "mask.logits.weight") stddev = 0.01;
  if (name == "head.bbox.weight" || name == "rpn.bbox.weight") stddev = 0.001;
  for (auto& v : t.data) v = static_cast<float>(rng.normal() * stddev);
}

}  // namespace tumorseg::detail
