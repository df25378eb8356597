#pragma once

#include <vector>

#include "tumorseg/engine.hpp"
#include "tumorseg/random.hpp"

namespace tumorseg::detail {

/// An image mapped into the square network input: resized with its aspect
/// ratio kept, anchored top-left, zero padded, normalised.
struct PreparedInput {
  nn::Tensor<float> input;  // [3, S, S]
  int rows = 0, cols = 0;   // original image size
  double scale_r = 1.0, scale_c = 1.0;  // input pixels per image pixel
};

struct TrainTarget {
  std::vector<BoxF> boxes;               // input coordinates
  std::vector<std::vector<float>> masks;  // S*S soft masks in input space
  std::vector<int> classes;               // 1..num_classes-1
};

struct TrainSample {
  PreparedInput in;
  TrainTarget target;
};

PreparedInput prepare_input(const Image& image, const Normalization& norm, int input_size);
TrainSample prepare_sample(const Image& image, const std::vector<BinaryMask>& masks, const std::vector<int>& classes,
                           const Normalization& norm, int input_size);

/// Anchor boxes in input coordinates, ordered (y, x, anchor).
std::vector<BoxF> make_anchors(const Architecture& arch, int feature_size);

struct LossBreakdown {
  double rpn_class = 0, rpn_box = 0, head_class = 0, head_box = 0, mask = 0;
  double total() const { return rpn_class + rpn_box + head_class + head_box + mask; }
};

/// Forward pass with loss; when `grads` is non-null, backpropagates into it.
LossBreakdown train_step(const Model& model, const TrainSample& sample, Rng& rng, nn::ParamSet<float>* grads);

/// Raw inference output in input coordinates.
struct RawDetection {
  BoxF box;
  double score;
  int class_id;
  std::vector<float> mask_probs;  // mask_size * mask_size
};

std::vector<RawDetection> infer(const Model& model, const PreparedInput& in);

/// Pastes a mask-head output into image space and thresholds it.
BinaryMask paste_mask(const RawDetection& det, const PreparedInput& in, int mask_size, double threshold);

/// Weight initialisation used for fresh models and excluded heads.
void init_tensor(const std::string& name, nn::Tensor<float>& t, int num_classes, Rng& rng);

}  // namespace tumorseg::detail
