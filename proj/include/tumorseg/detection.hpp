#pragma once

#include <string_view>
#include <vector>

#include "tumorseg/geometry.hpp"
#include "tumorseg/image.hpp"

namespace tumorseg {

enum class DetectionClass { tumor };

inline std::string_view to_string(DetectionClass) { return "tumor"; }

/// One predicted instance in image coordinates.
struct Detection {
  Box box;  // half-open, inside the image
  DetectionClass class_label = DetectionClass::tumor;
  double score = 0.0;
  BinaryMask mask;  // image-sized, foreground inside `box`
};

/// Anything that maps an image to detections sorted by descending score.
class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual std::vector<Detection> predict(const Image& image) const = 0;
};

}  // namespace tumorseg
