#pragma once

// Fixtures shared by the test binaries: scratch directories and stand-in
// predictors with known behaviour.

#include <atomic>
#include <filesystem>
#include <map>
#include <mutex>
#include <random>
#include <string>

#include "tumorseg/data.hpp"
#include "tumorseg/detection.hpp"
#include "tumorseg/errors.hpp"

namespace tumorseg::fixture {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("tumorseg_test_" + std::to_string(rd()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline Detection detection_from_mask(BinaryMask mask, double score) {
  Detection d;
  d.box = derive_box_from_mask(mask);
  d.score = score;
  d.mask = std::move(mask);
  return d;
}

/// Returns the ground truth of whichever dataset scan has an identical image.
class ReplayPredictor : public Predictor {
 public:
  explicit ReplayPredictor(const Dataset& ds) : ds_(ds) {}
  std::vector<Detection> predict(const Image& image) const override {
    for (const auto& s : ds_.scans)
      if (s.image == image) {
        std::vector<Detection> out;
        for (const auto& m : s.ground_truth->masks) out.push_back(detection_from_mask(m, 0.99));
        return out;
      }
    return {};
  }

 private:
  const Dataset& ds_;
};

class EmptyPredictor : public Predictor {
 public:
  std::vector<Detection> predict(const Image&) const override { return {}; }
};

/// One detection covering every pixel brighter than `level` (first channel).
class ThresholdPredictor : public Predictor {
 public:
  explicit ThresholdPredictor(int level = 160, double score = 0.9) : level_(level), score_(score) {}
  std::vector<Detection> predict(const Image& image) const override {
    BinaryMask m(image.rows, image.cols);
    for (int r = 0; r < image.rows; ++r)
      for (int c = 0; c < image.cols; ++c) m.at(r, c) = image.at(r, c) > level_;
    if (m.empty()) return {};
    return {detection_from_mask(std::move(m), score_)};
  }

 private:
  int level_;
  double score_;
};

class ThrowingPredictor : public Predictor {
 public:
  std::vector<Detection> predict(const Image&) const override { throw Error("model exploded"); }
};

}  // namespace tumorseg::fixture
