#pragma once

// Region-based instance segmentation: a convolutional feature extractor, a
// region-proposal stage over anchors, RoIAlign pooling, class/box heads and a
// per-region mask head. Training writes one checkpoint per epoch; inference
// reloads the newest one.

#include <array>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <future>
#include <iosfwd>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "tumorseg/data.hpp"
#include "tumorseg/detection.hpp"
#include "tumorseg/nn/optim.hpp"
#include "tumorseg/regions.hpp"

namespace tumorseg {

struct ModelConfig {
  int num_classes = 2;  // background + tumor
  int input_size = 64;
  int epochs = 20;
  int steps_per_epoch = 0;  // 0: one pass over the training set
  double learning_rate = 1e-3;
  double roi_iou_threshold = 0.5;
  double detection_score_threshold = 0.5;
  int max_detections_per_image = 8;
  std::string backbone_id = "mini-s2";
  std::uint64_t random_seed = 42;
  double mask_threshold = 0.5;
  double min_detection_score = 0.05;  // candidates below this are never returned

  /// Throws ConfigError on any invariant violation. `for_training` also requires epochs >= 1.
  void validate(bool for_training = false) const;
  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
  /// SHA-256 over the canonical JSON form.
  std::string digest() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Per-channel pixel scaling declared by a pretrained weights manifest:
/// x = (v / 255 - mean) / std.
struct Normalization {
  std::array<float, 3> mean{0.3f, 0.3f, 0.3f};
  std::array<float, 3> std{0.25f, 0.25f, 0.25f};

  friend bool operator==(const Normalization&, const Normalization&) = default;
};

/// Layer widths of a registered backbone.
struct Architecture {
  std::string backbone_id;
  int conv1 = 16, conv2 = 32, conv3 = 32;
  int rpn_channels = 32;
  int fc_units = 128;
  int mask_channels = 32;
  int stride = 2;
  int pool_size = 7;
  int mask_size = 14;
  std::vector<double> anchor_sizes{8.0, 16.0, 32.0};

  int anchors_per_cell() const { return static_cast<int>(anchor_sizes.size()); }
  /// Tensor name -> shape for every parameter. Head shapes depend on num_classes.
  std::map<std::string, std::vector<int>> tensor_shapes(int num_classes) const;
  /// Names of the class-dependent head tensors re-initialised when heads are excluded.
  static bool is_head_tensor(const std::string& name);
};

/// Throws ConfigError for unknown ids.
const Architecture& find_architecture(const std::string& backbone_id);
std::vector<std::string> registered_backbones();

enum class ModelMode { training, inference };

class Model : public Predictor {
 public:
  /// Fresh model with every tensor drawn from the seeded generator.
  static Model random(const ModelConfig& config, Normalization norm = {});

  const ModelConfig& config() const noexcept { return config_; }
  const Architecture& architecture() const noexcept { return *arch_; }
  const Normalization& normalization() const noexcept { return norm_; }
  const nn::ParamSet<float>& params() const noexcept { return params_; }
  nn::ParamSet<float>& params() noexcept { return params_; }
  ModelMode mode() const noexcept { return mode_; }
  void set_mode(ModelMode m) noexcept { mode_ = m; }

  /// Detections sorted by descending score, at most max_detections_per_image.
  /// Requires inference mode.
  std::vector<Detection> predict(const Image& image) const override;

 private:
  friend Model build_model(const ModelConfig&, const std::filesystem::path&, bool);
  friend Model load_inference_model(const std::filesystem::path&, const ModelConfig&);
  friend struct ModelAccess;
  Model(ModelConfig config, Normalization norm);

  ModelConfig config_;
  const Architecture* arch_;
  Normalization norm_;
  nn::ParamSet<float> params_;
  ModelMode mode_ = ModelMode::training;
};

/// Loads `weights_path` after checking it against its manifest
/// (`<weights_path>.json`). With `exclude_heads` the class/box/mask heads are
/// re-initialised from config.random_seed instead of being read.
Model build_model(const ModelConfig& config, const std::filesystem::path& weights_path, bool exclude_heads);

/// Writes `<path>` and the `<path>.json` shape manifest.
void save_pretrained(const Model& model, const std::filesystem::path& path);
std::filesystem::path manifest_path_for(const std::filesystem::path& weights_path);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  std::optional<double> val_loss;

  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct TrainingHistory {
  std::vector<EpochRecord> epochs;

  friend bool operator==(const TrainingHistory&, const TrainingHistory&) = default;
};

/// `epoch,train_loss,val_loss` with six decimals; empty val_loss when absent.
std::string history_csv(const TrainingHistory& history);
TrainingHistory parse_history_csv(const std::string& text);

struct TrainOptions {
  std::ostream* log = nullptr;  // one progress line per epoch when set
};

/// Written into run_dir when a checkpoint cannot be saved; the run is incomplete.
inline constexpr const char* kPartialMarker = "PARTIAL";

/// Trains in place, writing checkpoint_<epoch:03d>.weights, history.csv and
/// config.json into run_dir. Region supervision keeps proposals whose IoU with
/// a ground-truth box is strictly above config.roi_iou_threshold.
TrainingHistory train(Model& model, const Dataset& train_set, const Dataset& validation_set,
                      const ModelConfig& config, const std::filesystem::path& run_dir, const TrainOptions& options = {});

/// Weighted sum of the five training losses on one scan, without updating.
double evaluate_loss(const Model& model, const ScanRecord& scan, std::uint64_t seed);

struct CheckpointInfo {
  int epoch_index = 0;
  std::filesystem::path weights_ref;
  double train_loss = 0.0;
  std::optional<double> val_loss;
  std::string created_at;
  std::string config_digest;
};

/// Checkpoints in run_dir ordered by epoch.
std::vector<CheckpointInfo> list_checkpoints(const std::filesystem::path& run_dir);

/// Reloads the checkpoint with the highest epoch in inference mode.
Model load_inference_model(const std::filesystem::path& run_dir, const ModelConfig& config);

/// Generic-shapes pretext task that stands in for a pretrained backbone:
/// rectangles, triangles and ellipses on a noisy background, one class each.
struct PretrainOptions {
  std::string backbone_id = "mini-s2";
  int input_size = 64;
  std::size_t scans = 120;
  int epochs = 4;
  std::uint64_t seed = 1234;
  Normalization normalization;
};
inline constexpr int kPretrainClasses = 4;  // background + three shapes

/// Shape scans with one mask per shape; `classes` receives 1..3 per mask.
std::vector<std::pair<ScanRecord, std::vector<int>>> generate_shapes(std::size_t n, std::uint64_t seed, int size);

/// Trains a full detector on generated shapes. Pair with save_pretrained.
Model pretrain(const PretrainOptions& options, std::ostream* log = nullptr);

/// Reads run_dir/config.json.
ModelConfig read_run_config(const std::filesystem::path& run_dir);

struct Diagnosis {
  Label label = Label::no_tumor;
  double confidence = 1.0;
  std::vector<Detection> detections;  // those with score >= threshold
};

/// Tumor when any detection reaches `threshold`; confidence is then the best
/// score, otherwise 1 - best sub-threshold score (1.0 with no candidates).
Diagnosis diagnose(const std::vector<Detection>& detections, double threshold);

/// Serialises access to one predictor: jobs run one at a time on a dedicated
/// worker thread, in submission order.
class InferenceQueue {
 public:
  explicit InferenceQueue(std::shared_ptr<const Predictor> predictor);
  ~InferenceQueue();
  InferenceQueue(const InferenceQueue&) = delete;
  InferenceQueue& operator=(const InferenceQueue&) = delete;

  std::future<std::vector<Detection>> predict(Image image);
  /// Runs an arbitrary job with exclusive access to the predictor.
  void post(std::function<void(const Predictor&)> job);
  /// Blocks until every job submitted so far has finished.
  void drain();

 private:
  void run();

  std::shared_ptr<const Predictor> predictor_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable idle_cv_;
  std::deque<std::function<void()>> jobs_;
  bool busy_ = false;
  bool stop_ = false;
  std::thread worker_;
};

}  // namespace tumorseg
