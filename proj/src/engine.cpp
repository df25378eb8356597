#include "tumorseg/engine.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <ctime>
#include <cmath>
#include <fstream>
#include <regex>
#include <sstream>

#include <json.hpp>
#include <openssl/evp.h>

#include "model_access.hpp"
#include "network.hpp"
#include "weights_io.hpp"

namespace tumorseg {

using json = nlohmann::json;
namespace fs = std::filesystem;

// --- ModelConfig ------------------------------------------------------------

void ModelConfig::validate(bool for_training) const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (num_classes < 2) fail("num_classes must be >= 2");
  if (input_size < kMinImageSide || input_size > 1024 || input_size % 2 != 0)
    fail("input_size must be an even number in [16, 1024]");
  if (epochs < 0 || (for_training && epochs < 1)) fail("epochs must be >= 1 for training");
  if (steps_per_epoch < 0) fail("steps_per_epoch must be >= 0");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) fail("learning_rate must be positive");
  if (!(roi_iou_threshold > 0.0 && roi_iou_threshold < 1.0)) fail("roi_iou_threshold must be in (0, 1)");
  if (!(detection_score_threshold >= 0.0 && detection_score_threshold <= 1.0))
    fail("detection_score_threshold must be in [0, 1]");
  if (max_detections_per_image < 1) fail("max_detections_per_image must be >= 1");
  if (!(mask_threshold > 0.0 && mask_threshold < 1.0)) fail("mask_threshold must be in (0, 1)");
  if (!(min_detection_score >= 0.0 && min_detection_score <= 1.0)) fail("min_detection_score must be in [0, 1]");
  find_architecture(backbone_id);
}

namespace {

json config_to_json(const ModelConfig& c) {
  return json{{"num_classes", c.num_classes},
              {"input_size", c.input_size},
              {"epochs", c.epochs},
              {"steps_per_epoch", c.steps_per_epoch},
              {"learning_rate", c.learning_rate},
              {"roi_iou_threshold", c.roi_iou_threshold},
              {"detection_score_threshold", c.detection_score_threshold},
              {"max_detections_per_image", c.max_detections_per_image},
              {"backbone_id", c.backbone_id},
              {"random_seed", c.random_seed},
              {"mask_threshold", c.mask_threshold},
              {"min_detection_score", c.min_detection_score}};
}

template <typename T>
void read_field(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("model config: field '") + key + "' has the wrong type");
  }
}

std::string sha256_hex(const std::string& text) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(text.data(), text.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256: digest failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

std::string ModelConfig::to_json() const { return config_to_json(*this).dump(2); }

ModelConfig ModelConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("model config: invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("model config: expected a JSON object");
  ModelConfig c;
  const json known = config_to_json(c);
  for (const auto& [key, value] : j.items())
    if (!known.contains(key)) throw ConfigError("model config: unknown field '" + key + "'");
  read_field(j, "num_classes", c.num_classes);
  read_field(j, "input_size", c.input_size);
  read_field(j, "epochs", c.epochs);
  read_field(j, "steps_per_epoch", c.steps_per_epoch);
  read_field(j, "learning_rate", c.learning_rate);
  read_field(j, "roi_iou_threshold", c.roi_iou_threshold);
  read_field(j, "detection_score_threshold", c.detection_score_threshold);
  read_field(j, "max_detections_per_image", c.max_detections_per_image);
  read_field(j, "backbone_id", c.backbone_id);
  read_field(j, "random_seed", c.random_seed);
  read_field(j, "mask_threshold", c.mask_threshold);
  read_field(j, "min_detection_score", c.min_detection_score);
  return c;
}

std::string ModelConfig::digest() const { return sha256_hex(config_to_json(*this).dump()); }

// --- architectures ------------------------------------------------------------

std::map<std::string, std::vector<int>> Architecture::tensor_shapes(int K) const {
  const int A = anchors_per_cell();
  std::map<std::string, std::vector<int>> s;
  auto conv = [&](const std::string& name, int out, int in, int k) {
    s[name + ".weight"] = {out, in, k, k};
    s[name + ".bias"] = {out};
  };
  auto fc = [&](const std::string& name, int out, int in) {
    s[name + ".weight"] = {out, in};
    s[name + ".bias"] = {out};
  };
  conv("backbone.conv1", conv1, 3, 3);
  conv("backbone.conv2", conv2, conv1, 3);
  conv("backbone.conv3", conv3, conv2, 3);
  conv("rpn.conv", rpn_channels, conv3, 3);
  conv("rpn.cls", A, rpn_channels, 1);
  conv("rpn.bbox", 4 * A, rpn_channels, 1);
  fc("head.fc", fc_units, conv3 * pool_size * pool_size);
  fc("head.cls", K, fc_units);
  fc("head.bbox", 4 * K, fc_units);
  conv("mask.conv1", mask_channels, conv3, 3);
  conv("mask.conv2", mask_channels, mask_channels, 3);
  conv("mask.logits", K, mask_channels, 1);
  return s;
}

bool Architecture::is_head_tensor(const std::string& name) {
  return name.rfind("head.", 0) == 0 || name.rfind("mask.", 0) == 0;
}

namespace {

const std::vector<Architecture>& registry() {
  static const std::vector<Architecture> archs = [] {
    Architecture mini;
    mini.backbone_id = "mini-s2";
    Architecture micro;
    micro.backbone_id = "micro-s2";
    micro.conv1 = 8;
    micro.conv2 = 16;
    micro.conv3 = 16;
    micro.rpn_channels = 16;
    micro.fc_units = 64;
    micro.mask_channels = 16;
    return std::vector<Architecture>{mini, micro};
  }();
  return archs;
}

}  // namespace

const Architecture& find_architecture(const std::string& backbone_id) {
  for (const auto& a : registry())
    if (a.backbone_id == backbone_id) return a;
  throw ConfigError("unknown backbone_id '" + backbone_id + "'");
}

std::vector<std::string> registered_backbones() {
  std::vector<std::string> ids;
  for (const auto& a : registry()) ids.push_back(a.backbone_id);
  return ids;
}

// --- model ------------------------------------------------------------------

Model::Model(ModelConfig config, Normalization norm)
    : config_(std::move(config)), arch_(&find_architecture(config_.backbone_id)), norm_(norm) {
  for (const auto& [name, shape] : arch_->tensor_shapes(config_.num_classes)) params_.emplace(name, nn::Tensor<float>(shape));
}

namespace {

void init_params(Model& m, std::uint64_t seed, bool heads_only) {
  Rng rng(seed);
  for (auto& [name, t] : m.params()) {
    // Every tensor consumes draws so head values do not depend on heads_only.
    nn::Tensor<float> fresh(t.shape);
    detail::init_tensor(name, fresh, m.config().num_classes, rng);
    if (!heads_only || Architecture::is_head_tensor(name)) t = std::move(fresh);
  }
}

json normalization_json(const Normalization& n) { return {{"mean", n.mean}, {"std", n.std}}; }

Normalization normalization_from(const json& j, const std::string& context) {
  Normalization n;
  try {
    n.mean = j.at("mean").get<std::array<float, 3>>();
    n.std = j.at("std").get<std::array<float, 3>>();
  } catch (const json::exception&) {
    throw IncompatibleError(context + ": malformed normalization block");
  }
  for (float s : n.std)
    if (!(s > 0.0f)) throw IncompatibleError(context + ": normalization std must be positive");
  return n;
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError(path.string() + ": not found");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw IoError(path.string() + ": invalid JSON: " + e.what());
  }
}

std::vector<int> shape_of(const json& j) {
  try {
    return j.get<std::vector<int>>();
  } catch (const json::exception&) {
    return {};
  }
}

}  // namespace

Model Model::random(const ModelConfig& config, Normalization norm) {
  config.validate();
  Model m(config, norm);
  init_params(m, config.random_seed, false);
  return m;
}

std::vector<Detection> Model::predict(const Image& image) const {
  if (mode_ != ModelMode::inference) throw ConfigError("predict requires a model in inference mode");
  validate_image(image);
  const auto in = detail::prepare_input(image, norm_, config_.input_size);
  std::vector<Detection> out;
  for (const auto& raw : detail::infer(*this, in)) {
    Detection d;
    d.score = raw.score;
    d.mask = detail::paste_mask(raw, in, arch_->mask_size, config_.mask_threshold);
    if (d.mask.empty()) continue;
    d.box = derive_box_from_mask(d.mask);
    out.push_back(std::move(d));
  }
  std::stable_sort(out.begin(), out.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  if (out.size() > static_cast<std::size_t>(config_.max_detections_per_image))
    out.resize(static_cast<std::size_t>(config_.max_detections_per_image));
  return out;
}

fs::path manifest_path_for(const fs::path& weights_path) {
  auto p = weights_path;
  p += ".json";
  return p;
}

void save_pretrained(const Model& model, const fs::path& path) {
  json tensors = json::object();
  for (const auto& [name, t] : model.params()) tensors[name] = t.shape;
  const json meta{{"kind", "pretrained"},
                  {"backbone_id", model.config().backbone_id},
                  {"num_classes", model.config().num_classes}};
  detail::write_weights(path, meta.dump(), model.params());
  const json manifest{{"backbone_id", model.config().backbone_id},
                      {"normalization", normalization_json(model.normalization())},
                      {"tensors", tensors}};
  std::ofstream out(manifest_path_for(path));
  out << manifest.dump(2) << '\n';
  if (!out) throw IoError(manifest_path_for(path).string() + ": write failed");
}

Model build_model(const ModelConfig& config, const fs::path& weights_path, bool exclude_heads) {
  config.validate();
  const Architecture& arch = find_architecture(config.backbone_id);
  if (!fs::exists(weights_path)) throw NotFoundError(weights_path.string() + ": pretrained weights not found");
  const auto manifest_path = manifest_path_for(weights_path);
  const json manifest = read_json_file(manifest_path);
  if (!manifest.contains("tensors") || !manifest["tensors"].is_object())
    throw IncompatibleError(manifest_path.string() + ": manifest has no tensors table");
  const json& declared = manifest["tensors"];

  // The manifest must declare every tensor we are going to read, with our shape.
  std::vector<std::string> problems;
  const auto expected = arch.tensor_shapes(config.num_classes);
  for (const auto& [name, shape] : expected) {
    if (exclude_heads && Architecture::is_head_tensor(name)) continue;
    if (!declared.contains(name)) {
      problems.push_back(name + " missing (expected " + nn::shape_string(shape) + ")");
      continue;
    }
    const auto got = shape_of(declared[name]);
    if (got != shape)
      problems.push_back(name + " expected " + nn::shape_string(shape) + ", manifest declares " + nn::shape_string(got));
  }
  if (!problems.empty()) {
    std::string msg = "pretrained weights do not fit backbone '" + config.backbone_id + "': tensor shape mismatch: ";
    for (std::size_t i = 0; i < problems.size(); ++i) msg += (i ? "; " : "") + problems[i];
    throw IncompatibleError(msg);
  }

  const Normalization norm =
      manifest.contains("normalization") ? normalization_from(manifest["normalization"], manifest_path.string())
                                         : Normalization{};
  auto file = detail::read_weights(weights_path);
  Model m(config, norm);
  init_params(m, config.random_seed, false);
  for (auto& [name, t] : m.params()) {
    if (exclude_heads && Architecture::is_head_tensor(name)) continue;
    auto it = file.tensors.find(name);
    if (it == file.tensors.end()) throw IncompatibleError(weights_path.string() + ": tensor " + name + " missing from file");
    if (it->second.shape != t.shape)
      throw IncompatibleError(weights_path.string() + ": tensor " + name + " has shape " +
                              nn::shape_string(it->second.shape) + " but its manifest declares " +
                              nn::shape_string(t.shape));
    t = std::move(it->second);
  }
  return m;
}

// --- history ----------------------------------------------------------------

std::string history_csv(const TrainingHistory& history) {
  std::string out = "epoch,train_loss,val_loss\n";
  char buf[64];
  for (const auto& e : history.epochs) {
    std::snprintf(buf, sizeof buf, "%d,%.6f,", e.epoch, e.train_loss);
    out += buf;
    if (e.val_loss) {
      std::snprintf(buf, sizeof buf, "%.6f", *e.val_loss);
      out += buf;
    }
    out += '\n';
  }
  return out;
}

TrainingHistory parse_history_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "epoch,train_loss,val_loss")
    throw ValidationError("history csv: bad header");
  TrainingHistory h;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto c1 = line.find(','), c2 = line.find(',', c1 == std::string::npos ? c1 : c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos)
      throw ValidationError("history csv: line " + std::to_string(lineno) + " needs three fields");
    EpochRecord r;
    try {
      r.epoch = std::stoi(line.substr(0, c1));
      r.train_loss = std::stod(line.substr(c1 + 1, c2 - c1 - 1));
      const auto v = line.substr(c2 + 1);
      if (!v.empty()) r.val_loss = std::stod(v);
    } catch (const std::logic_error&) {
      throw ValidationError("history csv: line " + std::to_string(lineno) + " is not numeric");
    }
    h.epochs.push_back(r);
  }
  return h;
}

// --- checkpoints ------------------------------------------------------------

std::vector<CheckpointInfo> list_checkpoints(const fs::path& run_dir) {
  std::vector<CheckpointInfo> out;
  std::error_code ec;
  if (!fs::is_directory(run_dir, ec)) return out;
  static const std::regex pattern(R"(checkpoint_(\d{3,})\.weights)");
  for (const auto& entry : fs::directory_iterator(run_dir)) {
    std::smatch m;
    const std::string name = entry.path().filename().string();
    if (!entry.is_regular_file() || !std::regex_match(name, m, pattern)) continue;
    const json meta = json::parse(detail::read_weights_meta(entry.path()), nullptr, false);
    if (meta.is_discarded()) throw IoError(entry.path().string() + ": corrupt checkpoint header");
    CheckpointInfo info;
    info.epoch_index = std::stoi(m[1].str());
    info.weights_ref = entry.path();
    info.train_loss = meta.value("train_loss", 0.0);
    if (meta.contains("val_loss") && meta["val_loss"].is_number()) info.val_loss = meta["val_loss"].get<double>();
    info.created_at = meta.value("created_at", "");
    info.config_digest = meta.value("config_digest", "");
    out.push_back(std::move(info));
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.epoch_index < b.epoch_index; });
  return out;
}

namespace detail {

void write_checkpoint(const Model& model, const fs::path& run_dir, const EpochRecord& record) {
  char name[64];
  std::snprintf(name, sizeof name, "checkpoint_%03d.weights", record.epoch);
  json meta{{"kind", "checkpoint"},
            {"epoch_index", record.epoch},
            {"train_loss", record.train_loss},
            {"val_loss", record.val_loss ? json(*record.val_loss) : json(nullptr)},
            {"created_at", utc_now()},
            {"config_digest", model.config().digest()},
            {"backbone_id", model.config().backbone_id},
            {"normalization", normalization_json(model.normalization())}};
  write_weights(run_dir / name, meta.dump(), model.params());
}

void write_run_config(const ModelConfig& config, const fs::path& run_dir) {
  const json doc{{"config", config_to_json(config)}, {"digest", config.digest()}};
  std::ofstream out(run_dir / "config.json");
  out << doc.dump(2) << '\n';
  if (!out) throw IoError((run_dir / "config.json").string() + ": write failed");
}

}  // namespace detail

ModelConfig read_run_config(const fs::path& run_dir) {
  const json doc = read_json_file(run_dir / "config.json");
  if (!doc.contains("config")) throw ConfigError((run_dir / "config.json").string() + ": missing 'config'");
  auto config = ModelConfig::from_json(doc["config"].dump());
  config.validate();
  return config;
}

Model load_inference_model(const fs::path& run_dir, const ModelConfig& config) {
  config.validate();
  const auto checkpoints = list_checkpoints(run_dir);
  if (checkpoints.empty()) throw NotFoundError("no checkpoints in " + run_dir.string());
  const auto& latest = checkpoints.back();
  const std::string want = config.digest();
  if (latest.config_digest != want)
    throw IncompatibleError("checkpoint " + latest.weights_ref.filename().string() + " has config digest " +
                            latest.config_digest + " but the requested config digest is " + want);
  auto file = detail::read_weights(latest.weights_ref);
  const json meta = json::parse(file.meta);
  const Normalization norm = meta.contains("normalization")
                                 ? normalization_from(meta["normalization"], latest.weights_ref.string())
                                 : Normalization{};
  Model m(config, norm);
  for (auto& [name, t] : m.params()) {
    auto it = file.tensors.find(name);
    if (it == file.tensors.end() || it->second.shape != t.shape)
      throw IncompatibleError(latest.weights_ref.string() + ": tensor " + name + " missing or misshapen");
    t = std::move(it->second);
  }
  m.set_mode(ModelMode::inference);
  return m;
}

// --- diagnosis --------------------------------------------------------------

Diagnosis diagnose(const std::vector<Detection>& detections, double threshold) {
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw ConfigError("diagnose: threshold must be in [0, 1]");
  Diagnosis d;
  double best_below = -1.0;
  for (const auto& det : detections) {
    if (det.score >= threshold)
      d.detections.push_back(det);
    else
      best_below = std::max(best_below, det.score);
  }
  std::stable_sort(d.detections.begin(), d.detections.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  if (!d.detections.empty()) {
    d.label = Label::tumor;
    d.confidence = d.detections.front().score;
  } else {
    d.label = Label::no_tumor;
    d.confidence = best_below < 0.0 ? 1.0 : 1.0 - best_below;
  }
  return d;
}

// --- inference queue ----------------------------------------------------------

InferenceQueue::InferenceQueue(std::shared_ptr<const Predictor> predictor) : predictor_(std::move(predictor)) {
  if (!predictor_) throw ConfigError("InferenceQueue: null predictor");
  worker_ = std::thread([this] { run(); });
}

InferenceQueue::~InferenceQueue() {
  {
    std::lock_guard lock(mu_);
    stop_ = true;
  }
  cv_.notify_all();
  worker_.join();
}

std::future<std::vector<Detection>> InferenceQueue::predict(Image image) {
  auto task = std::make_shared<std::packaged_task<std::vector<Detection>()>>(
      [p = predictor_, img = std::move(image)] { return p->predict(img); });
  auto fut = task->get_future();
  {
    std::lock_guard lock(mu_);
    jobs_.emplace_back([task] { (*task)(); });
  }
  cv_.notify_one();
  return fut;
}

void InferenceQueue::post(std::function<void(const Predictor&)> job) {
  {
    std::lock_guard lock(mu_);
    jobs_.emplace_back([p = predictor_, job = std::move(job)] { job(*p); });
  }
  cv_.notify_one();
}

void InferenceQueue::drain() {
  std::unique_lock lock(mu_);
  idle_cv_.wait(lock, [this] { return jobs_.empty() && !busy_; });
}

void InferenceQueue::run() {
  for (;;) {
    std::function<void()> job;
    {
      std::unique_lock lock(mu_);
      cv_.wait(lock, [this] { return stop_ || !jobs_.empty(); });
      if (jobs_.empty()) return;  // stopping with nothing left
      job = std::move(jobs_.front());
      jobs_.pop_front();
      busy_ = true;
    }
    try {
      job();
    } catch (...) {
      // Posted jobs report their own failures; packaged tasks carry theirs in the future.
    }
    {
      std::lock_guard lock(mu_);
      busy_ = false;
    }
    idle_cv_.notify_all();
  }
}

}  // namespace tumorseg
