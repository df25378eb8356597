#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>

#include <opencv2/imgproc.hpp>

#include "model_access.hpp"
#include "network.hpp"
#include "tumorseg/engine.hpp"

namespace tumorseg {

namespace fs = std::filesystem;

namespace {

constexpr double kPi = 3.141592653589793;
constexpr double kFinalLrFraction = 0.1;

using EpochHook = std::function<void(const EpochRecord&)>;

// Adam with cosine decay from learning_rate to kFinalLrFraction * learning_rate.
TrainingHistory fit(Model& model, const std::vector<detail::TrainSample>& train,
                    const std::vector<detail::TrainSample>& val, const ModelConfig& cfg, std::ostream* log,
                    const EpochHook& on_epoch) {
  Rng order_rng(cfg.random_seed ^ 0x9e3779b97f4a7c15ULL);
  Rng sample_rng(cfg.random_seed + 1);
  nn::Adam<float> opt;
  const std::size_t n = train.size();
  const long steps = cfg.steps_per_epoch > 0 ? cfg.steps_per_epoch : static_cast<long>(n);
  const double total = static_cast<double>(steps) * cfg.epochs;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = n;
  long t = 0;

  TrainingHistory history;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double sum = 0.0;
    for (long s = 0; s < steps; ++s, ++t) {
      if (cursor == n) {
        order_rng.shuffle(std::span<std::size_t>(order));
        cursor = 0;
      }
      const auto& sample = train[order[cursor++]];
      auto grads = nn::zeros_like(model.params());
      sum += detail::train_step(model, sample, sample_rng, &grads).total();
      const double decay = 0.5 * (1.0 + std::cos(kPi * static_cast<double>(t) / total));
      opt.step(model.params(), grads, cfg.learning_rate * (kFinalLrFraction + (1.0 - kFinalLrFraction) * decay));
    }
    EpochRecord rec{epoch, sum / static_cast<double>(steps), std::nullopt};
    if (!val.empty()) {
      double vsum = 0.0;
      for (std::size_t i = 0; i < val.size(); ++i) {
        Rng r(cfg.random_seed + 7919 + i);
        vsum += detail::train_step(model, val[i], r, nullptr).total();
      }
      rec.val_loss = vsum / static_cast<double>(val.size());
    }
    history.epochs.push_back(rec);
    if (log) {
      *log << "epoch " << epoch << "/" << cfg.epochs << " train_loss " << rec.train_loss;
      if (rec.val_loss) *log << " val_loss " << *rec.val_loss;
      *log << std::endl;
    }
    if (on_epoch) on_epoch(rec);
  }
  return history;
}

void check_scans(const Dataset& set, const std::string& which, std::vector<std::string>& problems) {
  for (const auto& scan : set.scans) {
    if (!scan.ground_truth)
      problems.push_back(which + " scan " + scan.scan_id + " has no ground truth");
    else if (scan.ground_truth->label == Label::tumor && scan.ground_truth->masks.empty())
      problems.push_back(which + " scan " + scan.scan_id + " is labeled tumor but has no masks");
  }
}

detail::TrainSample to_sample(const ScanRecord& scan, const Model& model) {
  if (!scan.ground_truth) throw DataError("scan " + scan.scan_id + " has no ground truth");
  const auto& masks = scan.ground_truth->masks;
  return detail::prepare_sample(scan.image, masks, std::vector<int>(masks.size(), 1), model.normalization(),
                                model.config().input_size);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  out.flush();
  if (!out) throw IoError(path.string() + ": write failed");
}

}  // namespace

TrainingHistory train(Model& model, const Dataset& train_set, const Dataset& validation_set, const ModelConfig& config,
                      const fs::path& run_dir, const TrainOptions& options) {
  config.validate(true);
  if (config.backbone_id != model.config().backbone_id || config.num_classes != model.config().num_classes)
    throw ConfigError("train: config backbone/num_classes differ from the model being trained");

  std::vector<std::string> problems;
  if (train_set.empty()) problems.push_back("training set is empty");
  check_scans(train_set, "training", problems);
  check_scans(validation_set, "validation", problems);
  if (!problems.empty()) throw DataError(problems);

  std::error_code ec;
  fs::create_directories(run_dir, ec);
  if (ec || !fs::is_directory(run_dir)) throw IoError(run_dir.string() + ": cannot create run directory");
  if (!list_checkpoints(run_dir).empty())
    throw IoError(run_dir.string() + ": already contains checkpoints; use a fresh run directory");
  fs::remove(run_dir / kPartialMarker, ec);

  ModelAccess::set_config(model, config);
  model.set_mode(ModelMode::training);
  detail::write_run_config(config, run_dir);

  std::vector<detail::TrainSample> samples, val;
  for (const auto& s : train_set.scans) samples.push_back(to_sample(s, model));
  for (const auto& s : validation_set.scans) val.push_back(to_sample(s, model));

  TrainingHistory so_far;
  return fit(model, samples, val, config, options.log, [&](const EpochRecord& rec) {
    so_far.epochs.push_back(rec);
    try {
      detail::write_checkpoint(model, run_dir, rec);
      write_text(run_dir / "history.csv", history_csv(so_far));
    } catch (const Error& e) {
      std::ofstream marker(run_dir / kPartialMarker);
      marker << "training aborted at epoch " << rec.epoch << ": " << e.what() << '\n';
      throw IoError("checkpoint for epoch " + std::to_string(rec.epoch) + " failed, run marked partial: " + e.what());
    }
  });
}

double evaluate_loss(const Model& model, const ScanRecord& scan, std::uint64_t seed) {
  Rng rng(seed);
  return detail::train_step(model, to_sample(scan, model), rng, nullptr).total();
}

// --- pretext task -------------------------------------------------------------

std::vector<std::pair<ScanRecord, std::vector<int>>> generate_shapes(std::size_t n, std::uint64_t seed, int size) {
  if (size < kMinImageSide) throw ConfigError("generate_shapes: size must be >= 16");
  Rng rng(seed);
  std::vector<std::pair<ScanRecord, std::vector<int>>> out;
  const double min_half = std::max(3.0, size / 16.0), max_half = std::max(min_half + 1.0, size / 5.0);
  for (std::size_t i = 0; i < n; ++i) {
    Image img(size, size, 1);
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(15 + rng.uniform_int(0, 45));
    BinaryMask occupied(size, size);
    std::vector<BinaryMask> masks;
    std::vector<int> classes;
    const int want = static_cast<int>(rng.uniform_int(1, 3));
    for (int attempt = 0; attempt < 30 && static_cast<int>(masks.size()) < want; ++attempt) {
      const int cls = static_cast<int>(rng.uniform_int(1, 3));
      const double hr = rng.uniform(min_half, max_half), hc = rng.uniform(min_half, max_half);
      const double cr = rng.uniform(hr + 1, size - hr - 1), cc = rng.uniform(hc + 1, size - hc - 1);
      BinaryMask m;
      if (cls == 1) {
        m = rasterize_box(Box{static_cast<int>(cr - hr), static_cast<int>(cc - hc), static_cast<int>(cr + hr),
                              static_cast<int>(cc + hc)},
                          size, size);
      } else if (cls == 2) {
        cv::Mat canvas = cv::Mat::zeros(size, size, CV_8U);
        const double turn = rng.uniform(0.0, 2 * kPi);
        std::vector<cv::Point> pts;
        for (int k = 0; k < 3; ++k) {
          const double a = turn + k * 2 * kPi / 3;
          pts.emplace_back(static_cast<int>(std::lround(cc + hc * std::cos(a))),
                           static_cast<int>(std::lround(cr + hr * std::sin(a))));
        }
        cv::fillConvexPoly(canvas, pts, cv::Scalar(1));
        m = BinaryMask(size, size);
        std::copy(canvas.datastart, canvas.dataend, m.data.begin());
      } else {
        m = rasterize_ellipse(size, size, cr, cc, hr, hc, rng.uniform(0.0, kPi));
      }
      if (m.count() < 6) continue;
      // Keep shapes apart so every instance stays a single region.
      bool clash = false;
      for (int r = 0; r < size && !clash; ++r)
        for (int c = 0; c < size && !clash; ++c) {
          if (!m.at(r, c)) continue;
          for (int dr = -2; dr <= 2 && !clash; ++dr)
            for (int dc = -2; dc <= 2 && !clash; ++dc) {
              const int rr = r + dr, cc2 = c + dc;
              if (rr >= 0 && rr < size && cc2 >= 0 && cc2 < size && occupied.at(rr, cc2)) clash = true;
            }
        }
      if (clash) continue;
      const int level = static_cast<int>(rng.uniform_int(110, 250));
      for (int r = 0; r < size; ++r)
        for (int c = 0; c < size; ++c)
          if (m.at(r, c)) {
            occupied.at(r, c) = 1;
            img.at(r, c) = static_cast<std::uint8_t>(std::min<std::int64_t>(255, level + rng.uniform_int(-5, 5)));
          }
      masks.push_back(std::move(m));
      classes.push_back(cls);
    }
    char id[32];
    std::snprintf(id, sizeof id, "shape_%04zu", i);
    ScanRecord rec{id, std::nullopt, std::move(img), GroundTruth::from_masks(Label::tumor, std::move(masks))};
    out.emplace_back(std::move(rec), std::move(classes));
  }
  return out;
}

Model pretrain(const PretrainOptions& options, std::ostream* log) {
  ModelConfig cfg;
  cfg.backbone_id = options.backbone_id;
  cfg.num_classes = kPretrainClasses;
  cfg.input_size = options.input_size;
  cfg.epochs = options.epochs;
  cfg.random_seed = options.seed;
  cfg.validate(true);
  if (options.scans == 0) throw ConfigError("pretrain: scans must be >= 1");
  Model model = Model::random(cfg, options.normalization);
  std::vector<detail::TrainSample> samples;
  for (const auto& [scan, classes] : generate_shapes(options.scans, options.seed, options.input_size))
    samples.push_back(detail::prepare_sample(scan.image, scan.ground_truth->masks, classes, model.normalization(),
                                             cfg.input_size));
  fit(model, samples, {}, cfg, log, {});
  return model;
}

}  // namespace tumorseg
