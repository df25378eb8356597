#include "tumorseg/cli.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "tumorseg/data.hpp"
#include "tumorseg/engine.hpp"
#include "tumorseg/metrics.hpp"
#include "tumorseg/reporting.hpp"
#include "tumorseg/service.hpp"

namespace tumorseg {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path.string() + ": cannot open for writing");
  out << text;
  out.flush();
  if (!out) throw IoError(path.string() + ": write failed");
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError(dir.string() + ": cannot create directory");
}

/// Config file first, then key=value overrides. Values are parsed as JSON
/// when possible so numbers stay numbers.
ModelConfig assemble_config(const std::string& file, const std::vector<std::string>& overrides) {
  json j = file.empty() ? json::parse(ModelConfig{}.to_json()) : json::parse(read_text(file), nullptr, false);
  if (j.is_discarded()) throw ConfigError(file + ": invalid JSON");
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + kv + "' is not key=value");
    const auto key = kv.substr(0, eq), value = kv.substr(eq + 1);
    const json parsed = json::parse(value, nullptr, false);
    j[key] = parsed.is_discarded() ? json(value) : parsed;
  }
  return ModelConfig::from_json(j.dump());
}

json split_json(const DatasetSplit& s) {
  return json{{"seed", s.seed},
              {"ratios", {s.ratios.train, s.ratios.validation, s.ratios.test}},
              {"train", s.train},
              {"validation", s.validation},
              {"test", s.test}};
}

json diagnosis_json(const Diagnosis& d, const std::string& overlay) {
  json dets = json::array();
  for (const auto& det : d.detections)
    dets.push_back({{"box", {det.box.r0, det.box.c0, det.box.r1, det.box.c1}},
                    {"class_label", std::string(to_string(det.class_label))},
                    {"score", det.score},
                    {"area", det.mask.count()}});
  return json{{"label", std::string(to_string(d.label))},
              {"answer", std::string(manifest_label(d.label))},
              {"confidence", d.confidence},
              {"detections", dets},
              {"overlay", overlay}};
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::size_t n = 0;
  std::uint64_t seed = 7;
  std::string out;
  std::string layout = "mask_dirs";
  int rows = 64, cols = 64;
};

int cmd_synth(const SynthArgs& a, std::ostream& out) {
  if (a.n == 0) throw ConfigError("--n must be >= 1");
  SyntheticParams params;
  params.rows = a.rows;
  params.cols = a.cols;
  const Dataset ds = generate_synthetic_dataset(a.n, a.seed, params);
  if (parse_layout(a.layout) == Layout::mask_dirs)
    save_mask_dirs(ds, a.out);
  else
    save_annotation_json(ds, a.out);
  out << "wrote " << ds.size() << " scans (" << ds.count(Label::tumor) << " tumor, " << ds.count(Label::no_tumor)
      << " no_tumor) to " << a.out << "\n";
  return kExitOk;
}

struct PretrainArgs {
  std::string out;
  PretrainOptions opts;
};

int cmd_pretrain(const PretrainArgs& a, std::ostream& out, std::ostream& err) {
  const fs::path path(a.out);
  if (path.has_parent_path()) ensure_dir(path.parent_path());
  const Model m = pretrain(a.opts, &err);
  save_pretrained(m, path);
  out << "wrote " << path.string() << " and " << manifest_path_for(path).string() << "\n";
  return kExitOk;
}

struct TrainArgs {
  std::string data, run_dir, weights, config_file, layout = "mask_dirs";
  std::vector<std::string> overrides;
  std::optional<int> epochs;
  std::optional<std::uint64_t> seed;
  bool all = false;
};

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  ModelConfig cfg = assemble_config(a.config_file, a.overrides);
  if (a.epochs) cfg.epochs = *a.epochs;
  if (a.seed) cfg.random_seed = *a.seed;
  cfg.validate(true);
  const Dataset ds = load_dataset(a.data, parse_layout(a.layout));

  Dataset train_set = ds, val_set;
  std::optional<DatasetSplit> split;
  if (!a.all) {
    split = split_dataset(ds, SplitRatios{}, cfg.random_seed);
    train_set = ds.subset(split->train);
    val_set = ds.subset(split->validation);
  }
  Model model = a.weights.empty() ? Model::random(cfg) : build_model(cfg, a.weights, true);
  if (a.weights.empty()) err << "note: no --weights given, training from a random initialisation\n";

  const auto history = train(model, train_set, val_set, cfg, a.run_dir, TrainOptions{&err});
  export_loss_series(history, fs::path(a.run_dir) / "history.csv");
  if (split) write_text(fs::path(a.run_dir) / "split.json", split_json(*split).dump(2) + "\n");
  out << "trained " << history.epochs.size() << " epochs on " << train_set.size() << " scans; final train_loss "
      << history.epochs.back().train_loss << "\n";
  return kExitOk;
}

struct EvaluateArgs {
  std::string data, run_dir, out, layout = "mask_dirs", subset = "all";
  EvalConfig eval;
};

int cmd_evaluate(const EvaluateArgs& a, std::ostream& out) {
  if (list_checkpoints(a.run_dir).empty()) throw NotFoundError("no checkpoints in " + a.run_dir);
  const ModelConfig cfg = read_run_config(a.run_dir);
  const Model model = load_inference_model(a.run_dir, cfg);
  Dataset ds = load_dataset(a.data, parse_layout(a.layout));
  if (a.subset != "all") {
    const json split = json::parse(read_text(fs::path(a.run_dir) / "split.json"), nullptr, false);
    if (split.is_discarded() || !split.contains(a.subset))
      throw ConfigError("--subset " + a.subset + ": run has no such split");
    ds = ds.subset(split[a.subset].get<std::vector<std::string>>());
  }
  const EvalReport report = evaluate(model, ds, a.eval);
  ensure_dir(a.out);
  write_text(fs::path(a.out) / "eval_report.json", to_json_string(report) + "\n");
  export_pr_csv(report.pr_curve, fs::path(a.out) / "pr_curve.csv");
  out << "scans " << ds.size() << "\n";
  out << "mean_iou " << report.mean_iou << (report.mean_iou_empty ? " (no ground-truth instances)" : "") << "\n";
  out << "ap@" << a.eval.iou_threshold << " " << report.ap << "\n";
  out << "tp " << report.tp << " fp " << report.fp << " fn " << report.fn << "\n";
  return kExitOk;
}

struct PredictArgs {
  std::string image, run_dir, out_overlay;
  std::optional<double> threshold;
};

int cmd_predict(const PredictArgs& a, std::ostream& out) {
  const Image image = read_image(a.image);
  if (list_checkpoints(a.run_dir).empty()) throw NotFoundError("no checkpoints in " + a.run_dir);
  const ModelConfig cfg = read_run_config(a.run_dir);
  const Model model = load_inference_model(a.run_dir, cfg);
  const Diagnosis dx = diagnose(model.predict(image), a.threshold.value_or(cfg.detection_score_threshold));
  std::string overlay_path;
  if (!a.out_overlay.empty()) {
    const fs::path p(a.out_overlay);
    if (p.has_parent_path()) ensure_dir(p.parent_path());
    const auto art = render_overlay(fs::path(a.image).stem().string(), image, dx.detections);
    write_png(p, art.image);
    overlay_path = p.string();
  }
  out << diagnosis_json(dx, overlay_path).dump(2) << "\n";
  return kExitOk;
}

int cmd_serve(const std::string& config_file, std::ostream& out) {
  const auto cfg =
      load_service_config(config_file.empty() ? std::nullopt : std::optional<fs::path>(config_file), process_env);
  Service service(cfg, load_service_predictor(cfg.run_dir));
  out << "serving on " << cfg.host << ":" << cfg.port << std::endl;
  service.run();
  return kExitOk;
}

int cmd_user_add(const std::string& config_file, const std::string& username, std::string password,
                 bool password_stdin, std::ostream& out) {
  const auto cfg =
      load_service_config(config_file.empty() ? std::nullopt : std::optional<fs::path>(config_file), process_env);
  if (password_stdin) std::getline(std::cin, password);
  if (password.empty()) throw ConfigError("a password is required (--password or --password-stdin)");
  add_service_user(cfg, username, password);
  out << "user " << username << " saved\n";
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Brain-tumor instance segmentation: data, training, evaluation and service", "tumorseg"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic dataset (mask_dirs layout by default)");
  s->add_option("--n", synth.n, "Number of scans")->required();
  s->add_option("--seed", synth.seed, "Generator seed");
  s->add_option("--out", synth.out, "Output root")->required();
  s->add_option("--layout", synth.layout, "mask_dirs or annotation_json");
  s->add_option("--rows", synth.rows, "Image height");
  s->add_option("--cols", synth.cols, "Image width");

  PretrainArgs pre;
  auto* p = app.add_subcommand("pretrain", "Train a backbone on generated shapes and write weights + manifest");
  p->add_option("--out", pre.out, "Weights file to write")->required();
  p->add_option("--scans", pre.opts.scans, "Number of shape images");
  p->add_option("--epochs", pre.opts.epochs, "Epochs");
  p->add_option("--seed", pre.opts.seed, "Seed");
  p->add_option("--backbone", pre.opts.backbone_id, "Backbone id");
  p->add_option("--input-size", pre.opts.input_size, "Square input side");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train on a dataset, writing checkpoints into a run directory");
  t->add_option("--data", tr.data, "Dataset root")->required();
  t->add_option("--run-dir", tr.run_dir, "Run directory")->required();
  t->add_option("--weights", tr.weights, "Pretrained weights (heads are re-initialised)");
  t->add_option("--config", tr.config_file, "ModelConfig JSON file");
  t->add_option("--set", tr.overrides, "key=value override applied after --config");
  t->add_option("--epochs", tr.epochs, "Epochs (overrides the config)");
  t->add_option("--seed", tr.seed, "Random seed (overrides the config)");
  t->add_option("--layout", tr.layout, "mask_dirs or annotation_json");
  t->add_flag("--all", tr.all, "Train on every scan instead of the 70/15/15 train split");

  EvaluateArgs ev;
  auto* e = app.add_subcommand("evaluate", "Evaluate the newest checkpoint and write report + PR curve");
  e->add_option("--data", ev.data, "Dataset root")->required();
  e->add_option("--run-dir", ev.run_dir, "Run directory")->required();
  e->add_option("--out", ev.out, "Output directory")->required();
  e->add_option("--layout", ev.layout, "mask_dirs or annotation_json");
  e->add_option("--subset", ev.subset, "all, train, validation or test (needs split.json)");
  e->add_option("--iou-threshold", ev.eval.iou_threshold, "Match threshold on mask IoU");
  e->add_option("--score-threshold", ev.eval.score_threshold, "Score cut for mean IoU");

  PredictArgs pr;
  auto* d = app.add_subcommand("predict", "Diagnose one image");
  d->add_option("--image", pr.image, "PNG or JPEG")->required();
  d->add_option("--run-dir", pr.run_dir, "Run directory")->required();
  d->add_option("--out-overlay", pr.out_overlay, "Overlay PNG to write");
  d->add_option("--threshold", pr.threshold, "Detection threshold (default: run config)");

  std::string serve_config;
  auto* sv = app.add_subcommand("serve", "Run the REST service");
  sv->add_option("--config", serve_config, "Service config JSON");

  std::string ua_config, ua_user, ua_password;
  bool ua_stdin = false;
  auto* ua = app.add_subcommand("user-add", "Create or update a clinician account");
  ua->add_option("--config", ua_config, "Service config JSON");
  ua->add_option("--username", ua_user, "Account name")->required();
  ua->add_option("--password", ua_password, "Password");
  ua->add_flag("--password-stdin", ua_stdin, "Read the password from standard input");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(std::move(reversed));
  } catch (const CLI::ParseError& ex) {
    if (ex.get_exit_code() == 0) return app.exit(ex, out, err);
    // Usage text of the subcommand being parsed, or of the whole tool.
    const auto subs = app.get_subcommands();
    err << "error: " << ex.what() << "\n\n" << (subs.empty() ? app.help() : subs.back()->help());
    return kExitUsage;
  }

  try {
    if (*s) return cmd_synth(synth, out);
    if (*p) return cmd_pretrain(pre, out, err);
    if (*t) return cmd_train(tr, out, err);
    if (*e) return cmd_evaluate(ev, out);
    if (*d) return cmd_predict(pr, out);
    if (*sv) return cmd_serve(serve_config, out);
    if (*ua) return cmd_user_add(ua_config, ua_user, ua_password, ua_stdin, out);
  } catch (const ConfigError& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace tumorseg
