#include "tumorseg/reporting.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace tumorseg {

namespace fs = std::filesystem;

Rgb overlay_color(std::size_t rank) {
  static constexpr std::array<Rgb, kPaletteSize> palette{{{230, 25, 75},
                                                          {60, 180, 75},
                                                          {0, 130, 200},
                                                          {245, 130, 48},
                                                          {145, 30, 180},
                                                          {70, 240, 240},
                                                          {240, 50, 230},
                                                          {210, 245, 60}}};
  return palette[rank % kPaletteSize];
}

OverlayArtifact render_overlay(const std::string& scan_id, const Image& image, std::span<const Detection> detections,
                               const OverlayOptions& options) {
  validate_image(image, scan_id);
  if (!(options.alpha >= 0.0 && options.alpha <= 1.0)) throw ConfigError("render_overlay: alpha must be in [0, 1]");
  for (std::size_t k = 0; k < detections.size(); ++k) {
    const auto& m = detections[k].mask;
    if (m.rows != image.rows || m.cols != image.cols || m.data.size() != static_cast<std::size_t>(m.rows) * m.cols)
      throw ValidationError("render_overlay: " + scan_id + ": detection " + std::to_string(k) + " mask is " +
                            std::to_string(m.rows) + "x" + std::to_string(m.cols) + ", image is " +
                            std::to_string(image.rows) + "x" + std::to_string(image.cols));
  }
  OverlayArtifact art;
  art.scan_id = scan_id;
  if (detections.empty()) {
    art.image = image;
    return art;
  }
  art.image = to_three_channels(image);
  Image& out = art.image;
  const double a = options.alpha;
  for (std::size_t k = 0; k < detections.size(); ++k) {
    const auto& det = detections[k];
    const Rgb color = overlay_color(k);
    art.legend.push_back({color, det.score, std::string(to_string(det.class_label))});
    for (int r = 0; r < out.rows; ++r)
      for (int c = 0; c < out.cols; ++c) {
        if (!det.mask.at(r, c)) continue;
        for (int ch = 0; ch < 3; ++ch)
          out.at(r, c, ch) = static_cast<std::uint8_t>(std::lround((1.0 - a) * out.at(r, c, ch) + a * color[ch]));
      }
    if (!options.draw_boxes) continue;
    const Box b = intersection(det.box, Box{0, 0, out.rows, out.cols});
    if (b.is_empty()) continue;
    auto paint = [&](int r, int c) {
      for (int ch = 0; ch < 3; ++ch) out.at(r, c, ch) = color[ch];
    };
    for (int c = b.c0; c < b.c1; ++c) {
      paint(b.r0, c);
      paint(b.r1 - 1, c);
    }
    for (int r = b.r0; r < b.r1; ++r) {
      paint(r, b.c0);
      paint(r, b.c1 - 1);
    }
  }
  return art;
}

std::string overlay_file_name(const std::string& scan_id) { return scan_id + "_overlay.png"; }

void write_overlay(OverlayArtifact& artifact, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  const fs::path path = dir / overlay_file_name(artifact.scan_id);
  write_png(path, artifact.image);
  artifact.image_ref = path;
}

namespace {

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path.string() + ": cannot open for writing");
  out << text;
  out.flush();
  if (!out) throw IoError(path.string() + ": write failed");
}

}  // namespace

std::string pr_csv(std::span<const PRPoint> curve) {
  std::string out = "threshold,precision,recall\n";
  char buf[96];
  for (const auto& p : curve) {
    std::snprintf(buf, sizeof buf, "%.6f,%.6f,%.6f\n", p.threshold, p.precision, p.recall);
    out += buf;
  }
  return out;
}

std::vector<PRPoint> parse_pr_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "threshold,precision,recall") throw ValidationError("pr csv: bad header");
  std::vector<PRPoint> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    PRPoint p{};
    if (std::sscanf(line.c_str(), "%lf,%lf,%lf", &p.threshold, &p.precision, &p.recall) != 3)
      throw ValidationError("pr csv: malformed row '" + line + "'");
    out.push_back(p);
  }
  return out;
}

void export_pr_csv(std::span<const PRPoint> curve, const fs::path& path) { write_file(path, pr_csv(curve)); }

void export_loss_series(const TrainingHistory& history, const fs::path& path) {
  for (std::size_t i = 1; i < history.epochs.size(); ++i)
    if (history.epochs[i].epoch <= history.epochs[i - 1].epoch)
      throw ValidationError("export_loss_series: epochs must be increasing");
  write_file(path, history_csv(history));
}

}  // namespace tumorseg
