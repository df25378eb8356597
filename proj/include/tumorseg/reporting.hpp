#pragma once

// File artifacts: segmentation overlays (PNG) and CSV series for the
// precision-recall curve and the per-epoch losses.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tumorseg/detection.hpp"
#include "tumorseg/engine.hpp"
#include "tumorseg/metrics.hpp"

namespace tumorseg {

using Rgb = std::array<std::uint8_t, 3>;

/// Fixed palette; detection k (by rank) gets color k, cycling past the end.
Rgb overlay_color(std::size_t rank);
inline constexpr std::size_t kPaletteSize = 8;

struct OverlayOptions {
  double alpha = 0.4;
  bool draw_boxes = true;
};

struct LegendEntry {
  Rgb color;
  double score;
  std::string label;
};

struct OverlayArtifact {
  std::string scan_id;
  std::filesystem::path image_ref;  // empty until written
  std::vector<LegendEntry> legend;
  Image image;  // RGB (or the untouched source when there is nothing to draw)
};

/// Blends each mask over the image in rank order and outlines its box. With no
/// detections the source image is returned unchanged.
OverlayArtifact render_overlay(const std::string& scan_id, const Image& image, std::span<const Detection> detections,
                               const OverlayOptions& options = {});

/// `<scan_id>_overlay.png`
std::string overlay_file_name(const std::string& scan_id);

/// Writes the overlay PNG into `dir` and records its path in `artifact.image_ref`.
void write_overlay(OverlayArtifact& artifact, const std::filesystem::path& dir);

/// `threshold,precision,recall`, six decimals.
std::string pr_csv(std::span<const PRPoint> curve);
std::vector<PRPoint> parse_pr_csv(const std::string& text);
void export_pr_csv(std::span<const PRPoint> curve, const std::filesystem::path& path);

/// Same text as history_csv.
void export_loss_series(const TrainingHistory& history, const std::filesystem::path& path);

}  // namespace tumorseg
