#pragma once

#include <concepts>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tumorseg/errors.hpp"
#include "tumorseg/geometry.hpp"
#include "tumorseg/image.hpp"

namespace tumorseg {

enum class Label { tumor, no_tumor };

std::string_view to_string(Label label);
/// Manifest spelling: "yes" / "no".
std::string_view manifest_label(Label label);
Label parse_manifest_label(std::string_view text);

struct GroundTruth {
  Label label = Label::no_tumor;
  std::vector<BinaryMask> masks;
  std::vector<Box> boxes;  // tight box per mask, same order

  /// Builds boxes from masks and checks the invariants against an image size.
  static GroundTruth from_masks(Label label, std::vector<BinaryMask> masks);
  void validate(int rows, int cols, const std::string& scan_id) const;
};

struct ScanRecord {
  std::string scan_id;
  std::optional<std::string> patient_id;
  Image image;
  std::optional<GroundTruth> ground_truth;
};

/// Immutable after construction by the loaders and the generator.
struct Dataset {
  std::vector<ScanRecord> scans;

  std::size_t size() const noexcept { return scans.size(); }
  bool empty() const noexcept { return scans.empty(); }
  std::size_t count(Label label) const;
  const ScanRecord& find(std::string_view scan_id) const;
  /// Scans whose id is listed, in the order of `ids`.
  Dataset subset(const std::vector<std::string>& ids) const;
};

enum class Layout { mask_dirs, annotation_json };

Layout parse_layout(std::string_view text);

inline constexpr const char* kManifestName = "manifest.csv";
inline constexpr const char* kAnnotationName = "annotations.json";

/// Loads every scan of a dataset root. Missing or corrupt files are collected and
/// reported together as a DataError; shape problems raise ValidationError naming
/// the scan. Nothing is dropped silently.
Dataset load_dataset(const std::filesystem::path& root, Layout layout);

/// Writes images/, masks/<id>_<k>.png (one file per instance) and manifest.csv.
void save_mask_dirs(const Dataset& dataset, const std::filesystem::path& root);
/// Writes images/ and annotations.json with RLE-encoded instances.
void save_annotation_json(const Dataset& dataset, const std::filesystem::path& root);

/// Manifest text with header `scan_id,patient_id,label`, rows in dataset order.
std::string manifest_csv(const Dataset& dataset);

// Column-major run-length encoding, first run counts background pixels.
std::vector<std::uint32_t> encode_rle(const BinaryMask& mask);
BinaryMask decode_rle(const std::vector<std::uint32_t>& counts, int rows, int cols);

struct SplitRatios {
  double train = 0.70;
  double validation = 0.15;
  double test = 0.15;
};

struct DatasetSplit {
  std::vector<std::string> train;
  std::vector<std::string> validation;
  std::vector<std::string> test;
  std::uint64_t seed = 0;
  SplitRatios ratios;
};

/// Split sizes by largest remainder over the whole dataset (ties go to the later
/// split). Scans are grouped by label, ordered by scan_id, shuffled with `seed`,
/// then dealt out along a low-discrepancy sequence so each label keeps its
/// proportion within one scan per split.
DatasetSplit split_dataset(const Dataset& dataset, SplitRatios ratios, std::uint64_t seed);

/// Largest-remainder apportionment of `total` into the given fractions.
std::vector<std::size_t> apportion(std::size_t total, const std::vector<double>& fractions);

struct PatientIdMap {
  std::map<std::string, std::string> entries;  // scan_id -> patient_id

  const std::string& at(const std::string& scan_id) const;
};

std::pair<Dataset, PatientIdMap> strip_patient_ids(Dataset dataset);

template <typename R>
concept HasPatientId = requires(R r) { r.patient_id = std::string{}; };

/// Returns `record` with its patient_id set from the map.
template <HasPatientId R>
R reattach_patient_id(R record, const PatientIdMap& map, const std::string& scan_id) {
  record.patient_id = map.at(scan_id);
  return record;
}

/// Re-attaches ids to every scan listed in the map.
Dataset reattach_patient_ids(Dataset dataset, const PatientIdMap& map);

struct SyntheticParams {
  int rows = 64;
  int cols = 64;
  double min_radius = 4.0;  // tumor ellipse semi-axes, pixels
  double max_radius = 10.0;
  int min_tumor_intensity = 200;
  int max_tumor_intensity = 245;
  int min_tissue_intensity = 70;
  int max_tissue_intensity = 120;
  int max_blobs = 2;
};

/// Deterministic per seed. Half the scans (rounded up) are tumor scans with
/// 1..max_blobs disjoint bright ellipses; their masks are exactly the pixels
/// painted. The rest carry only brain-like background texture.
Dataset generate_synthetic_dataset(std::size_t n, std::uint64_t seed, const SyntheticParams& params = {});

/// Pixel-center rasterization of a rotated ellipse.
BinaryMask rasterize_ellipse(int rows, int cols, double center_r, double center_c, double radius_r,
                             double radius_c, double angle);

}  // namespace tumorseg
