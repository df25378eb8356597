#include "tumorseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>
#include <opencv2/imgproc.hpp>

#include "tumorseg/random.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace tumorseg {

std::string_view to_string(Label label) { return label == Label::tumor ? "tumor" : "no_tumor"; }

std::string_view manifest_label(Label label) { return label == Label::tumor ? "yes" : "no"; }

Label parse_manifest_label(std::string_view text) {
  if (text == "yes") return Label::tumor;
  if (text == "no") return Label::no_tumor;
  throw ValidationError("label must be 'yes' or 'no', got '" + std::string(text) + "'");
}

Layout parse_layout(std::string_view text) {
  if (text == "mask_dirs") return Layout::mask_dirs;
  if (text == "annotation_json") return Layout::annotation_json;
  throw ConfigError("unknown dataset layout '" + std::string(text) + "'");
}

GroundTruth GroundTruth::from_masks(Label label, std::vector<BinaryMask> masks) {
  GroundTruth gt;
  gt.label = label;
  gt.masks = std::move(masks);
  for (const auto& m : gt.masks) gt.boxes.push_back(derive_box_from_mask(m));
  return gt;
}

void GroundTruth::validate(int rows, int cols, const std::string& scan_id) const {
  if (label == Label::no_tumor && !masks.empty())
    throw ValidationError(scan_id + ": scan labeled no_tumor carries " + std::to_string(masks.size()) + " masks");
  if (boxes.size() != masks.size()) throw ValidationError(scan_id + ": box count differs from mask count");
  for (std::size_t k = 0; k < masks.size(); ++k) {
    if (masks[k].rows != rows || masks[k].cols != cols)
      throw ValidationError(scan_id + ": mask " + std::to_string(k) + " is " + std::to_string(masks[k].rows) + "x" +
                            std::to_string(masks[k].cols) + " but image is " + std::to_string(rows) + "x" +
                            std::to_string(cols));
    if (masks[k].empty()) throw ValidationError(scan_id + ": mask " + std::to_string(k) + " has no foreground");
    if (boxes[k] != derive_box_from_mask(masks[k]))
      throw ValidationError(scan_id + ": box " + std::to_string(k) + " is not the tight box of its mask");
  }
}

std::size_t Dataset::count(Label label) const {
  return static_cast<std::size_t>(std::count_if(scans.begin(), scans.end(), [&](const ScanRecord& s) {
    return s.ground_truth && s.ground_truth->label == label;
  }));
}

const ScanRecord& Dataset::find(std::string_view scan_id) const {
  for (const auto& s : scans)
    if (s.scan_id == scan_id) return s;
  throw LookupError("unknown scan_id '" + std::string(scan_id) + "'");
}

Dataset Dataset::subset(const std::vector<std::string>& ids) const {
  Dataset out;
  out.scans.reserve(ids.size());
  for (const auto& id : ids) out.scans.push_back(find(id));
  return out;
}

// ---------------------------------------------------------------------------
// Loading

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  fields.push_back(cur);
  return fields;
}

bool is_image_ext(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

/// stem -> path of every image under root/images.
std::map<std::string, fs::path> index_images(const fs::path& dir, std::vector<std::string>& errors) {
  std::map<std::string, fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file() || !is_image_ext(entry.path())) continue;
    const auto stem = entry.path().stem().string();
    if (!out.emplace(stem, entry.path()).second)
      errors.push_back(stem + ": more than one image file with this stem");
  }
  return out;
}

struct ManifestRow {
  std::string scan_id;
  std::optional<std::string> patient_id;
  Label label;
};

std::vector<ManifestRow> read_manifest(const fs::path& path, std::vector<std::string>& errors) {
  std::ifstream in(path);
  if (!in) throw IoError(path.string() + ": cannot open manifest");
  std::string line;
  if (!std::getline(in, line)) return {};
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "scan_id,patient_id,label")
    throw ValidationError(path.string() + ": manifest header must be 'scan_id,patient_id,label', got '" + line + "'");
  std::vector<ManifestRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    auto f = split_csv_line(line);
    if (f.size() != 3) {
      errors.push_back("manifest line " + std::to_string(lineno) + ": expected 3 fields");
      continue;
    }
    try {
      ManifestRow row{f[0], f[1].empty() ? std::nullopt : std::optional<std::string>(f[1]),
                      parse_manifest_label(f[2])};
      if (row.scan_id.empty()) throw ValidationError("empty scan_id");
      rows.push_back(std::move(row));
    } catch (const Error& e) {
      errors.push_back("manifest line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return rows;
}

std::vector<BinaryMask> split_components(const BinaryMask& mask) {
  cv::Mat m(mask.rows, mask.cols, CV_8UC1);
  for (int r = 0; r < mask.rows; ++r)
    for (int c = 0; c < mask.cols; ++c) m.at<std::uint8_t>(r, c) = mask.at(r, c) ? 255 : 0;
  cv::Mat labels;
  const int n = cv::connectedComponents(m, labels, 8, CV_32S);
  std::vector<BinaryMask> out(static_cast<std::size_t>(std::max(0, n - 1)), BinaryMask(mask.rows, mask.cols));
  for (int r = 0; r < mask.rows; ++r)
    for (int c = 0; c < mask.cols; ++c) {
      const int l = labels.at<int>(r, c);
      if (l > 0) out[static_cast<std::size_t>(l - 1)].at(r, c) = 1;
    }
  return out;
}

/// Instance files `<id>_<k>.png` for scan `id`, ordered by k. Files that are the
/// combined mask of another scan literally named `<id>_<k>` are not claimed.
std::vector<fs::path> instance_mask_files(const fs::path& mask_dir, const std::string& scan_id,
                                          const std::set<std::string>& all_ids) {
  std::vector<std::pair<long, fs::path>> found;
  if (!fs::is_directory(mask_dir)) return {};
  const std::string prefix = scan_id + "_";
  for (const auto& entry : fs::directory_iterator(mask_dir)) {
    const auto name = entry.path().filename().string();
    if (entry.path().extension() != ".png" || name.rfind(prefix, 0) != 0) continue;
    const auto stem = entry.path().stem().string();
    const auto suffix = stem.substr(prefix.size());
    if (suffix.empty() || !std::all_of(suffix.begin(), suffix.end(), ::isdigit)) continue;
    if (all_ids.count(stem)) continue;
    found.emplace_back(std::stol(suffix), entry.path());
  }
  std::sort(found.begin(), found.end());
  std::vector<fs::path> out;
  for (auto& [k, p] : found) out.push_back(std::move(p));
  return out;
}

void check_not_empty_root(const fs::path& root) {
  if (!fs::exists(root)) throw IoError(root.string() + ": dataset root does not exist");
  if (!fs::is_directory(root)) throw IoError(root.string() + ": dataset root is not a directory");
}

Dataset load_mask_dirs(const fs::path& root) {
  std::vector<std::string> errors;
  auto images = index_images(root / "images", errors);
  const auto manifest_path = root / kManifestName;
  if (images.empty() && !fs::exists(manifest_path)) throw DataError("no scans found in " + root.string());
  if (!fs::exists(manifest_path)) throw DataError(root.string() + ": manifest.csv is missing");
  auto rows = read_manifest(manifest_path, errors);
  if (rows.empty() && images.empty() && errors.empty()) throw DataError("no scans found in " + root.string());

  std::set<std::string> ids;
  for (const auto& r : rows)
    if (!ids.insert(r.scan_id).second) errors.push_back(r.scan_id + ": duplicate scan_id in manifest");
  for (const auto& [stem, path] : images)
    if (!ids.count(stem)) errors.push_back(stem + ": image " + path.filename().string() + " has no manifest entry");

  std::vector<std::string> shape_errors;
  Dataset ds;
  const auto mask_dir = root / "masks";
  for (const auto& row : rows) {
    auto it = images.find(row.scan_id);
    if (it == images.end()) {
      errors.push_back(row.scan_id + ": image file missing under images/");
      continue;
    }
    ScanRecord rec{row.scan_id, row.patient_id, {}, std::nullopt};
    try {
      rec.image = read_image(it->second);
      validate_image(rec.image, row.scan_id);
    } catch (const Error& e) {
      errors.push_back(row.scan_id + ": " + e.what());
      continue;
    }
    std::vector<BinaryMask> masks;
    try {
      auto files = instance_mask_files(mask_dir, row.scan_id, ids);
      const auto combined = mask_dir / (row.scan_id + ".png");
      if (!files.empty()) {
        for (const auto& f : files) masks.push_back(read_mask_png(f));
      } else if (fs::exists(combined)) {
        auto m = read_mask_png(combined);
        if (!m.same_shape(BinaryMask(rec.image.rows, rec.image.cols))) {
          masks.push_back(std::move(m));
        } else {
          masks = split_components(m);
        }
      }
    } catch (const Error& e) {
      errors.push_back(row.scan_id + ": " + e.what());
      continue;
    }
    // Blank masks for negative scans are tolerated and dropped.
    if (row.label == Label::no_tumor)
      std::erase_if(masks, [](const BinaryMask& m) { return m.empty(); });
    try {
      for (std::size_t k = 0; k < masks.size(); ++k)
        if (masks[k].rows != rec.image.rows || masks[k].cols != rec.image.cols)
          throw ValidationError(row.scan_id + ": mask " + std::to_string(k) + " shape " +
                                std::to_string(masks[k].rows) + "x" + std::to_string(masks[k].cols) +
                                " does not match image " + std::to_string(rec.image.rows) + "x" +
                                std::to_string(rec.image.cols));
      rec.ground_truth = GroundTruth::from_masks(row.label, std::move(masks));
      rec.ground_truth->validate(rec.image.rows, rec.image.cols, row.scan_id);
    } catch (const ValidationError& e) {
      shape_errors.push_back(e.what());
      continue;
    }
    ds.scans.push_back(std::move(rec));
  }
  if (!errors.empty()) {
    errors.insert(errors.end(), shape_errors.begin(), shape_errors.end());
    throw DataError(std::move(errors));
  }
  if (!shape_errors.empty()) {
    std::string msg = shape_errors.front();
    for (std::size_t i = 1; i < shape_errors.size(); ++i) msg += "; " + shape_errors[i];
    throw ValidationError(msg);
  }
  if (ds.empty()) throw DataError("no scans found in " + root.string());
  return ds;
}

BinaryMask rasterize_polygon(const json& pts, int rows, int cols) {
  std::vector<cv::Point> poly;
  for (const auto& p : pts) {
    if (!p.is_array() || p.size() != 2) throw ValidationError("polygon points must be [x, y] pairs");
    poly.emplace_back(static_cast<int>(std::lround(p[0].get<double>())),
                      static_cast<int>(std::lround(p[1].get<double>())));
  }
  if (poly.size() < 3) throw ValidationError("polygon needs at least 3 points");
  cv::Mat m = cv::Mat::zeros(rows, cols, CV_8UC1);
  std::vector<std::vector<cv::Point>> polys{poly};
  cv::fillPoly(m, polys, cv::Scalar(1));
  BinaryMask out(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out.at(r, c) = m.at<std::uint8_t>(r, c);
  return out;
}

Dataset load_annotation_json(const fs::path& root) {
  const auto ann_path = root / kAnnotationName;
  std::vector<std::string> errors;
  auto images = index_images(root / "images", errors);
  if (!fs::exists(ann_path)) {
    if (images.empty()) throw DataError("no scans found in " + root.string());
    throw DataError(root.string() + ": annotations.json is missing");
  }
  json doc;
  {
    std::ifstream in(ann_path);
    if (!in) throw IoError(ann_path.string() + ": cannot open");
    try {
      in >> doc;
    } catch (const json::exception& e) {
      throw DataError(ann_path.string() + ": malformed JSON: " + e.what());
    }
  }
  const json& records = doc.is_object() && doc.contains("scans") ? doc["scans"] : doc;
  if (!records.is_array()) throw DataError(ann_path.string() + ": expected an array of scan records");
  if (records.empty() && images.empty()) throw DataError("no scans found in " + root.string());

  std::set<std::string> ids;
  std::vector<std::string> shape_errors;
  Dataset ds;
  std::size_t idx = 0;
  for (const auto& rec_json : records) {
    const std::string where = "annotation record " + std::to_string(idx++);
    try {
      const auto scan_id = rec_json.at("scan_id").get<std::string>();
      if (!ids.insert(scan_id).second) {
        errors.push_back(scan_id + ": duplicate scan_id");
        continue;
      }
      ScanRecord rec{scan_id, std::nullopt, {}, std::nullopt};
      if (rec_json.contains("patient_id") && rec_json["patient_id"].is_string() &&
          !rec_json["patient_id"].get<std::string>().empty())
        rec.patient_id = rec_json["patient_id"].get<std::string>();
      const Label label = parse_manifest_label(rec_json.at("label").get<std::string>());
      fs::path image_path;
      if (rec_json.contains("image")) {
        image_path = root / rec_json["image"].get<std::string>();
      } else if (auto it = images.find(scan_id); it != images.end()) {
        image_path = it->second;
      } else {
        errors.push_back(scan_id + ": image file missing under images/");
        continue;
      }
      try {
        rec.image = read_image(image_path);
        validate_image(rec.image, scan_id);
      } catch (const Error& e) {
        errors.push_back(scan_id + ": " + e.what());
        continue;
      }
      std::vector<BinaryMask> masks;
      for (const auto& inst : rec_json.value("instances", json::array())) {
        if (inst.contains("polygon")) {
          masks.push_back(rasterize_polygon(inst["polygon"], rec.image.rows, rec.image.cols));
        } else if (inst.contains("rle")) {
          const auto& rle = inst["rle"];
          const auto size = rle.at("size").get<std::vector<int>>();
          if (size.size() != 2) throw ValidationError("rle size must be [rows, cols]");
          if (size[0] != rec.image.rows || size[1] != rec.image.cols)
            throw ValidationError(scan_id + ": mask shape " + std::to_string(size[0]) + "x" +
                                  std::to_string(size[1]) + " does not match image " +
                                  std::to_string(rec.image.rows) + "x" + std::to_string(rec.image.cols));
          masks.push_back(decode_rle(rle.at("counts").get<std::vector<std::uint32_t>>(), size[0], size[1]));
        } else {
          throw ValidationError(scan_id + ": instance needs 'polygon' or 'rle'");
        }
      }
      try {
        rec.ground_truth = GroundTruth::from_masks(label, std::move(masks));
        rec.ground_truth->validate(rec.image.rows, rec.image.cols, scan_id);
      } catch (const ValidationError& e) {
        shape_errors.push_back(e.what());
        continue;
      }
      ds.scans.push_back(std::move(rec));
    } catch (const ValidationError& e) {
      shape_errors.push_back(e.what());
    } catch (const json::exception& e) {
      errors.push_back(where + ": " + e.what());
    } catch (const Error& e) {
      errors.push_back(where + ": " + e.what());
    }
  }
  for (const auto& [stem, path] : images)
    if (!ids.count(stem)) errors.push_back(stem + ": image " + path.filename().string() + " has no annotation record");
  if (!errors.empty()) {
    errors.insert(errors.end(), shape_errors.begin(), shape_errors.end());
    throw DataError(std::move(errors));
  }
  if (!shape_errors.empty()) {
    std::string msg = shape_errors.front();
    for (std::size_t i = 1; i < shape_errors.size(); ++i) msg += "; " + shape_errors[i];
    throw ValidationError(msg);
  }
  if (ds.empty()) throw DataError("no scans found in " + root.string());
  return ds;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path.string() + ": cannot open for writing");
  out << text;
  if (!out) throw IoError(path.string() + ": write failed");
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError(dir.string() + ": " + ec.message());
}

}  // namespace

Dataset load_dataset(const fs::path& root, Layout layout) {
  check_not_empty_root(root);
  return layout == Layout::mask_dirs ? load_mask_dirs(root) : load_annotation_json(root);
}

std::string manifest_csv(const Dataset& dataset) {
  std::string out = "scan_id,patient_id,label\n";
  for (const auto& s : dataset.scans) {
    const Label label = s.ground_truth ? s.ground_truth->label : Label::no_tumor;
    out += s.scan_id + "," + s.patient_id.value_or("") + "," + std::string(manifest_label(label)) + "\n";
  }
  return out;
}

void save_mask_dirs(const Dataset& dataset, const fs::path& root) {
  ensure_dir(root / "images");
  ensure_dir(root / "masks");
  for (const auto& s : dataset.scans) {
    write_png(root / "images" / (s.scan_id + ".png"), s.image);
    if (!s.ground_truth) continue;
    for (std::size_t k = 0; k < s.ground_truth->masks.size(); ++k)
      write_mask_png(root / "masks" / (s.scan_id + "_" + std::to_string(k) + ".png"), s.ground_truth->masks[k]);
  }
  write_text(root / kManifestName, manifest_csv(dataset));
}

void save_annotation_json(const Dataset& dataset, const fs::path& root) {
  ensure_dir(root / "images");
  json scans = json::array();
  for (const auto& s : dataset.scans) {
    write_png(root / "images" / (s.scan_id + ".png"), s.image);
    json rec{{"scan_id", s.scan_id},
             {"patient_id", s.patient_id ? json(*s.patient_id) : json(nullptr)},
             {"label", manifest_label(s.ground_truth ? s.ground_truth->label : Label::no_tumor)},
             {"instances", json::array()}};
    if (s.ground_truth)
      for (const auto& m : s.ground_truth->masks)
        rec["instances"].push_back({{"rle", {{"size", {m.rows, m.cols}}, {"counts", encode_rle(m)}}}});
    scans.push_back(std::move(rec));
  }
  write_text(root / kAnnotationName, json{{"scans", scans}}.dump(1) + "\n");
}

std::vector<std::uint32_t> encode_rle(const BinaryMask& mask) {
  std::vector<std::uint32_t> counts;
  bool current = false;
  std::uint32_t run = 0;
  for (int c = 0; c < mask.cols; ++c)
    for (int r = 0; r < mask.rows; ++r) {
      const bool v = mask.at(r, c) != 0;
      if (v != current) {
        counts.push_back(run);
        run = 0;
        current = v;
      }
      ++run;
    }
  counts.push_back(run);
  return counts;
}

BinaryMask decode_rle(const std::vector<std::uint32_t>& counts, int rows, int cols) {
  const std::uint64_t total = static_cast<std::uint64_t>(rows) * cols;
  const std::uint64_t sum = std::accumulate(counts.begin(), counts.end(), std::uint64_t{0});
  if (sum != total)
    throw ValidationError("RLE covers " + std::to_string(sum) + " pixels, mask has " + std::to_string(total));
  BinaryMask m(rows, cols);
  std::uint64_t pos = 0;
  bool value = false;
  for (auto run : counts) {
    for (std::uint32_t i = 0; i < run; ++i, ++pos)
      if (value) m.at(static_cast<int>(pos % rows), static_cast<int>(pos / rows)) = 1;
    value = !value;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Splitting

std::vector<std::size_t> apportion(std::size_t total, const std::vector<double>& fractions) {
  std::vector<std::size_t> sizes(fractions.size());
  std::vector<double> rem(fractions.size());
  std::size_t assigned = 0;
  for (std::size_t k = 0; k < fractions.size(); ++k) {
    const double quota = static_cast<double>(total) * fractions[k];
    sizes[k] = static_cast<std::size_t>(std::floor(quota + 1e-9));
    rem[k] = quota - static_cast<double>(sizes[k]);
    assigned += sizes[k];
  }
  std::vector<std::size_t> order(fractions.size());
  std::iota(order.begin(), order.end(), 0);
  // Largest remainder first; equal remainders favour the later index.
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (std::abs(rem[a] - rem[b]) > 1e-9) return rem[a] > rem[b];
    return a > b;
  });
  for (std::size_t i = 0; assigned < total; ++i, ++assigned) ++sizes[order[i % order.size()]];
  return sizes;
}

DatasetSplit split_dataset(const Dataset& dataset, SplitRatios ratios, std::uint64_t seed) {
  const std::vector<double> fr{ratios.train, ratios.validation, ratios.test};
  for (double f : fr)
    if (!(f > 0.0)) throw ConfigError("split ratios must all be positive");
  if (std::abs(fr[0] + fr[1] + fr[2] - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");
  if (dataset.empty()) throw ConfigError("cannot split an empty dataset");

  const std::size_t n = dataset.size();
  const auto sizes = apportion(n, fr);

  // Deal split slots along the sequence: each slot goes to the non-full split
  // whose running count lags its proportional target the most.
  std::vector<int> slots(n);
  std::vector<std::size_t> taken(3, 0);
  for (std::size_t i = 0; i < n; ++i) {
    int best = -1;
    double best_deficit = 0;
    for (int k = 0; k < 3; ++k) {
      if (taken[k] >= sizes[k]) continue;
      const double deficit = static_cast<double>(sizes[k]) * static_cast<double>(i + 1) / static_cast<double>(n) -
                             static_cast<double>(taken[k]);
      if (best < 0 || deficit > best_deficit + 1e-12) {
        best = k;
        best_deficit = deficit;
      }
    }
    slots[i] = best;
    ++taken[static_cast<std::size_t>(best)];
  }

  std::vector<std::string> tumor, negative, unlabeled;
  for (const auto& s : dataset.scans) {
    if (!s.ground_truth)
      unlabeled.push_back(s.scan_id);
    else if (s.ground_truth->label == Label::tumor)
      tumor.push_back(s.scan_id);
    else
      negative.push_back(s.scan_id);
  }
  Rng rng(seed);
  std::vector<std::string> order;
  order.reserve(n);
  for (auto* group : {&tumor, &negative, &unlabeled}) {
    std::sort(group->begin(), group->end());
    rng.shuffle(std::span<std::string>(*group));
    order.insert(order.end(), group->begin(), group->end());
  }
  {
    std::set<std::string> uniq(order.begin(), order.end());
    if (uniq.size() != order.size()) throw ValidationError("scan_ids must be unique within a dataset");
  }

  DatasetSplit split;
  split.seed = seed;
  split.ratios = ratios;
  for (std::size_t i = 0; i < n; ++i) {
    auto& dst = slots[i] == 0 ? split.train : slots[i] == 1 ? split.validation : split.test;
    dst.push_back(order[i]);
  }
  return split;
}

// ---------------------------------------------------------------------------
// Patient ids

const std::string& PatientIdMap::at(const std::string& scan_id) const {
  auto it = entries.find(scan_id);
  if (it == entries.end()) throw LookupError("no patient_id recorded for scan_id '" + scan_id + "'");
  return it->second;
}

std::pair<Dataset, PatientIdMap> strip_patient_ids(Dataset dataset) {
  PatientIdMap map;
  for (auto& s : dataset.scans) {
    if (s.patient_id) map.entries.emplace(s.scan_id, std::move(*s.patient_id));
    s.patient_id.reset();
  }
  return {std::move(dataset), std::move(map)};
}

Dataset reattach_patient_ids(Dataset dataset, const PatientIdMap& map) {
  for (auto& s : dataset.scans)
    if (map.entries.count(s.scan_id)) s.patient_id = map.at(s.scan_id);
  return dataset;
}

// ---------------------------------------------------------------------------
// Synthetic data

BinaryMask rasterize_ellipse(int rows, int cols, double cr, double cc, double rr, double rc, double angle) {
  BinaryMask m(rows, cols);
  const double ca = std::cos(angle), sa = std::sin(angle);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      const double dy = r + 0.5 - cr, dx = c + 0.5 - cc;
      const double u = dy * ca + dx * sa;   // along the row semi-axis
      const double v = -dy * sa + dx * ca;  // along the column semi-axis
      if ((u * u) / (rr * rr) + (v * v) / (rc * rc) <= 1.0) m.at(r, c) = 1;
    }
  return m;
}

namespace {

bool overlaps(const BinaryMask& a, const BinaryMask& b) {
  for (std::size_t i = 0; i < a.data.size(); ++i)
    if (a.data[i] && b.data[i]) return true;
  return false;
}

bool contained(const BinaryMask& inner, const BinaryMask& outer) {
  for (std::size_t i = 0; i < inner.data.size(); ++i)
    if (inner.data[i] && !outer.data[i]) return false;
  return true;
}

/// Uniform noise smoothed by a 3x3 box filter, values roughly in [-1, 1].
std::vector<double> smooth_noise(int rows, int cols, Rng& rng) {
  std::vector<double> raw(static_cast<std::size_t>(rows) * cols);
  for (auto& v : raw) v = rng.uniform(-1.0, 1.0);
  std::vector<double> out(raw.size());
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      double s = 0;
      int k = 0;
      for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc) {
          const int rr = r + dr, cc = c + dc;
          if (rr < 0 || cc < 0 || rr >= rows || cc >= cols) continue;
          s += raw[static_cast<std::size_t>(rr) * cols + cc];
          ++k;
        }
      out[static_cast<std::size_t>(r) * cols + c] = 1.7 * s / k;
    }
  return out;
}

std::uint8_t clamp_u8(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

}  // namespace

Dataset generate_synthetic_dataset(std::size_t n, std::uint64_t seed, const SyntheticParams& p) {
  if (n < 1) throw ConfigError("synthetic dataset size must be at least 1");
  if (p.rows < kMinImageSide || p.cols < kMinImageSide) throw ConfigError("synthetic image sides must be >= 16");
  if (!(p.min_radius > 0 && p.min_radius <= p.max_radius)) throw ConfigError("invalid synthetic radius range");
  if (p.max_blobs < 1) throw ConfigError("max_blobs must be >= 1");

  Rng rng(seed);
  std::vector<Label> labels(n, Label::no_tumor);
  std::fill_n(labels.begin(), (n + 1) / 2, Label::tumor);
  rng.shuffle(std::span<Label>(labels));

  const int width = static_cast<int>(std::to_string(std::max<std::size_t>(n, 10000) - 1).size());
  auto padded = [&](std::size_t i) {
    std::string s = std::to_string(i);
    return std::string(static_cast<std::size_t>(width) - std::min<std::size_t>(s.size(), width), '0') + s;
  };

  Dataset ds;
  for (std::size_t i = 0; i < n; ++i) {
    const int rows = p.rows, cols = p.cols;
    ScanRecord rec;
    rec.scan_id = "synth_" + padded(i);
    rec.patient_id = "P-" + padded(i + 1);
    rec.image = Image(rows, cols, 1);

    // Head outline: a large ellipse of textured tissue on a dark background.
    const double brain_rr = rows * rng.uniform(0.38, 0.45), brain_rc = cols * rng.uniform(0.34, 0.42);
    const double brain_cr = rows * 0.5 + rng.uniform(-1.5, 1.5), brain_cc = cols * 0.5 + rng.uniform(-1.5, 1.5);
    const auto brain = rasterize_ellipse(rows, cols, brain_cr, brain_cc, brain_rr, brain_rc, rng.uniform(-0.2, 0.2));
    const double tissue = rng.uniform(p.min_tissue_intensity, p.max_tissue_intensity);
    const auto texture = smooth_noise(rows, cols, rng);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) {
        const double t = texture[static_cast<std::size_t>(r) * cols + c];
        rec.image.at(r, c) = brain.at(r, c) ? clamp_u8(tissue + 18.0 * t) : clamp_u8(6.0 + 5.0 * t);
      }

    std::vector<BinaryMask> masks;
    if (labels[i] == Label::tumor) {
      const int blobs = static_cast<int>(rng.uniform_int(1, p.max_blobs));
      BinaryMask occupied(rows, cols);
      for (int attempt = 0; static_cast<int>(masks.size()) < blobs && attempt < 200; ++attempt) {
        const double rr = rng.uniform(p.min_radius, p.max_radius);
        const double rc = rng.uniform(p.min_radius, p.max_radius);
        const double cr = rng.uniform(brain_cr - brain_rr * 0.6, brain_cr + brain_rr * 0.6);
        const double cc = rng.uniform(brain_cc - brain_rc * 0.6, brain_cc + brain_rc * 0.6);
        const double ang = rng.uniform(0.0, 3.141592653589793);
        auto blob = rasterize_ellipse(rows, cols, cr, cc, rr, rc, ang);
        // Keep a gap so instances stay separate connected components.
        const auto halo = rasterize_ellipse(rows, cols, cr, cc, rr + 2.0, rc + 2.0, ang);
        if (blob.empty() || overlaps(halo, occupied) || !contained(blob, brain)) continue;
        for (std::size_t k = 0; k < halo.data.size(); ++k) occupied.data[k] |= halo.data[k];
        masks.push_back(std::move(blob));
      }
      if (masks.empty()) {
        // Fallback: a blob at the brain centre always fits.
        masks.push_back(rasterize_ellipse(rows, cols, brain_cr, brain_cc, p.min_radius, p.min_radius, 0.0));
      }
      for (const auto& m : masks) {
        const double level = rng.uniform(p.min_tumor_intensity, p.max_tumor_intensity);
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < cols; ++c)
            if (m.at(r, c))
              rec.image.at(r, c) = clamp_u8(level + 8.0 * texture[static_cast<std::size_t>(r) * cols + c]);
      }
    }
    rec.ground_truth = GroundTruth::from_masks(labels[i], std::move(masks));
    ds.scans.push_back(std::move(rec));
  }
  return ds;
}

}  // namespace tumorseg
