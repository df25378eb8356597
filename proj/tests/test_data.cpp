#include <fstream>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "support.hpp"
#include "tumorseg/data.hpp"
#include "tumorseg/image.hpp"

using namespace tumorseg;
using fixture::TempDir;
namespace fs = std::filesystem;

namespace {

void expect_same_scans(const Dataset& a, const Dataset& b) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& x = a.scans[i];
    const auto& y = b.scans[i];
    EXPECT_EQ(x.scan_id, y.scan_id);
    EXPECT_EQ(x.patient_id, y.patient_id);
    EXPECT_EQ(x.image, y.image) << x.scan_id;
    ASSERT_TRUE(y.ground_truth);
    EXPECT_EQ(x.ground_truth->label, y.ground_truth->label);
    EXPECT_EQ(x.ground_truth->masks, y.ground_truth->masks) << x.scan_id;
    EXPECT_EQ(x.ground_truth->boxes, y.ground_truth->boxes);
  }
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Labels, ManifestSpelling) {
  EXPECT_EQ(manifest_label(Label::tumor), "yes");
  EXPECT_EQ(parse_manifest_label("no"), Label::no_tumor);
  EXPECT_THROW(parse_manifest_label("maybe"), ValidationError);
}

TEST(Synthetic, DeterministicPerSeed) {
  const auto a = generate_synthetic_dataset(1, 7), b = generate_synthetic_dataset(1, 7);
  ASSERT_EQ(a.size(), 1u);
  EXPECT_EQ(a.scans[0].image, b.scans[0].image);
  EXPECT_NE(a.scans[0].image, generate_synthetic_dataset(1, 8).scans[0].image);
}

TEST(Synthetic, BalancedLabels) {
  const auto ds = generate_synthetic_dataset(40, 7);
  EXPECT_GE(ds.count(Label::tumor), 19u);
  EXPECT_LE(ds.count(Label::tumor), 21u);
  EXPECT_THROW(generate_synthetic_dataset(0, 7), ConfigError);
}

TEST(Synthetic, MasksAreExactlyThePaintedPixels) {
  const auto ds = generate_synthetic_dataset(30, 21);
  for (const auto& s : ds.scans) {
    BinaryMask painted(s.image.rows, s.image.cols), unioned(s.image.rows, s.image.cols);
    for (int r = 0; r < s.image.rows; ++r)
      for (int c = 0; c < s.image.cols; ++c) painted.at(r, c) = s.image.at(r, c) > 160;
    for (const auto& m : s.ground_truth->masks)
      for (std::size_t k = 0; k < m.data.size(); ++k) unioned.data[k] |= m.data[k];
    EXPECT_EQ(painted, unioned) << s.scan_id;
    for (std::size_t k = 0; k < s.ground_truth->masks.size(); ++k)
      EXPECT_EQ(s.ground_truth->boxes[k], oracle::brute_box(s.ground_truth->masks[k]));
    if (s.ground_truth->label == Label::no_tumor) EXPECT_TRUE(s.ground_truth->masks.empty());
  }
}

TEST(GroundTruth, RejectsMasksOnNegativeScansAndLooseBoxes) {
  BinaryMask m(16, 16);
  m.at(3, 3) = 1;
  EXPECT_THROW(GroundTruth::from_masks(Label::no_tumor, {m}).validate(16, 16, "s"), ValidationError);
  auto gt = GroundTruth::from_masks(Label::tumor, {m});
  gt.boxes[0].r1 += 1;
  EXPECT_THROW(gt.validate(16, 16, "s"), ValidationError);
  EXPECT_THROW(GroundTruth::from_masks(Label::tumor, {m}).validate(16, 17, "s"), ValidationError);
}

TEST(Loader, MaskDirsRoundTripIsPixelExact) {
  TempDir dir;
  const auto ds = generate_synthetic_dataset(10, 4);
  save_mask_dirs(ds, dir.path());
  expect_same_scans(ds, load_dataset(dir.path(), Layout::mask_dirs));
}

TEST(Loader, AnnotationJsonRoundTripIsPixelExact) {
  TempDir dir;
  const auto ds = generate_synthetic_dataset(10, 5);
  save_annotation_json(ds, dir.path());
  expect_same_scans(ds, load_dataset(dir.path(), Layout::annotation_json));
}

TEST(Loader, EmptyRootHasNoScans) {
  TempDir dir;
  try {
    load_dataset(dir.path(), Layout::mask_dirs);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("no scans found"), std::string::npos);
  }
  EXPECT_THROW(load_dataset(dir.path(), Layout::annotation_json), DataError);
  EXPECT_THROW(load_dataset(dir / "absent", Layout::mask_dirs), IoError);
}

TEST(Loader, ReportsEveryMissingOrCorruptFile) {
  TempDir dir;
  const auto ds = generate_synthetic_dataset(6, 4);
  save_mask_dirs(ds, dir.path());
  fs::remove(dir / ("images/" + ds.scans[1].scan_id + ".png"));
  std::ofstream(dir / ("images/" + ds.scans[3].scan_id + ".png"), std::ios::trunc) << "not a png";
  try {
    load_dataset(dir.path(), Layout::mask_dirs);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    ASSERT_EQ(e.items().size(), 2u);
    EXPECT_NE(e.items()[0].find(ds.scans[1].scan_id), std::string::npos);
    EXPECT_NE(e.items()[1].find(ds.scans[3].scan_id), std::string::npos);
  }
}

TEST(Loader, MaskShapeMismatchNamesScan) {
  TempDir dir;
  const auto ds = generate_synthetic_dataset(2, 9);
  save_mask_dirs(ds, dir.path());
  const auto& tumor = ds.scans[0].ground_truth->label == Label::tumor ? ds.scans[0] : ds.scans[1];
  BinaryMask small(20, 20);
  small.at(1, 1) = 1;
  write_mask_png(dir / ("masks/" + tumor.scan_id + "_0.png"), small);
  try {
    load_dataset(dir.path(), Layout::mask_dirs);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find(tumor.scan_id), std::string::npos);
  }
}

TEST(Rle, RoundTripsRandomMasks) {
  Rng rng(12);
  for (int i = 0; i < 50; ++i) {
    const int rows = static_cast<int>(rng.uniform_int(1, 30)), cols = static_cast<int>(rng.uniform_int(1, 30));
    BinaryMask m(rows, cols);
    for (auto& v : m.data) v = rng.uniform() < 0.3;
    EXPECT_EQ(decode_rle(encode_rle(m), rows, cols), m);
  }
  // Column-major, background first.
  BinaryMask m(2, 2);
  m.at(1, 0) = 1;
  EXPECT_EQ(encode_rle(m), (std::vector<std::uint32_t>{1, 1, 2}));
  EXPECT_THROW(decode_rle({1, 1}, 2, 2), ValidationError);
}

TEST(Split, LargestRemainderSizesFor310Scans) {
  SyntheticParams small;
  small.rows = small.cols = 16;
  small.min_radius = 2;
  small.max_radius = 3;
  const auto ds = generate_synthetic_dataset(310, 1, small);
  ASSERT_EQ(ds.count(Label::tumor), 155u);
  const auto split = split_dataset(ds, {0.7, 0.15, 0.15}, 42);
  // 217 + 46.5 + 46.5: the single leftover unit goes to the later of the tied splits.
  EXPECT_EQ(split.train.size(), 217u);
  EXPECT_EQ(split.validation.size(), 46u);
  EXPECT_EQ(split.test.size(), 47u);
  EXPECT_EQ(apportion(310, {0.7, 0.15, 0.15}), (std::vector<std::size_t>{217, 46, 47}));
}

TEST(Split, RejectsBadRatios) {
  const auto ds = generate_synthetic_dataset(10, 1);
  EXPECT_THROW(split_dataset(ds, {1.0, 0.0, 0.0}, 1), ConfigError);
  EXPECT_THROW(split_dataset(ds, {0.5, 0.3, 0.3}, 1), ConfigError);
  EXPECT_THROW(split_dataset(Dataset{}, {}, 1), ConfigError);
}

TEST(Split, DeterministicPartitionAndStratified) {
  Rng rng(31);
  for (int trial = 0; trial < 25; ++trial) {
    SyntheticParams p;
    p.rows = p.cols = 16;
    p.min_radius = 2;
    p.max_radius = 3;
    const auto n = static_cast<std::size_t>(rng.uniform_int(3, 120));
    const auto ds = generate_synthetic_dataset(n, rng.next(), p);
    const double a = rng.uniform(0.2, 0.8), b = rng.uniform(0.05, 0.9 - a);
    const SplitRatios ratios{a, b, 1.0 - a - b};
    const auto seed = rng.next();
    const auto s1 = split_dataset(ds, ratios, seed), s2 = split_dataset(ds, ratios, seed);
    EXPECT_EQ(s1.train, s2.train);
    EXPECT_EQ(s1.validation, s2.validation);
    EXPECT_EQ(s1.test, s2.test);

    std::multiset<std::string> all;
    for (const auto* part : {&s1.train, &s1.validation, &s1.test}) all.insert(part->begin(), part->end());
    ASSERT_EQ(all.size(), n);
    for (const auto& s : ds.scans) EXPECT_EQ(all.count(s.scan_id), 1u);

    const double tumor_share = static_cast<double>(ds.count(Label::tumor)) / static_cast<double>(n);
    for (const auto* part : {&s1.train, &s1.validation, &s1.test}) {
      std::size_t tumors = 0;
      for (const auto& id : *part) tumors += ds.find(id).ground_truth->label == Label::tumor;
      EXPECT_LE(std::abs(static_cast<double>(tumors) - tumor_share * static_cast<double>(part->size())), 1.0 + 1e-9)
          << "trial " << trial;
    }
  }
}

TEST(PatientIds, StripThenReattach) {
  auto ds = generate_synthetic_dataset(3, 2);
  ds.scans[0].patient_id = "p1";
  ds.scans[1].patient_id = "p2";
  ds.scans[2].patient_id = "p3";
  auto [stripped, map] = strip_patient_ids(ds);
  EXPECT_EQ(map.entries.size(), 3u);
  for (const auto& s : stripped.scans) EXPECT_FALSE(s.patient_id);
  const auto back = reattach_patient_ids(stripped, map);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(back.scans[i].patient_id, ds.scans[i].patient_id);
}

TEST(PatientIds, NothingToStrip) {
  auto ds = generate_synthetic_dataset(2, 2);
  for (auto& s : ds.scans) s.patient_id.reset();
  auto [stripped, map] = strip_patient_ids(ds);
  EXPECT_TRUE(map.entries.empty());
  EXPECT_EQ(manifest_csv(stripped), manifest_csv(ds));
}

TEST(PatientIds, ManifestIsByteIdenticalAfterRoundTrip) {
  const auto ds = generate_synthetic_dataset(12, 6);
  auto [stripped, map] = strip_patient_ids(ds);
  EXPECT_EQ(manifest_csv(reattach_patient_ids(std::move(stripped), map)), manifest_csv(ds));

  TempDir a, b;
  save_mask_dirs(ds, a.path());
  auto [s2, m2] = strip_patient_ids(load_dataset(a.path(), Layout::mask_dirs));
  save_mask_dirs(reattach_patient_ids(std::move(s2), m2), b.path());
  EXPECT_EQ(slurp(a / kManifestName), slurp(b / kManifestName));
}

TEST(PatientIds, ReattachToRecordAndUnknownScan) {
  struct Result {
    std::optional<std::string> patient_id;
    double confidence = 0.8;
  };
  PatientIdMap map;
  map.entries["s1"] = "p9";
  EXPECT_EQ(reattach_patient_id(Result{}, map, "s1").patient_id, "p9");
  EXPECT_THROW(reattach_patient_id(Result{}, map, "s404"), LookupError);
}

TEST(Images, PngRoundTripAndSignatures) {
  TempDir dir;
  Image img(17, 19, 3);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<std::uint8_t>(i * 7);
  write_png(dir / "x.png", img);
  EXPECT_EQ(read_image(dir / "x.png"), img);
  const auto bytes = encode_png(img);
  EXPECT_TRUE(looks_like_png(bytes));
  EXPECT_FALSE(looks_like_jpeg(bytes));
  const std::vector<std::uint8_t> junk{'h', 'e', 'l', 'l', 'o'};
  EXPECT_THROW(decode_image(junk), IoError);
  EXPECT_THROW(validate_image(Image(8, 32, 1)), ValidationError);
}
