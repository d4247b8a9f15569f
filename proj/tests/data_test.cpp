#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "psal/checkpoint.hpp"
#include "psal/data.hpp"
#include "psal/error.hpp"

namespace psal {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "psal_data_test";
  fs::create_directories(dir);
  return dir / name;
}

void push_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

void write_idx_pair(const fs::path& images, const fs::path& labels, std::uint32_t label_magic) {
  std::vector<std::uint8_t> img;
  push_be32(img, 0x00000803);
  push_be32(img, 2);
  push_be32(img, 28);
  push_be32(img, 28);
  for (std::size_t i = 0; i < 2 * 28 * 28; ++i) img.push_back(static_cast<std::uint8_t>(i % 256));
  std::vector<std::uint8_t> lab;
  push_be32(lab, label_magic);
  push_be32(lab, 2);
  lab.push_back(3);
  lab.push_back(8);
  write_file_bytes(images, img);
  write_file_bytes(labels, lab);
}

TEST(DataPipeline, IdxFixtureGivesTwoSamples) {
  write_idx_pair(scratch("img.idx"), scratch("lab.idx"), 0x00000801);
  const Dataset ds = load_idx(scratch("img.idx"), scratch("lab.idx"));
  ASSERT_EQ(ds.size(), 2u);
  for (const auto& s : ds.samples) EXPECT_EQ(s.image.shape(), (Shape{1, 28, 28}));
  EXPECT_EQ(ds.samples[0].label, 3u);
  EXPECT_EQ(ds.samples[1].label, 8u);
  EXPECT_DOUBLE_EQ(ds.samples[0].image.at(255), 1.0);
  EXPECT_DOUBLE_EQ(ds.samples[0].image.at(0), 0.0);
}

TEST(DataPipeline, IdxWrongLabelMagicIsFormatError) {
  write_idx_pair(scratch("img2.idx"), scratch("lab2.idx"), 0x00000803);
  EXPECT_THROW(load_idx(scratch("img2.idx"), scratch("lab2.idx")), FormatError);
}

TEST(DataPipeline, IdxMissingFile) {
  EXPECT_THROW(load_idx(scratch("nope.idx"), scratch("nope2.idx")), MissingArtifactError);
}

TEST(DataPipeline, CifarRecordLabelSeven) {
  std::vector<std::uint8_t> rec(3073, 128);
  rec[0] = 7;
  write_file_bytes(scratch("one.bin"), rec);
  const Dataset ds = load_cifar10_bin({scratch("one.bin")});
  ASSERT_EQ(ds.size(), 1u);
  EXPECT_EQ(ds.samples[0].label, 7u);
  EXPECT_EQ(ds.samples[0].image.shape(), (Shape{3, 32, 32}));
  EXPECT_NEAR(ds.samples[0].image.at(5), 128.0 / 255.0, 1e-12);
}

TEST(DataPipeline, CifarTruncatedAndBadLabel) {
  write_file_bytes(scratch("short.bin"), std::vector<std::uint8_t>(3072, 0));
  EXPECT_THROW(load_cifar10_bin({scratch("short.bin")}), FormatError);
  std::vector<std::uint8_t> rec(3073, 0);
  rec[0] = 10;
  write_file_bytes(scratch("badlabel.bin"), rec);
  EXPECT_THROW(load_cifar10_bin({scratch("badlabel.bin")}), FormatError);
}

TEST(DataPipeline, SynthCountsAndRange) {
  SynthSpec spec;
  spec.num_classes = 2;
  spec.per_class = 10;
  const Dataset ds = synth_blobs(spec);
  ASSERT_EQ(ds.size(), 20u);
  std::size_t ones = 0;
  for (const auto& s : ds.samples) {
    EXPECT_LT(s.label, 2u);
    ones += s.label;
    for (double v : s.image.data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
  EXPECT_EQ(ones, 10u);
}

TEST(DataPipeline, SynthDeterministicPerSeed) {
  SynthSpec spec;
  spec.per_class = 3;
  const Dataset a = synth_blobs(spec), b = synth_blobs(spec);
  spec.seed = 9;
  const Dataset c = synth_blobs(spec);
  EXPECT_EQ(dataset_checksum(a), dataset_checksum(b));
  EXPECT_NE(dataset_checksum(a), dataset_checksum(c));
}

TEST(DataPipeline, ObjectBoxesCoverOwnBlob) {
  SynthSpec spec;
  spec.num_classes = 4;
  spec.per_class = 10;
  spec.distractor_prob = 0.0;
  spec.noise = 0.0;
  spec.seed = 5;
  const Dataset ds = synth_blobs(spec);
  const auto boxes = synth_object_boxes(spec);
  ASSERT_EQ(boxes.size(), ds.size());
  const std::size_t h = spec.height, w = spec.width;
  for (const auto& s : ds.samples) {
    const Rect& r = boxes.at(s.id);
    ASSERT_GT(r.height, 0u);
    ASSERT_LE(r.top + r.height, h);
    ASSERT_LE(r.left + r.width, w);
    // strongest deviation from the flat background sits inside the box
    std::size_t best = 0;
    double best_v = -1;
    for (std::size_t i = 0; i < h * w; ++i) {
      double d = 0;
      for (std::size_t c = 0; c < spec.channels; ++c) d += std::fabs(s.image.at(c * h * w + i) - 0.5);
      if (d > best_v) best_v = d, best = i;
    }
    EXPECT_TRUE(r.contains(best / w, best % w)) << "sample " << s.id;
  }
}

TEST(DataPipeline, SplitSizesDisjointExhaustive) {
  SynthSpec spec;
  spec.per_class = 10;
  const Dataset ds = synth_blobs(spec);
  const Splits parts = split(ds, {0.8, 0.1, 0.1, 4});
  EXPECT_EQ(parts.train.size(), 80u);
  EXPECT_EQ(parts.val.size(), 10u);
  EXPECT_EQ(parts.holdout.size(), 10u);
  std::set<std::size_t> seen;
  for (const auto* d : {&parts.train, &parts.val, &parts.holdout}) {
    for (const auto& s : d->samples) EXPECT_TRUE(seen.insert(s.id).second) << "id " << s.id << " in two splits";
  }
  EXPECT_EQ(seen.size(), 100u);
}

TEST(DataPipeline, SameSeedSameMembership) {
  SynthSpec spec;
  spec.per_class = 10;
  const Dataset ds = synth_blobs(spec);
  auto ids = [](const Dataset& d) {
    std::vector<std::size_t> out;
    for (const auto& s : d.samples) out.push_back(s.id);
    return out;
  };
  const Splits a = split(ds, {0.8, 0.1, 0.1, 11}), b = split(ds, {0.8, 0.1, 0.1, 11}), c = split(ds, {0.8, 0.1, 0.1, 12});
  EXPECT_EQ(ids(a.val), ids(b.val));
  EXPECT_EQ(ids(a.holdout), ids(b.holdout));
  EXPECT_NE(ids(a.val), ids(c.val));
}

TEST(DataPipeline, EmptySplitAndBadFractions) {
  SynthSpec spec;
  spec.num_classes = 2;
  spec.per_class = 2;
  const Dataset ds = synth_blobs(spec);
  EXPECT_THROW(split(ds, {0.8, 0.1, 0.1, 0}), ConfigError);  // 4 samples: val rounds to 0
  EXPECT_THROW(split(ds, {0.5, 0.5, 0.5, 0}), ConfigError);
}

TEST(DataPipeline, TrainSplitStandardized) {
  SynthSpec spec;
  spec.per_class = 20;
  const PreparedData data = prepare(synth_blobs(spec), {0.8, 0.1, 0.1, 0});
  const NormalizationStats after = compute_normalization(data.splits.train);
  for (std::size_t ch = 0; ch < after.mean.size(); ++ch) {
    EXPECT_NEAR(after.mean[ch], 0.0, 1e-6);
    EXPECT_NEAR(after.std[ch], 1.0, 1e-6);
  }
  // Val uses the train statistics, so it is not exactly standardized itself.
  const NormalizationStats val = compute_normalization(data.splits.val);
  EXPECT_GT(std::fabs(val.mean[0]) + std::fabs(val.std[0] - 1.0), 1e-9);
  EXPECT_THROW(data.by_name("test"), ConfigError);
}

TEST(DataPipeline, ManifestRoundTrip) {
  DatasetManifest m;
  m.kind = "synth";
  m.synth.per_class = 5;
  m.synth.seed = 3;
  m.split = {0.6, 0.2, 0.2, 5};
  const Dataset raw = load_raw(m);
  const PreparedData data = prepare(raw, m.split);
  const auto j = manifest_to_json(m, data, dataset_checksum(raw));
  EXPECT_EQ(j.at("counts").at("train").get<std::size_t>(), 30u);
  const DatasetManifest back = manifest_from_json(j);
  EXPECT_EQ(dataset_checksum(load_raw(back)), j.at("checksum").get<std::uint32_t>());
  EXPECT_THROW(manifest_from_json(nlohmann::json{{"kind", "imagenet"}, {"split", j["split"]}}), ConfigError);
}

}  // namespace
}  // namespace psal
