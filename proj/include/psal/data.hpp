#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "psal/tensor.hpp"

namespace psal {

struct Sample {
  std::size_t id = 0;  // index in the source dataset
  Tensor image;        // [C,H,W]
  std::size_t label = 0;
};

struct Dataset {
  std::vector<Sample> samples;
  std::size_t num_classes = 0;
  Shape image_shape;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  /// Index of the sample with the given id, or throws ConfigError.
  std::size_t index_of(std::size_t id) const;
};

/// MNIST-style IDX pair: images magic 0x00000803, labels magic 0x00000801
/// (big-endian). Pixels are scaled to [0,1]; images become [1,rows,cols].
Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

/// CIFAR-10 binary batches: 1 label byte + 3072 pixel bytes (R,G,B planes).
Dataset load_cifar10_bin(const std::vector<std::filesystem::path>& paths);

struct Rect {
  std::size_t top = 0, left = 0, height = 0, width = 0;
  bool contains(std::size_t y, std::size_t x) const {
    return y >= top && y < top + height && x >= left && x < left + width;
  }
};

struct SynthSpec {
  std::size_t num_classes = 10;
  std::size_t per_class = 100;
  std::size_t channels = 3;
  std::size_t height = 16;
  std::size_t width = 16;
  /// Amplitude of the class blob; 0 removes all class signal.
  double separation = 1.0;
  /// Probability that an image also carries a blob of its class's partner class.
  double distractor_prob = 0.5;
  /// Peak amplitude of the distractor blob.
  double distractor_strength = 1.0;
  double noise = 0.08;
  std::uint64_t seed = 0;
};

/// Class-conditional Gaussian blob images in [0,1]. Each class has a fixed
/// location and colour; classes are paired so that distractors come from a
/// fixed partner, which yields structured confusions.
Dataset synth_blobs(const SynthSpec& spec);
/// Box around each sample's own-class blob (centre +- 2 sigma, clipped), keyed
/// by sample id. Plays the role of annotated object boxes.
std::map<std::size_t, Rect> synth_object_boxes(const SynthSpec& spec);

struct NormalizationStats {
  std::vector<double> mean;
  std::vector<double> std;
};

struct SplitSpec {
  double train = 0.8;
  double val = 0.1;
  double holdout = 0.1;
  std::uint64_t seed = 0;
};

struct Splits {
  Dataset train, val, holdout;
};

Splits split(const Dataset& dataset, const SplitSpec& spec);
/// Per-channel mean and population std.
NormalizationStats compute_normalization(const Dataset& dataset);
Dataset normalize(const Dataset& dataset, const NormalizationStats& stats);

struct PreparedData {
  Splits splits;  // normalized with train-split statistics
  NormalizationStats normalization;
  const Dataset& by_name(const std::string& split) const;
};

PreparedData prepare(const Dataset& raw, const SplitSpec& spec);

/// Reproducible description of a dataset: source, split and checksums.
struct DatasetManifest {
  std::string kind;  // "synth" | "idx" | "cifar10"
  SynthSpec synth;
  std::vector<std::string> paths;
  SplitSpec split;
};

nlohmann::json manifest_to_json(const DatasetManifest& manifest, const PreparedData& data,
                                std::uint32_t checksum);
DatasetManifest manifest_from_json(const nlohmann::json& j);
Dataset load_raw(const DatasetManifest& manifest);
/// CRC-32 over labels and pixel values, used to pin dataset identity.
std::uint32_t dataset_checksum(const Dataset& dataset);

/// Reads a manifest file, regenerates or loads the raw data, checks the
/// recorded checksum when present and returns the prepared splits.
PreparedData load_dataset_manifest(const std::filesystem::path& path);
/// Writes the manifest with counts, checksum and normalization for `raw`.
void save_dataset_manifest(const DatasetManifest& manifest, const Dataset& raw, const PreparedData& data,
                           const std::filesystem::path& path);

}  // namespace psal
