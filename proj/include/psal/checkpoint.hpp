#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "psal/model.hpp"

namespace psal {

struct GoldenVector {
  std::uint64_t input_seed = 0;
  std::vector<double> confidences;
};

struct TrainingMetadata {
  std::uint64_t seed = 0;
  std::size_t epochs = 0;
  double final_accuracy = 0.0;
  std::optional<GoldenVector> golden;
};

struct Checkpoint {
  Model model;
  TrainingMetadata metadata;
};

nlohmann::json spec_to_json(const ModelSpec& spec);
ModelSpec spec_from_json(const nlohmann::json& j);

/// Deterministic [1,C,H,W] standard-normal probe input for golden checks.
Tensor golden_input(const ModelSpec& spec, std::uint64_t seed);
GoldenVector make_golden(const Model& model, std::uint64_t seed);

/// Layout: "PSAL", version byte 0x01, u32 LE header length, UTF-8 JSON header
/// {spec, tensors:[{name, shape, offset}], metadata}, little-endian float32
/// blobs in descriptor order, u32 LE CRC-32 of the blob region.
std::vector<std::uint8_t> encode_checkpoint(const Model& model, const TrainingMetadata& metadata);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const Model& model, const TrainingMetadata& metadata, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

std::uint32_t crc32_of(const std::uint8_t* data, std::size_t size);

}  // namespace psal
