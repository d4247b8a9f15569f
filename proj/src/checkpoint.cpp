#include "psal/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <random>

#include "psal/error.hpp"

namespace psal {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'P', 'S', 'A', 'L'};
constexpr std::uint8_t kVersion = 0x01;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

std::uint32_t crc32_of(const std::uint8_t* data, std::size_t size) {
  uLong crc = crc32(0L, Z_NULL, 0);
  while (size > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    size -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

nlohmann::json spec_to_json(const ModelSpec& spec) {
  return {{"architecture", architecture_name(spec.architecture)},
          {"widths", spec.widths},
          {"blocks_per_stage", spec.blocks_per_stage},
          {"input_shape", {spec.channels, spec.height, spec.width}},
          {"num_classes", spec.num_classes}};
}

ModelSpec spec_from_json(const nlohmann::json& j) {
  try {
    ModelSpec spec;
    spec.architecture = parse_architecture(j.at("architecture").get<std::string>());
    spec.widths = j.at("widths").get<std::vector<std::size_t>>();
    spec.blocks_per_stage = j.at("blocks_per_stage").get<std::size_t>();
    const auto shape = j.at("input_shape").get<std::vector<std::size_t>>();
    if (shape.size() != 3) throw ConfigError("input_shape must have three entries");
    spec.channels = shape[0];
    spec.height = shape[1];
    spec.width = shape[2];
    spec.num_classes = j.at("num_classes").get<std::size_t>();
    spec.validate();
    return spec;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid model spec: ") + e.what());
  }
}

Tensor golden_input(const ModelSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> v(spec.channels * spec.height * spec.width);
  for (auto& x : v) x = dist(rng);
  return Tensor({spec.channels, spec.height, spec.width}, std::move(v));
}

GoldenVector make_golden(const Model& model, std::uint64_t seed) {
  return {seed, model.predict(golden_input(model.spec(), seed)).confidences};
}

std::vector<std::uint8_t> encode_checkpoint(const Model& model, const TrainingMetadata& metadata) {
  nlohmann::json tensors = nlohmann::json::array();
  std::vector<std::uint8_t> blobs;
  for (const auto& p : model.parameters()) {
    tensors.push_back({{"name", p.name}, {"shape", p.value.shape()}, {"offset", blobs.size()}});
    for (double v : p.value.data()) {
      const float f = static_cast<float>(v);
      std::uint8_t bytes[4];
      std::memcpy(bytes, &f, 4);
      blobs.insert(blobs.end(), bytes, bytes + 4);
    }
  }
  nlohmann::json meta = {{"seed", metadata.seed}, {"epochs", metadata.epochs}, {"final_accuracy", metadata.final_accuracy}};
  if (metadata.golden) {
    meta["golden"] = {{"input_seed", metadata.golden->input_seed}, {"confidences", metadata.golden->confidences}};
  }
  const nlohmann::json header = {{"spec", spec_to_json(model.spec())}, {"tensors", tensors}, {"metadata", meta}};
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  out.push_back(kVersion);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), blobs.begin(), blobs.end());
  put_u32(out, crc32_of(blobs.data(), blobs.size()));
  return out;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 9 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("checkpoint: bad magic");
  if (bytes[4] != kVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(bytes[4]));
  const std::size_t header_len = get_u32(bytes.data() + 5);
  if (9 + header_len + 4 > bytes.size()) throw FormatError("checkpoint: truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 9, bytes.begin() + 9 + static_cast<long>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed header: ") + e.what());
  }
  const std::size_t blob_start = 9 + header_len;
  const std::size_t blob_len = bytes.size() - blob_start - 4;
  if (crc32_of(bytes.data() + blob_start, blob_len) != get_u32(bytes.data() + bytes.size() - 4)) {
    throw FormatError("checkpoint: CRC mismatch in tensor data");
  }

  try {
    ModelSpec spec = spec_from_json(header.at("spec"));
    Model model(spec, 0);
    const auto& descriptors = header.at("tensors");
    auto& params = model.parameters();
    if (descriptors.size() != params.size()) {
      throw FormatError("checkpoint: tensor count " + std::to_string(descriptors.size()) + " does not match spec (" +
                        std::to_string(params.size()) + ")");
    }
    std::size_t expected_offset = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& d = descriptors[i];
      if (d.at("name").get<std::string>() != params[i].name) {
        throw FormatError("checkpoint: tensor '" + d.at("name").get<std::string>() + "' where '" + params[i].name +
                          "' was expected");
      }
      if (d.at("shape").get<Shape>() != params[i].value.shape()) {
        throw FormatError("checkpoint: shape mismatch for " + params[i].name);
      }
      const std::size_t offset = d.at("offset").get<std::size_t>();
      const std::size_t count = params[i].value.numel();
      if (offset != expected_offset || offset + 4 * count > blob_len) {
        throw FormatError("checkpoint: bad or truncated blob for " + params[i].name);
      }
      auto values = params[i].value.mutable_data();
      for (std::size_t k = 0; k < count; ++k) {
        float f;
        std::memcpy(&f, bytes.data() + blob_start + offset + 4 * k, 4);
        values[k] = f;
      }
      expected_offset = offset + 4 * count;
    }
    if (expected_offset != blob_len) throw FormatError("checkpoint: trailing bytes in blob region");

    TrainingMetadata meta;
    const auto& m = header.at("metadata");
    meta.seed = m.at("seed").get<std::uint64_t>();
    meta.epochs = m.at("epochs").get<std::size_t>();
    meta.final_accuracy = m.at("final_accuracy").get<double>();
    if (m.contains("golden")) {
      meta.golden = GoldenVector{m["golden"].at("input_seed").get<std::uint64_t>(),
                                 m["golden"].at("confidences").get<std::vector<double>>()};
    }
    return {std::move(model), std::move(meta)};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed header: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for " + path.string());
}

void save_checkpoint(const Model& model, const TrainingMetadata& metadata, const std::filesystem::path& path) {
  write_file_bytes(path, encode_checkpoint(model, metadata));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file_bytes(path)); }

}  // namespace psal
