#include "psal/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>

#include "psal/checkpoint.hpp"
#include "psal/error.hpp"

namespace psal {

std::size_t Dataset::index_of(std::size_t id) const {
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].id == id) return i;
  }
  throw ConfigError("sample id " + std::to_string(id) + " not in dataset");
}

namespace {

std::uint32_t read_be32(const std::vector<std::uint8_t>& bytes, std::size_t offset) {
  if (offset + 4 > bytes.size()) throw FormatError("IDX: truncated header");
  return (static_cast<std::uint32_t>(bytes[offset]) << 24) | (static_cast<std::uint32_t>(bytes[offset + 1]) << 16) |
         (static_cast<std::uint32_t>(bytes[offset + 2]) << 8) | static_cast<std::uint32_t>(bytes[offset + 3]);
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const auto images = read_file_bytes(images_path);
  const auto labels = read_file_bytes(labels_path);
  if (read_be32(images, 0) != 0x00000803) throw FormatError("IDX images: bad magic in " + images_path.string());
  if (read_be32(labels, 0) != 0x00000801) throw FormatError("IDX labels: bad magic in " + labels_path.string());
  const std::size_t count = read_be32(images, 4);
  const std::size_t rows = read_be32(images, 8);
  const std::size_t cols = read_be32(images, 12);
  const std::size_t label_count = read_be32(labels, 4);
  if (count != label_count) {
    throw FormatError("IDX: image count " + std::to_string(count) + " != label count " + std::to_string(label_count));
  }
  if (rows == 0 || cols == 0) throw FormatError("IDX: zero image extent");
  if (images.size() < 16 + count * rows * cols) throw FormatError("IDX images: truncated pixel data");
  if (labels.size() < 8 + count) throw FormatError("IDX labels: truncated label data");

  Dataset ds;
  ds.image_shape = {1, rows, cols};
  std::size_t max_label = 0;
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<double> px(rows * cols);
    const std::uint8_t* src = images.data() + 16 + i * rows * cols;
    for (std::size_t k = 0; k < px.size(); ++k) px[k] = src[k] / 255.0;
    const std::size_t label = labels[8 + i];
    max_label = std::max(max_label, label);
    ds.samples.push_back({i, Tensor(ds.image_shape, std::move(px)), label});
  }
  ds.num_classes = std::max<std::size_t>(10, max_label + 1);
  return ds;
}

Dataset load_cifar10_bin(const std::vector<std::filesystem::path>& paths) {
  constexpr std::size_t kRecord = 1 + 3 * 32 * 32;
  Dataset ds;
  ds.image_shape = {3, 32, 32};
  ds.num_classes = 10;
  for (const auto& path : paths) {
    const auto bytes = read_file_bytes(path);
    if (bytes.empty() || bytes.size() % kRecord != 0) {
      throw FormatError("CIFAR-10: " + path.string() + " length " + std::to_string(bytes.size()) +
                        " is not a multiple of 3073");
    }
    for (std::size_t r = 0; r < bytes.size() / kRecord; ++r) {
      const std::uint8_t* rec = bytes.data() + r * kRecord;
      if (rec[0] > 9) throw FormatError("CIFAR-10: label byte " + std::to_string(rec[0]) + " > 9");
      std::vector<double> px(kRecord - 1);
      for (std::size_t k = 0; k < px.size(); ++k) px[k] = rec[1 + k] / 255.0;
      ds.samples.push_back({ds.samples.size(), Tensor(ds.image_shape, std::move(px)), rec[0]});
    }
  }
  return ds;
}

namespace {

// One pass produces both the images and the own-blob boxes, so the two never drift apart.
void synth_generate(const SynthSpec& spec, Dataset* out, std::map<std::size_t, Rect>* boxes) {
  if (spec.num_classes < 2 || spec.per_class == 0) throw ConfigError("synth: need >= 2 classes and >= 1 sample per class");
  if (spec.channels == 0 || spec.height < 4 || spec.width < 4) throw ConfigError("synth: image must be at least 4x4");
  if (spec.separation < 0 || spec.distractor_prob < 0 || spec.distractor_prob > 1 || spec.noise < 0) {
    throw ConfigError("synth: invalid amplitude or probability");
  }
  const std::size_t k = spec.num_classes, c = spec.channels, h = spec.height, w = spec.width;

  std::mt19937_64 layout_rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  struct ClassLook {
    double cx, cy;
    std::vector<double> colour;
  };
  std::vector<ClassLook> looks(k);
  for (auto& look : looks) {
    look.cx = 2.0 + unit(layout_rng) * (static_cast<double>(w) - 5.0);
    look.cy = 2.0 + unit(layout_rng) * (static_cast<double>(h) - 5.0);
    double norm = 0.0;
    look.colour.resize(c);
    for (auto& v : look.colour) {
      v = 2.0 * unit(layout_rng) - 1.0;
      norm += v * v;
    }
    norm = std::sqrt(std::max(norm, 1e-12));
    for (auto& v : look.colour) v /= norm;
  }
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), layout_rng);
  std::vector<std::size_t> partner(k);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t mate = i ^ 1u;
    partner[order[i]] = order[mate < k ? mate : (i + 1) % k];
  }

  const double sigma = 0.12 * static_cast<double>(std::min(h, w));
  auto paint = [&](std::vector<double>& px, const ClassLook& look, double amplitude, double dx, double dy) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double ex = static_cast<double>(x) - (look.cx + dx);
        const double ey = static_cast<double>(y) - (look.cy + dy);
        const double bump = amplitude * 0.4 * std::exp(-(ex * ex + ey * ey) / (2 * sigma * sigma));
        for (std::size_t ch = 0; ch < c; ++ch) px[(ch * h + y) * w + x] += bump * look.colour[ch];
      }
    }
  };

  Dataset& ds = *out;
  ds.num_classes = k;
  ds.image_shape = {c, h, w};
  const double distractor_scale = std::min(spec.separation, 1.0) * spec.distractor_strength;
  for (std::size_t i = 0; i < k * spec.per_class; ++i) {
    const std::size_t label = i % k;
    std::mt19937_64 rng(spec.seed * 0x9e3779b97f4a7c15ULL + i + 1);
    std::normal_distribution<double> noise(0.0, spec.noise);
    std::uniform_real_distribution<double> jitter(-1.0, 1.0);
    std::vector<double> px(c * h * w);
    for (auto& v : px) v = 0.5 + noise(rng);
    const double amp = spec.separation * (0.5 + 0.5 * unit(rng));
    const double dx = jitter(rng), dy = jitter(rng);
    paint(px, looks[label], amp, dx, dy);
    if (boxes) {
      auto clip = [](double v, std::size_t hi) {
        return static_cast<std::size_t>(std::clamp(v, 0.0, static_cast<double>(hi)));
      };
      const auto x0 = clip(std::floor(looks[label].cx + dx - 2 * sigma), w), x1 = clip(std::ceil(looks[label].cx + dx + 2 * sigma) + 1, w);
      const auto y0 = clip(std::floor(looks[label].cy + dy - 2 * sigma), h), y1 = clip(std::ceil(looks[label].cy + dy + 2 * sigma) + 1, h);
      (*boxes)[i] = Rect{y0, x0, y1 - y0, x1 - x0};
      continue;
    }
    if (unit(rng) < spec.distractor_prob) {
      const double damp = distractor_scale * unit(rng);
      const double ddx = jitter(rng), ddy = jitter(rng);
      paint(px, looks[partner[label]], damp, ddx, ddy);
    }
    for (auto& v : px) v = std::clamp(v, 0.0, 1.0);
    ds.samples.push_back({i, Tensor(ds.image_shape, std::move(px)), label});
  }
}

}  // namespace

Dataset synth_blobs(const SynthSpec& spec) {
  Dataset ds;
  synth_generate(spec, &ds, nullptr);
  return ds;
}

std::map<std::size_t, Rect> synth_object_boxes(const SynthSpec& spec) {
  Dataset scratch;
  std::map<std::size_t, Rect> boxes;
  synth_generate(spec, &scratch, &boxes);
  return boxes;
}

Splits split(const Dataset& dataset, const SplitSpec& spec) {
  if (spec.train < 0 || spec.val < 0 || spec.holdout < 0 || std::fabs(spec.train + spec.val + spec.holdout - 1.0) > 1e-9) {
    throw ConfigError("split fractions must be non-negative and sum to 1");
  }
  const std::size_t n = dataset.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(spec.seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::floor(spec.train * static_cast<double>(n) + 0.5));
  const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::floor(spec.val * static_cast<double>(n) + 0.5)));

  Splits out;
  for (auto* d : {&out.train, &out.val, &out.holdout}) {
    d->num_classes = dataset.num_classes;
    d->image_shape = dataset.image_shape;
  }
  auto take = [&](Dataset& dst, std::size_t from, std::size_t to) {
    std::vector<std::size_t> idx(order.begin() + static_cast<long>(from), order.begin() + static_cast<long>(to));
    std::sort(idx.begin(), idx.end());
    for (auto i : idx) dst.samples.push_back(dataset.samples[i]);
  };
  take(out.train, 0, n_train);
  take(out.val, n_train, n_train + n_val);
  take(out.holdout, n_train + n_val, n);
  if (out.train.empty() || out.val.empty() || out.holdout.empty()) throw ConfigError("split produced an empty partition");
  return out;
}

NormalizationStats compute_normalization(const Dataset& dataset) {
  if (dataset.empty()) throw ConfigError("cannot normalize an empty dataset");
  const std::size_t c = dataset.image_shape[0];
  const std::size_t plane = dataset.image_shape[1] * dataset.image_shape[2];
  NormalizationStats stats{std::vector<double>(c, 0.0), std::vector<double>(c, 0.0)};
  const double count = static_cast<double>(dataset.size() * plane);
  for (const auto& s : dataset.samples) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t i = 0; i < plane; ++i) stats.mean[ch] += s.image.at(ch * plane + i);
    }
  }
  for (auto& m : stats.mean) m /= count;
  for (const auto& s : dataset.samples) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t i = 0; i < plane; ++i) {
        const double d = s.image.at(ch * plane + i) - stats.mean[ch];
        stats.std[ch] += d * d;
      }
    }
  }
  for (auto& v : stats.std) v = std::sqrt(v / count);
  return stats;
}

Dataset normalize(const Dataset& dataset, const NormalizationStats& stats) {
  Dataset out;
  out.num_classes = dataset.num_classes;
  out.image_shape = dataset.image_shape;
  const std::size_t c = dataset.image_shape[0];
  if (stats.mean.size() != c || stats.std.size() != c) throw ShapeError("normalization stats channel mismatch");
  const std::size_t plane = dataset.image_shape[1] * dataset.image_shape[2];
  for (const auto& s : dataset.samples) {
    std::vector<double> px(s.image.data().begin(), s.image.data().end());
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double inv = stats.std[ch] > 0 ? 1.0 / stats.std[ch] : 1.0;
      for (std::size_t i = 0; i < plane; ++i) px[ch * plane + i] = (px[ch * plane + i] - stats.mean[ch]) * inv;
    }
    out.samples.push_back({s.id, Tensor(s.image.shape(), std::move(px)), s.label});
  }
  return out;
}

const Dataset& PreparedData::by_name(const std::string& name) const {
  if (name == "train") return splits.train;
  if (name == "val") return splits.val;
  if (name == "holdout") return splits.holdout;
  throw ConfigError("unknown split '" + name + "' (expected train, val or holdout)");
}

PreparedData prepare(const Dataset& raw, const SplitSpec& spec) {
  Splits parts = split(raw, spec);
  PreparedData out;
  out.normalization = compute_normalization(parts.train);
  out.splits.train = normalize(parts.train, out.normalization);
  out.splits.val = normalize(parts.val, out.normalization);
  out.splits.holdout = normalize(parts.holdout, out.normalization);
  return out;
}

std::uint32_t dataset_checksum(const Dataset& dataset) {
  std::vector<std::uint8_t> bytes;
  for (const auto& s : dataset.samples) {
    const std::uint64_t label = s.label;
    const auto* lp = reinterpret_cast<const std::uint8_t*>(&label);
    bytes.insert(bytes.end(), lp, lp + sizeof(label));
    const auto* p = reinterpret_cast<const std::uint8_t*>(s.image.data().data());
    bytes.insert(bytes.end(), p, p + s.image.numel() * sizeof(double));
  }
  return crc32_of(bytes.data(), bytes.size());
}

nlohmann::json manifest_to_json(const DatasetManifest& m, const PreparedData& data, std::uint32_t checksum) {
  nlohmann::json j;
  j["kind"] = m.kind;
  if (m.kind == "synth") {
    j["synth"] = {{"num_classes", m.synth.num_classes},   {"per_class", m.synth.per_class},
                  {"channels", m.synth.channels},         {"height", m.synth.height},
                  {"width", m.synth.width},               {"separation", m.synth.separation},
                  {"distractor_prob", m.synth.distractor_prob}, {"distractor_strength", m.synth.distractor_strength},
                  {"noise", m.synth.noise},               {"seed", m.synth.seed}};
  }
  j["paths"] = m.paths;
  j["split"] = {{"train", m.split.train}, {"val", m.split.val}, {"holdout", m.split.holdout}, {"seed", m.split.seed}};
  j["counts"] = {{"train", data.splits.train.size()}, {"val", data.splits.val.size()}, {"holdout", data.splits.holdout.size()}};
  j["checksum"] = checksum;
  j["normalization"] = {{"mean", data.normalization.mean}, {"std", data.normalization.std}};
  return j;
}

DatasetManifest manifest_from_json(const nlohmann::json& j) {
  try {
    DatasetManifest m;
    m.kind = j.at("kind").get<std::string>();
    if (m.kind == "synth") {
      const auto& s = j.at("synth");
      m.synth.num_classes = s.at("num_classes");
      m.synth.per_class = s.at("per_class");
      m.synth.channels = s.at("channels");
      m.synth.height = s.at("height");
      m.synth.width = s.at("width");
      m.synth.separation = s.at("separation");
      m.synth.distractor_prob = s.at("distractor_prob");
      m.synth.distractor_strength = s.at("distractor_strength");
      m.synth.noise = s.at("noise");
      m.synth.seed = s.at("seed");
    } else if (m.kind != "idx" && m.kind != "cifar10") {
      throw ConfigError("unknown dataset kind '" + m.kind + "'");
    }
    m.paths = j.value("paths", std::vector<std::string>{});
    const auto& sp = j.at("split");
    m.split = {sp.at("train"), sp.at("val"), sp.at("holdout"), sp.at("seed")};
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid dataset manifest: ") + e.what());
  }
}

Dataset load_raw(const DatasetManifest& m) {
  if (m.kind == "synth") return synth_blobs(m.synth);
  if (m.kind == "idx") {
    if (m.paths.size() != 2) throw ConfigError("idx manifest needs [images, labels] paths");
    return load_idx(m.paths[0], m.paths[1]);
  }
  std::vector<std::filesystem::path> paths(m.paths.begin(), m.paths.end());
  if (paths.empty()) throw ConfigError("cifar10 manifest needs at least one batch path");
  return load_cifar10_bin(paths);
}

PreparedData load_dataset_manifest(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("dataset manifest " + path.string() + ": " + e.what());
  }
  const DatasetManifest manifest = manifest_from_json(j);
  const Dataset raw = load_raw(manifest);
  if (j.contains("checksum") && j["checksum"].get<std::uint32_t>() != dataset_checksum(raw)) {
    throw ConfigError("dataset checksum does not match " + path.string());
  }
  return prepare(raw, manifest.split);
}

void save_dataset_manifest(const DatasetManifest& manifest, const Dataset& raw, const PreparedData& data,
                           const std::filesystem::path& path) {
  const std::string text = manifest_to_json(manifest, data, dataset_checksum(raw)).dump(2) + "\n";
  write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

}  // namespace psal
