#include "psal/input_saliency.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>
#include <set>

#include "psal/checkpoint.hpp"
#include "psal/error.hpp"
#include "psal/stats.hpp"

namespace psal {

BoostSpec top_salient_boost(const FilterSaliencyProfile& standardized, std::size_t top, double factor) {
  BoostSpec spec;
  spec.filters = top_k(standardized.values, top);
  std::sort(spec.filters.begin(), spec.filters.end());
  spec.factor = factor;
  return spec;
}

std::vector<double> boost_profile(const std::vector<double>& z, const BoostSpec& spec) {
  if (spec.filters.empty()) throw ConfigError("boost set F is empty");
  std::vector<double> out = z;
  std::set<std::size_t> seen;
  for (auto f : spec.filters) {
    if (f >= z.size()) throw ConfigError("boost filter " + std::to_string(f) + " out of range");
    if (!seen.insert(f).second) continue;
    out[f] *= spec.factor;
  }
  return out;
}

namespace {

Tensor profile_tensor(const Model& model, const Tensor& x, std::size_t label, const ProfileStats& stats,
                      GradMode mode) {
  const auto& reg = model.registry();
  if (stats.mean.size() != reg.filter_count()) throw ShapeError("statistics do not match the model's filters");
  if (label >= model.spec().num_classes) throw ConfigError("label outside the model's classes");
  const Tensor flat = kernel_weight_gradient(model, x, label, mode);
  const Tensor sbar = mean_over_index_sets(abs(flat), reg.index_sets());
  std::vector<double> guarded(stats.std.size());
  for (std::size_t k = 0; k < guarded.size(); ++k) guarded[k] = std::max(stats.std[k], stats.eps);
  const Shape shape{reg.filter_count()};
  return div(sub(sbar, Tensor(shape, stats.mean)), Tensor(shape, std::move(guarded)));
}

Tensor as_batch(const Tensor& image, bool grad) {
  Shape s = image.shape();
  s.insert(s.begin(), 1);
  return Tensor(s, std::vector<double>(image.data().begin(), image.data().end()), grad);
}

}  // namespace

Tensor standardized_profile_tensor(const Model& model, const Tensor& x, std::size_t label, const ProfileStats& stats) {
  return profile_tensor(model, x, label, stats, GradMode::kHigher);
}

double boost_objective(const Model& model, const Tensor& image, std::size_t label, const ProfileStats& stats,
                       const std::vector<double>& target) {
  const Tensor z = profile_tensor(model, as_batch(image, false), label, stats, GradMode::kFirst);
  NoGradGuard no_grad;
  return cosine_distance(z, Tensor({target.size()}, target)).item();
}

Tensor boost_objective_gradient(const Model& model, const Tensor& image, std::size_t label, const ProfileStats& stats,
                                const std::vector<double>& target) {
  const Tensor x = as_batch(image, true);
  const Tensor z = standardized_profile_tensor(model, x, label, stats);
  const Tensor d = cosine_distance(z, Tensor({target.size()}, target));
  const GradResult g = backward(d, {x});
  return reshape(g.grads[0].detach(), image.shape());
}

PixelSaliencyMap input_saliency_map(const Model& model, const Sample& sample, const BoostSpec& spec,
                                    const ProfileStats& stats) {
  const FilterSaliencyProfile z = standardized_profile(model, sample, stats);
  const std::vector<double> target = boost_profile(z.values, spec);
  const Tensor g = boost_objective_gradient(model, sample.image, sample.label, stats, target);
  const std::size_t c = g.dim(0), h = g.dim(1), w = g.dim(2);
  PixelSaliencyMap map;
  map.height = h;
  map.width = w;
  map.sample_id = sample.id;
  map.filters = spec.filters;
  map.factor = spec.factor;
  map.values.assign(h * w, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < h * w; ++i) map.values[i] += std::fabs(g.at(ch * h * w + i));
  }
  for (auto& v : map.values) {
    v /= static_cast<double>(c);
    if (!std::isfinite(v)) throw NumericalError("non-finite input saliency");
  }
  return map;
}

std::vector<double> gaussian_blur3x3(const std::vector<double>& v, std::size_t h, std::size_t w, double sigma) {
  if (v.size() != h * w) throw ShapeError("map size does not match its dimensions");
  double k[3][3];
  double total = 0.0;
  for (int dy = -1; dy <= 1; ++dy) {
    for (int dx = -1; dx <= 1; ++dx) {
      k[dy + 1][dx + 1] = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
      total += k[dy + 1][dx + 1];
    }
  }
  std::vector<double> out(v.size(), 0.0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double s = 0.0;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const long yy = static_cast<long>(y) + dy, xx = static_cast<long>(x) + dx;
          if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) continue;
          s += k[dy + 1][dx + 1] * v[static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)];
        }
      }
      out[y * w + x] = s / total;
    }
  }
  return out;
}

PixelSaliencyMap postprocess_map(const PixelSaliencyMap& map, double percentile, bool blur, double sigma) {
  if (!(percentile >= 0 && percentile < 100)) throw ConfigError("percentile must lie in [0, 100)");
  if (map.values.empty()) throw ConfigError("empty saliency map");
  PixelSaliencyMap out = map;
  out.postprocessed = true;
  const std::size_t n = map.values.size();
  const auto keep = static_cast<std::size_t>(std::ceil((100.0 - percentile) / 100.0 * static_cast<double>(n) - 1e-9));
  std::vector<double> sorted = map.values;
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<long>(keep - 1), sorted.end(), std::greater<>());
  const double cutoff = sorted[keep - 1];
  for (auto& v : out.values) {
    if (v < cutoff) v = 0.0;
  }
  // A constant input has no salient region; zero padding in the blur would otherwise invent edges.
  const auto [raw_lo, raw_hi] = std::minmax_element(map.values.begin(), map.values.end());
  if (*raw_lo == *raw_hi) {
    out.values.assign(n, 0.0);
    out.degenerate = true;
    return out;
  }
  if (blur) out.values = gaussian_blur3x3(out.values, map.height, map.width, sigma);
  const auto [lo, hi] = std::minmax_element(out.values.begin(), out.values.end());
  const double min = *lo, max = *hi;
  if (max == min) {
    out.values.assign(n, 0.0);
    out.degenerate = true;
    return out;
  }
  for (auto& v : out.values) v = (v - min) / (max - min);
  return out;
}

nlohmann::json mask_spec_to_json(const MaskSpec& spec) {
  auto rect = [](const Rect& r) {
    return nlohmann::json{{"top", r.top}, {"left", r.left}, {"height", r.height}, {"width", r.width}};
  };
  nlohmann::json regions = nlohmann::json::array();
  for (const auto& r : spec.regions) regions.push_back(rect(r));
  nlohmann::json j = {{"regions", regions},
                      {"fill", spec.fill == FillMode::kDatasetMean ? "dataset_mean" : "constant"},
                      {"constant", spec.constant}};
  if (!spec.pixels.empty()) {
    std::vector<int> px(spec.pixels.begin(), spec.pixels.end());
    j["pixels"] = px;
  }
  if (spec.protect) j["protect"] = rect(*spec.protect);
  return j;
}

MaskSpec mask_spec_from_json(const nlohmann::json& j) {
  auto rect = [](const nlohmann::json& r) {
    return Rect{r.at("top"), r.at("left"), r.at("height"), r.at("width")};
  };
  try {
    MaskSpec spec;
    for (const auto& r : j.value("regions", nlohmann::json::array())) spec.regions.push_back(rect(r));
    if (j.contains("pixels")) {
      for (const auto& p : j.at("pixels")) spec.pixels.push_back(p.get<int>() != 0);
    }
    const std::string fill = j.value("fill", "dataset_mean");
    if (fill == "dataset_mean") spec.fill = FillMode::kDatasetMean;
    else if (fill == "constant") spec.fill = FillMode::kConstant;
    else throw ConfigError("unknown fill '" + fill + "'");
    spec.constant = j.value("constant", 0.0);
    if (j.contains("protect") && !j.at("protect").is_null()) spec.protect = rect(j.at("protect"));
    return spec;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid mask spec: ") + e.what());
  }
}

std::vector<bool> resolve_mask(const MaskSpec& spec, std::size_t h, std::size_t w) {
  std::vector<bool> mask(h * w, false);
  auto check = [&](const Rect& r, const char* what) {
    if (r.height == 0 || r.width == 0 || r.top + r.height > h || r.left + r.width > w) {
      throw ConfigError(std::string(what) + " rectangle outside the " + std::to_string(h) + "x" + std::to_string(w) +
                        " image");
    }
  };
  for (const auto& r : spec.regions) {
    check(r, "mask");
    for (std::size_t y = r.top; y < r.top + r.height; ++y) {
      for (std::size_t x = r.left; x < r.left + r.width; ++x) mask[y * w + x] = true;
    }
  }
  if (!spec.pixels.empty()) {
    if (spec.pixels.size() != h * w) throw ConfigError("explicit pixel mask has the wrong size");
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = mask[i] || spec.pixels[i];
  }
  if (spec.protect) {
    check(*spec.protect, "protect");
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (spec.protect->contains(i / w, i % w)) mask[i] = false;
    }
  }
  return mask;
}

Tensor apply_mask(const Tensor& image, const MaskSpec& spec) {
  if (image.rank() != 3) throw ShapeError("apply_mask expects a [C,H,W] image");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const auto mask = resolve_mask(spec, h, w);
  const double fill = spec.fill == FillMode::kDatasetMean ? 0.0 : spec.constant;
  std::vector<double> px(image.data().begin(), image.data().end());
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < h * w; ++i) {
      if (mask[i]) px[ch * h * w + i] = fill;
    }
  }
  return Tensor(image.shape(), std::move(px));
}

namespace {

std::vector<std::size_t> eligible_pixels(std::size_t h, std::size_t w, const std::optional<Rect>& protect) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < h * w; ++i) {
    if (!protect || !protect->contains(i / w, i % w)) out.push_back(i);
  }
  return out;
}

TopMask finish_mask(const Tensor& image, std::vector<bool> mask, std::size_t count) {
  TopMask out;
  MaskSpec spec;
  spec.pixels = mask;
  out.image = apply_mask(image, spec);
  out.mask = std::move(mask);
  out.count = count;
  out.empty = count == 0;
  return out;
}

}  // namespace

TopMask mask_top_percent(const Tensor& image, const PixelSaliencyMap& map, double percent,
                         const std::optional<Rect>& protect) {
  if (!(percent > 0 && percent < 100)) throw ConfigError("mask percent must lie in (0, 100)");
  if (image.rank() != 3 || image.dim(1) != map.height || image.dim(2) != map.width) {
    throw ShapeError("map and image sizes differ");
  }
  auto eligible = eligible_pixels(map.height, map.width, protect);
  const auto count = static_cast<std::size_t>(std::ceil(percent / 100.0 * static_cast<double>(eligible.size()) - 1e-9));
  std::stable_sort(eligible.begin(), eligible.end(),
                   [&](std::size_t a, std::size_t b) { return map.values[a] > map.values[b]; });
  std::vector<bool> mask(map.height * map.width, false);
  for (std::size_t i = 0; i < count; ++i) mask[eligible[i]] = true;
  return finish_mask(image, std::move(mask), count);
}

TopMask mask_random(const Tensor& image, std::size_t count, const std::optional<Rect>& protect, std::uint64_t seed) {
  if (image.rank() != 3) throw ShapeError("mask_random expects a [C,H,W] image");
  auto eligible = eligible_pixels(image.dim(1), image.dim(2), protect);
  if (count > eligible.size()) throw ConfigError("random mask larger than the eligible area");
  std::mt19937_64 rng(seed);
  std::shuffle(eligible.begin(), eligible.end(), rng);
  std::vector<bool> mask(image.dim(1) * image.dim(2), false);
  for (std::size_t i = 0; i < count; ++i) mask[eligible[i]] = true;
  return finish_mask(image, std::move(mask), count);
}

std::vector<FilterSaliencyReading> filter_saliency_delta(const Model& model, const std::vector<Tensor>& variants,
                                                         std::size_t label, const std::vector<std::size_t>& filters,
                                                         const ProfileStats& stats) {
  if (filters.empty()) throw ConfigError("filter set F is empty");
  std::vector<FilterSaliencyReading> out;
  for (std::size_t v = 0; v < variants.size(); ++v) {
    const auto z = standardized_profile(model, {0, variants[v], label}, stats);
    std::vector<double> picked;
    for (auto f : filters) {
      if (f >= z.values.size()) throw ConfigError("filter id out of range");
      picked.push_back(z.values[f]);
    }
    FilterSaliencyReading r{mean_of(picked), std_of(picked), 0.0};
    r.delta = out.empty() ? 0.0 : r.mean - out.front().mean;
    out.push_back(r);
  }
  return out;
}

std::vector<std::vector<std::size_t>> cascade_stage_sets(const Model& model) {
  std::vector<std::vector<std::size_t>> sets;
  std::vector<std::size_t> current;
  for (std::size_t s = model.stage_count(); s-- > 0;) {
    current.push_back(s);
    sets.push_back(current);
  }
  return sets;
}

std::vector<SanityRow> sanity_randomization(const Model& model, const Sample& sample, std::size_t top,
                                            double factor, const std::vector<std::vector<std::size_t>>& stage_sets,
                                            const Dataset& reference, std::uint64_t seed) {
  auto map_for = [&](const Model& m) {
    const ProfileStats st = compute_stats(m, reference, "sanity-reference");
    const auto z = standardized_profile(m, sample, st);
    return input_saliency_map(m, sample, top_salient_boost(z, top, factor), st);
  };
  const PixelSaliencyMap base = map_for(model);
  std::vector<SanityRow> rows{{{}, spearman(base.values, base.values)}};
  for (const auto& set : stage_sets) {
    const Model randomized = randomize_stages(model, set, seed);
    rows.push_back({set, spearman(base.values, map_for(randomized).values)});
  }
  return rows;
}

void save_map(const PixelSaliencyMap& map, const std::filesystem::path& json_path) {
  std::filesystem::path blob = json_path;
  blob.replace_extension(".f32");
  std::vector<std::uint8_t> bytes(map.values.size() * 4);
  for (std::size_t i = 0; i < map.values.size(); ++i) {
    const float f = static_cast<float>(map.values[i]);
    std::memcpy(bytes.data() + 4 * i, &f, 4);
  }
  write_file_bytes(blob, bytes);
  const nlohmann::json meta = {{"height", map.height},   {"width", map.width},
                               {"sample_id", map.sample_id}, {"filters", map.filters},
                               {"factor", map.factor},   {"postprocessed", map.postprocessed},
                               {"degenerate", map.degenerate}, {"blob", blob.filename().string()}};
  const std::string text = meta.dump(2);
  write_file_bytes(json_path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

PixelSaliencyMap load_map(const std::filesystem::path& json_path) {
  const auto text = read_file_bytes(json_path);
  try {
    const auto j = nlohmann::json::parse(text.begin(), text.end());
    PixelSaliencyMap map;
    map.height = j.at("height");
    map.width = j.at("width");
    map.sample_id = j.at("sample_id");
    map.filters = j.at("filters").get<std::vector<std::size_t>>();
    map.factor = j.at("factor");
    map.postprocessed = j.at("postprocessed");
    map.degenerate = j.value("degenerate", false);
    const auto bytes = read_file_bytes(json_path.parent_path() / j.at("blob").get<std::string>());
    if (bytes.size() != 4 * map.height * map.width) throw FormatError("map blob length does not match metadata");
    map.values.resize(map.height * map.width);
    for (std::size_t i = 0; i < map.values.size(); ++i) {
      float f;
      std::memcpy(&f, bytes.data() + 4 * i, 4);
      map.values[i] = f;
    }
    return map;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("invalid map metadata in " + json_path.string() + ": " + e.what());
  }
}

}  // namespace psal
