#include "psal/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <exception>
#include <fstream>
#include <numeric>
#include <random>
#include <thread>

#include "psal/checkpoint.hpp"
#include "psal/error.hpp"
#include "psal/parallel.hpp"

namespace psal {

namespace {

Tensor flatten_all(const std::vector<Tensor>& parts) {
  std::vector<Tensor> flat;
  flat.reserve(parts.size());
  for (const auto& p : parts) flat.push_back(reshape(p, {p.numel()}));
  return concat(flat);
}

std::size_t label_for(const Model& model, const Sample& sample, LossLabel which) {
  if (which == LossLabel::kPredicted) return model.predict(sample.image).predicted;
  if (sample.label >= model.spec().num_classes) throw ConfigError("sample label outside the model's classes");
  return sample.label;
}

void check_finite(const std::vector<double>& v, const char* what) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericalError(std::string("non-finite value in ") + what);
  }
}

}  // namespace

Tensor kernel_weight_gradient(const Model& model, const Tensor& x, std::size_t label, GradMode mode) {
  const auto weights = model.conv_weights();
  const Tensor loss = softmax_cross_entropy(model.forward_eval(x), {label});
  return flatten_all(backward(loss, weights, mode).grads);
}

ParameterSaliency param_saliency(const Model& model, const Sample& sample, LossLabel which) {
  ParameterSaliency ps;
  ps.sample_id = sample.id;
  ps.label = label_for(model, sample, which);
  const Tensor g = kernel_weight_gradient(model, stack_images({sample.image}), ps.label);
  ps.values.resize(g.numel());
  for (std::size_t i = 0; i < ps.values.size(); ++i) ps.values[i] = std::fabs(g.at(i));
  check_finite(ps.values, "parameter saliency");
  return ps;
}

FilterSaliencyProfile filter_aggregate(const ParameterSaliency& ps, const FilterRegistry& registry) {
  if (ps.values.size() != registry.kernel_weight_count()) {
    throw ShapeError("parameter saliency has " + std::to_string(ps.values.size()) + " entries, registry expects " +
                     std::to_string(registry.kernel_weight_count()));
  }
  FilterSaliencyProfile out;
  out.sample_id = ps.sample_id;
  out.label = ps.label;
  out.values.reserve(registry.filter_count());
  for (const auto& g : registry.groups()) {
    double s = 0.0;
    for (auto i : g.alpha) s += ps.values[i];
    out.values.push_back(s / static_cast<double>(g.alpha.size()));
  }
  return out;
}

FilterSaliencyProfile raw_profile(const Model& model, const Sample& sample, LossLabel which) {
  FilterSaliencyProfile p = filter_aggregate(param_saliency(model, sample, which), model.registry());
  p.predicted = model.predict(sample.image).predicted;
  return p;
}

std::vector<FilterSaliencyProfile> raw_profiles(const Model& model, const Dataset& dataset, std::size_t workers) {
  std::vector<FilterSaliencyProfile> out(dataset.size());
  parallel_for(dataset.size(), workers, [&](std::size_t i) { out[i] = raw_profile(model, dataset.samples[i]); });
  return out;
}

ProfileStats stats_from_profiles(const std::vector<FilterSaliencyProfile>& profiles, const std::string& reference_id) {
  if (profiles.empty()) throw ConfigError("reference set for saliency statistics is empty");
  const std::size_t f = profiles.front().values.size();
  ProfileStats st;
  st.reference_id = reference_id;
  st.mean.assign(f, 0.0);
  st.std.assign(f, 0.0);
  for (const auto& p : profiles) {
    if (p.values.size() != f) throw ShapeError("reference profiles differ in length");
    for (std::size_t k = 0; k < f; ++k) st.mean[k] += p.values[k];
  }
  const double n = static_cast<double>(profiles.size());
  for (auto& m : st.mean) m /= n;
  for (const auto& p : profiles) {
    for (std::size_t k = 0; k < f; ++k) {
      const double d = p.values[k] - st.mean[k];
      st.std[k] += d * d;
    }
  }
  for (auto& s : st.std) s = std::sqrt(s / n);
  return st;
}

ProfileStats compute_stats(const Model& model, const Dataset& reference, const std::string& reference_id,
                           std::size_t workers) {
  if (reference.empty()) throw ConfigError("reference set for saliency statistics is empty");
  ProfileStats st = stats_from_profiles(raw_profiles(model, reference, workers), reference_id);
  st.model_fingerprint = model.fingerprint();
  return st;
}

FilterSaliencyProfile standardize(const FilterSaliencyProfile& raw, const ProfileStats& stats) {
  if (raw.values.size() != stats.mean.size() || stats.mean.size() != stats.std.size()) {
    throw ShapeError("profile length " + std::to_string(raw.values.size()) + " does not match statistics length " +
                     std::to_string(stats.mean.size()));
  }
  FilterSaliencyProfile out = raw;
  out.standardized = true;
  out.stats_id = stats.reference_id;
  for (std::size_t k = 0; k < out.values.size(); ++k) {
    out.values[k] = (raw.values[k] - stats.mean[k]) / std::max(stats.std[k], stats.eps);
  }
  return out;
}

FilterSaliencyProfile standardized_profile(const Model& model, const Sample& sample, const ProfileStats& stats) {
  return standardize(raw_profile(model, sample), stats);
}

FilterSaliencyProfile smoothgrad_param_saliency(const Model& model, const Sample& sample, double noise_frac,
                                                std::size_t n, std::uint64_t seed) {
  if (n == 0) throw ConfigError("smoothgrad needs at least one draw");
  if (!(noise_frac >= 0)) throw ConfigError("noise fraction must be non-negative");
  const auto px = sample.image.data();
  const auto [lo, hi] = std::minmax_element(px.begin(), px.end());
  const double sd = noise_frac * (*hi - *lo);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  // Noise-free draws are all identical; one evaluation avoids averaging roundoff.
  if (sd == 0.0) n = 1;
  FilterSaliencyProfile acc;
  for (std::size_t d = 0; d < n; ++d) {
    std::vector<double> v(px.begin(), px.end());
    if (sd > 0) {
      for (auto& x : v) x += sd * noise(rng);
    }
    Sample noisy{sample.id, Tensor(sample.image.shape(), std::move(v)), sample.label};
    const FilterSaliencyProfile p = filter_aggregate(param_saliency(model, noisy), model.registry());
    if (acc.values.empty()) acc.values.assign(p.values.size(), 0.0);
    for (std::size_t k = 0; k < p.values.size(); ++k) acc.values[k] += p.values[k];
  }
  for (auto& v : acc.values) v /= static_cast<double>(n);
  acc.sample_id = sample.id;
  acc.label = sample.label;
  acc.predicted = model.predict(sample.image).predicted;
  return acc;
}

FilterSaliencyProfile adversarial_saliency(const Model& model, const Sample& sample, double eps, std::size_t steps,
                                           AttackDirection direction) {
  if (!(eps > 0) || steps == 0) throw ConfigError("adversarial saliency needs eps > 0 and at least one step");
  label_for(model, sample, LossLabel::kTrue);
  Model work(model);
  const auto weights = work.conv_weights();
  std::vector<std::vector<double>> origin;
  for (const auto& w : weights) origin.emplace_back(w.data().begin(), w.data().end());
  const double step = 2.5 * eps / static_cast<double>(steps);
  const double sign = direction == AttackDirection::kMinimize ? -1.0 : 1.0;
  const Tensor x = stack_images({sample.image});

  for (std::size_t t = 0; t < steps; ++t) {
    Tensor g;
    try {
      g = kernel_weight_gradient(work, x, sample.label);
    } catch (const NumericalError& e) {
      throw NumericalError(std::string("adversarial attack diverged: ") + e.what());
    }
    double gn = 0.0;
    for (double v : g.data()) gn += v * v;
    gn = std::sqrt(gn);
    if (gn == 0.0) break;
    // Step, then project the total displacement back onto the eps-ball.
    std::size_t offset = 0;
    double disp = 0.0;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      Tensor w = weights[l];
      auto wv = w.mutable_data();
      for (std::size_t i = 0; i < wv.size(); ++i) {
        wv[i] += sign * step * g.at(offset + i) / gn;
        const double d = wv[i] - origin[l][i];
        disp += d * d;
      }
      offset += wv.size();
    }
    disp = std::sqrt(disp);
    if (disp > eps) {
      const double shrink = eps / disp;
      for (std::size_t l = 0; l < weights.size(); ++l) {
        Tensor w = weights[l];
        auto wv = w.mutable_data();
        for (std::size_t i = 0; i < wv.size(); ++i) wv[i] = origin[l][i] + shrink * (wv[i] - origin[l][i]);
      }
    }
  }

  ParameterSaliency ps;
  ps.sample_id = sample.id;
  ps.label = sample.label;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    const auto wv = weights[l].data();
    for (std::size_t i = 0; i < wv.size(); ++i) ps.values.push_back(std::fabs(wv[i] - origin[l][i]));
  }
  FilterSaliencyProfile p = filter_aggregate(ps, model.registry());
  p.predicted = model.predict(sample.image).predicted;
  return p;
}

FilterSaliencyProfile l1_adversarial_saliency(const Model& model, const Sample& sample, double alpha) {
  if (!(alpha >= 0 && alpha < 1)) throw ConfigError("alpha must lie in [0, 1)");
  FilterSaliencyProfile p = raw_profile(model, sample);
  for (auto& v : p.values) v *= (1.0 - alpha);
  return p;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ShapeError("cosine of vectors with different lengths");
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0 || bb == 0) throw NumericalError("cosine of a zero vector");
  return ab / std::sqrt(aa * bb);
}

std::vector<std::size_t> top_k(const std::vector<double>& values, std::size_t k) {
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), 0);
  k = std::min(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<long>(k), idx.end(), [&](std::size_t a, std::size_t b) {
    return values[a] > values[b] || (values[a] == values[b] && a < b);
  });
  idx.resize(k);
  return idx;
}

GroupProfile group_profile(const std::vector<FilterSaliencyProfile>& standardized, const FilterRegistry& registry) {
  if (standardized.empty()) throw ConfigError("sample group is empty");
  GroupProfile g;
  const std::size_t f = registry.filter_count();
  g.mean.assign(f, 0.0);
  for (const auto& p : standardized) {
    if (p.values.size() != f) throw ShapeError("profile length does not match registry");
    double avg = 0.0;
    for (std::size_t k = 0; k < f; ++k) {
      g.mean[k] += p.values[k];
      avg += p.values[k];
    }
    g.per_sample_average.push_back(avg / static_cast<double>(f));
    g.sample_ids.push_back(p.sample_id);
  }
  for (auto& m : g.mean) m /= static_cast<double>(standardized.size());
  for (const auto& layer : registry.layers()) {
    g.layer_boundaries.push_back(g.sorted.size());
    std::vector<std::size_t> ids(layer.filter_count);
    std::iota(ids.begin(), ids.end(), layer.first_filter);
    std::stable_sort(ids.begin(), ids.end(), [&](std::size_t a, std::size_t b) { return g.mean[a] > g.mean[b]; });
    for (std::size_t r = 0; r < ids.size(); ++r) g.sorted.push_back({layer.layer_id, r, ids[r], g.mean[ids[r]]});
  }
  return g;
}

GroupProfile average_group_profiles(const Model& model, const Dataset& samples, const ProfileStats& stats,
                                    SampleGroup group, std::size_t workers) {
  std::vector<FilterSaliencyProfile> raw = raw_profiles(model, samples, workers);
  std::vector<FilterSaliencyProfile> members;
  for (const auto& p : raw) {
    const bool correct = p.predicted == p.label;
    if (correct == (group == SampleGroup::kCorrect)) members.push_back(standardize(p, stats));
  }
  return group_profile(members, model.registry());
}

void write_sorted_csv(const std::filesystem::path& path, const GroupProfile& profile) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out.precision(12);
  out << "layer_id,rank_in_layer,value\n";
  for (const auto& e : profile.sorted) out << e.layer_id << ',' << e.rank_in_layer << ',' << e.value << '\n';
}

namespace {

std::vector<std::uint8_t> to_f32(const std::vector<double>& v) {
  std::vector<std::uint8_t> out(v.size() * 4);
  for (std::size_t i = 0; i < v.size(); ++i) {
    const float f = static_cast<float>(v[i]);
    std::memcpy(out.data() + 4 * i, &f, 4);
  }
  return out;
}

std::vector<double> from_f32(const std::vector<std::uint8_t>& bytes, std::size_t offset, std::size_t count) {
  if (offset + 4 * count > bytes.size()) throw FormatError("profile blob is truncated");
  std::vector<double> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    float f;
    std::memcpy(&f, bytes.data() + offset + 4 * i, 4);
    out[i] = f;
  }
  return out;
}

FilterSaliencyProfile profile_from_metadata(const nlohmann::json& j) {
  FilterSaliencyProfile p;
  p.sample_id = j.at("sample_id");
  p.label = j.at("label");
  p.predicted = j.at("predicted");
  p.standardized = j.at("standardized");
  p.stats_id = j.value("stats_id", "");
  return p;
}

nlohmann::json read_json(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

}  // namespace

nlohmann::json profile_metadata(const FilterSaliencyProfile& p) {
  return {{"sample_id", p.sample_id}, {"label", p.label},   {"predicted", p.predicted},
          {"standardized", p.standardized}, {"stats_id", p.stats_id}, {"length", p.values.size()}};
}

void save_profile(const FilterSaliencyProfile& profile, const std::filesystem::path& json_path) {
  std::filesystem::path blob = json_path;
  blob.replace_extension(".f32");
  nlohmann::json meta = profile_metadata(profile);
  meta["blob"] = blob.filename().string();
  write_file_bytes(blob, to_f32(profile.values));
  const std::string text = meta.dump(2);
  write_file_bytes(json_path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

FilterSaliencyProfile load_profile(const std::filesystem::path& json_path) {
  const nlohmann::json meta = read_json(json_path);
  try {
    FilterSaliencyProfile p = profile_from_metadata(meta);
    const auto bytes = read_file_bytes(json_path.parent_path() / meta.at("blob").get<std::string>());
    const std::size_t n = meta.at("length");
    if (bytes.size() != 4 * n) throw FormatError("profile blob length does not match metadata");
    p.values = from_f32(bytes, 0, n);
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("invalid profile metadata in " + json_path.string() + ": " + e.what());
  }
}

void save_profile_batch(const std::vector<FilterSaliencyProfile>& profiles, const std::filesystem::path& manifest_path,
                        const std::filesystem::path& blob_path) {
  std::vector<std::uint8_t> blob;
  std::string lines;
  for (const auto& p : profiles) {
    nlohmann::json meta = profile_metadata(p);
    meta["offset"] = blob.size();
    meta["blob"] = blob_path.filename().string();
    const auto bytes = to_f32(p.values);
    blob.insert(blob.end(), bytes.begin(), bytes.end());
    lines += meta.dump() + "\n";
  }
  write_file_bytes(blob_path, blob);
  write_file_bytes(manifest_path, std::vector<std::uint8_t>(lines.begin(), lines.end()));
}

std::vector<FilterSaliencyProfile> load_profile_batch(const std::filesystem::path& manifest_path) {
  const auto text = read_file_bytes(manifest_path);
  std::vector<FilterSaliencyProfile> out;
  std::vector<std::uint8_t> blob;
  std::string blob_name;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = start;
    while (end < text.size() && text[end] != '\n') ++end;
    if (end > start) {
      try {
        const auto meta = nlohmann::json::parse(text.begin() + static_cast<long>(start), text.begin() + static_cast<long>(end));
        const std::string name = meta.at("blob");
        if (name != blob_name) {
          blob = read_file_bytes(manifest_path.parent_path() / name);
          blob_name = name;
        }
        FilterSaliencyProfile p = profile_from_metadata(meta);
        p.values = from_f32(blob, meta.at("offset"), meta.at("length"));
        out.push_back(std::move(p));
      } catch (const nlohmann::json::exception& e) {
        throw FormatError("invalid profile manifest line in " + manifest_path.string() + ": " + e.what());
      }
    }
    start = end + 1;
  }
  return out;
}

nlohmann::json stats_to_json(const ProfileStats& s) {
  return {{"mean", s.mean}, {"std", s.std}, {"reference_id", s.reference_id}, {"eps", s.eps},
          {"model_fingerprint", s.model_fingerprint}};
}

ProfileStats stats_from_json(const nlohmann::json& j) {
  try {
    ProfileStats s;
    s.mean = j.at("mean").get<std::vector<double>>();
    s.std = j.at("std").get<std::vector<double>>();
    s.reference_id = j.at("reference_id");
    s.eps = j.value("eps", 1e-12);
    s.model_fingerprint = j.value("model_fingerprint", std::uint64_t{0});
    if (s.mean.size() != s.std.size()) throw FormatError("stats mean/std length mismatch");
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("invalid stats file: ") + e.what());
  }
}

void save_stats(const ProfileStats& stats, const std::filesystem::path& path) {
  const std::string text = stats_to_json(stats).dump();
  write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

ProfileStats load_stats(const std::filesystem::path& path) { return stats_from_json(read_json(path)); }

}  // namespace psal
