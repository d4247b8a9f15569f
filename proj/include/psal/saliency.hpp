#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "psal/autograd.hpp"
#include "psal/data.hpp"
#include "psal/model.hpp"

namespace psal {

/// Which label the saliency loss uses. The true label is the default everywhere.
enum class LossLabel { kTrue, kPredicted };

struct ParameterSaliency {
  std::vector<double> values;  // |dL/dθ_i| over all kernel weights, registry order
  std::size_t sample_id = 0;
  std::size_t label = 0;
};

struct FilterSaliencyProfile {
  std::vector<double> values;  // one entry per filter
  bool standardized = false;
  std::size_t sample_id = 0;
  std::size_t label = 0;
  std::size_t predicted = 0;
  std::string stats_id;
};

struct ProfileStats {
  std::vector<double> mean;
  std::vector<double> std;  // population std over the reference set
  std::string reference_id;
  double eps = 1e-12;
  std::uint64_t model_fingerprint = 0;
};

/// Flat gradient of the cross-entropy w.r.t. every kernel weight, concatenated
/// in registry order. x is [1,C,H,W]. With kHigher the result stays on the tape.
Tensor kernel_weight_gradient(const Model& model, const Tensor& x, std::size_t label, GradMode mode = GradMode::kFirst);

ParameterSaliency param_saliency(const Model& model, const Sample& sample, LossLabel which = LossLabel::kTrue);
FilterSaliencyProfile filter_aggregate(const ParameterSaliency& ps, const FilterRegistry& registry);
/// filter_aggregate(param_saliency(...)) with the prediction filled in.
FilterSaliencyProfile raw_profile(const Model& model, const Sample& sample, LossLabel which = LossLabel::kTrue);

/// Raw profiles for every sample, computed on `workers` threads; output order
/// follows the dataset.
std::vector<FilterSaliencyProfile> raw_profiles(const Model& model, const Dataset& dataset, std::size_t workers = 1);

ProfileStats stats_from_profiles(const std::vector<FilterSaliencyProfile>& profiles, const std::string& reference_id);
ProfileStats compute_stats(const Model& model, const Dataset& reference, const std::string& reference_id,
                           std::size_t workers = 1);

FilterSaliencyProfile standardize(const FilterSaliencyProfile& raw, const ProfileStats& stats);
FilterSaliencyProfile standardized_profile(const Model& model, const Sample& sample, const ProfileStats& stats);

/// Average of raw profiles at inputs x + N(0, (noise_frac * (max x - min x))^2).
FilterSaliencyProfile smoothgrad_param_saliency(const Model& model, const Sample& sample, double noise_frac,
                                                std::size_t n = 25, std::uint64_t seed = 0);

enum class AttackDirection { kMinimize, kMaximize };

/// Projected normalized-gradient attack on the kernel weights inside an L2
/// ball of radius eps; the profile aggregates |θ* - θ0|.
FilterSaliencyProfile adversarial_saliency(const Model& model, const Sample& sample, double eps,
                                           std::size_t steps = 10,
                                           AttackDirection direction = AttackDirection::kMinimize);

/// |(1-α) ∇(L + α‖θ-θ0‖₁)| at θ = θ0, with the L1 subgradient taken as 0.
FilterSaliencyProfile l1_adversarial_saliency(const Model& model, const Sample& sample, double alpha);

struct SortedEntry {
  std::size_t layer_id;
  std::size_t rank_in_layer;
  std::size_t filter_id;
  double value;
};

enum class SampleGroup { kCorrect, kIncorrect };

struct GroupProfile {
  std::vector<double> mean;                 // mean standardized profile
  std::vector<double> per_sample_average;   // mean(ŝ) of each member sample
  std::vector<std::size_t> sample_ids;
  std::vector<SortedEntry> sorted;          // per layer, descending, shallow to deep
  std::vector<std::size_t> layer_boundaries;  // start offset of each layer within `sorted`
};

GroupProfile group_profile(const std::vector<FilterSaliencyProfile>& standardized, const FilterRegistry& registry);
GroupProfile average_group_profiles(const Model& model, const Dataset& samples, const ProfileStats& stats,
                                    SampleGroup group, std::size_t workers = 1);
void write_sorted_csv(const std::filesystem::path& path, const GroupProfile& profile);

double cosine(const std::vector<double>& a, const std::vector<double>& b);
/// Indices of the k largest values, ties broken by lower index.
std::vector<std::size_t> top_k(const std::vector<double>& values, std::size_t k);

// Persistence: JSON metadata plus a little-endian float32 vector.
nlohmann::json profile_metadata(const FilterSaliencyProfile& profile);
void save_profile(const FilterSaliencyProfile& profile, const std::filesystem::path& json_path);
FilterSaliencyProfile load_profile(const std::filesystem::path& json_path);
/// One JSON line per profile (with its blob offset) and one shared blob file.
void save_profile_batch(const std::vector<FilterSaliencyProfile>& profiles, const std::filesystem::path& manifest_path,
                        const std::filesystem::path& blob_path);
std::vector<FilterSaliencyProfile> load_profile_batch(const std::filesystem::path& manifest_path);

nlohmann::json stats_to_json(const ProfileStats& stats);
ProfileStats stats_from_json(const nlohmann::json& j);
void save_stats(const ProfileStats& stats, const std::filesystem::path& path);
ProfileStats load_stats(const std::filesystem::path& path);

}  // namespace psal
