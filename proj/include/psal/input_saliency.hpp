#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include <json.hpp>

#include "psal/saliency.hpp"

namespace psal {

struct BoostSpec {
  std::vector<std::size_t> filters;
  double factor = 100.0;
};

/// Boost spec over the `top` most salient filters of a standardized profile.
BoostSpec top_salient_boost(const FilterSaliencyProfile& standardized, std::size_t top = 10, double factor = 100.0);

/// Entries in F multiplied by the factor, others unchanged.
std::vector<double> boost_profile(const std::vector<double>& standardized, const BoostSpec& spec);

/// ŝ(x, y) kept on the tape as a function of x ([1,C,H,W], requires grad);
/// μ and σ are constants.
Tensor standardized_profile_tensor(const Model& model, const Tensor& x, std::size_t label, const ProfileStats& stats);

/// Cosine distance between ŝ(x, y) and a constant target profile.
double boost_objective(const Model& model, const Tensor& image, std::size_t label, const ProfileStats& stats,
                       const std::vector<double>& target);
/// Signed gradient of boost_objective w.r.t. the [C,H,W] image (double backprop).
Tensor boost_objective_gradient(const Model& model, const Tensor& image, std::size_t label, const ProfileStats& stats,
                                const std::vector<double>& target);

struct PixelSaliencyMap {
  std::size_t height = 0, width = 0;
  std::vector<double> values;  // row-major H x W, non-negative
  std::size_t sample_id = 0;
  std::vector<std::size_t> filters;
  double factor = 0.0;
  bool postprocessed = false;
  bool degenerate = false;  // post-processing met a constant map
};

/// |∇_x D_C(ŝ(x,y), s'_F)| averaged over channels.
PixelSaliencyMap input_saliency_map(const Model& model, const Sample& sample, const BoostSpec& spec,
                                    const ProfileStats& stats);

/// 3x3 Gaussian (normalized weights, zero padding).
std::vector<double> gaussian_blur3x3(const std::vector<double>& values, std::size_t height, std::size_t width,
                                     double sigma = 0.8);

/// Zero values below the percentile (the top ceil((100-p)% of pixels survive,
/// ties included), optionally blur, then rescale to [0,1].
PixelSaliencyMap postprocess_map(const PixelSaliencyMap& map, double percentile = 90.0, bool blur = true,
                                 double sigma = 0.8);

enum class FillMode { kDatasetMean, kConstant };

struct MaskSpec {
  std::vector<Rect> regions;
  std::vector<bool> pixels;  // optional explicit H*W mask, OR-ed with regions
  FillMode fill = FillMode::kDatasetMean;
  double constant = 0.0;     // value in normalized space when fill is kConstant
  std::optional<Rect> protect;
};

nlohmann::json mask_spec_to_json(const MaskSpec& spec);
MaskSpec mask_spec_from_json(const nlohmann::json& j);

/// Masked pixels take the fill in every channel. Images live in normalized
/// space, so the dataset-mean fill is 0.
Tensor apply_mask(const Tensor& image, const MaskSpec& spec);
/// H*W mask that apply_mask would use (regions, explicit pixels, minus protect).
std::vector<bool> resolve_mask(const MaskSpec& spec, std::size_t height, std::size_t width);

struct TopMask {
  Tensor image;
  std::vector<bool> mask;
  std::size_t count = 0;
  bool empty = false;  // nothing eligible outside the protected region
};

/// Masks the ceil(p% of eligible pixels) highest-valued pixels of the map.
TopMask mask_top_percent(const Tensor& image, const PixelSaliencyMap& map, double percent,
                         const std::optional<Rect>& protect = std::nullopt);
/// Same number of uniformly random eligible pixels.
TopMask mask_random(const Tensor& image, std::size_t count, const std::optional<Rect>& protect, std::uint64_t seed);

struct FilterSaliencyReading {
  double mean = 0.0;   // mean ŝ over F
  double std = 0.0;    // std of ŝ over F
  double delta = 0.0;  // mean minus the first variant's mean
};

std::vector<FilterSaliencyReading> filter_saliency_delta(const Model& model, const std::vector<Tensor>& variants,
                                                         std::size_t label, const std::vector<std::size_t>& filters,
                                                         const ProfileStats& stats);

/// Stage sets for the cascade: deepest stage alone, then progressively more, ending with all.
std::vector<std::vector<std::size_t>> cascade_stage_sets(const Model& model);

struct SanityRow {
  std::vector<std::size_t> stages;  // empty for the unmodified model
  double spearman = 1.0;
};

/// Re-derives stats (on `reference`), F and the map for each randomized model
/// and correlates its map with the unmodified model's map.
std::vector<SanityRow> sanity_randomization(const Model& model, const Sample& sample, std::size_t top,
                                            double factor, const std::vector<std::vector<std::size_t>>& stage_sets,
                                            const Dataset& reference, std::uint64_t seed);

void save_map(const PixelSaliencyMap& map, const std::filesystem::path& json_path);
PixelSaliencyMap load_map(const std::filesystem::path& json_path);

}  // namespace psal
