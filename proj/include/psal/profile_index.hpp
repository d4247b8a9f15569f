#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <utility>
#include <vector>

#include <json.hpp>

#include "psal/saliency.hpp"

namespace psal {

struct RowMeta {
  std::size_t sample_id = 0;
  std::size_t label = 0;
  std::size_t predicted = 0;
  bool correct() const { return label == predicted; }
};

enum class PoolFilter { kAll, kMisclassifiedOnly, kCorrectOnly };
std::string pool_filter_name(PoolFilter pool);
PoolFilter parse_pool_filter(const std::string& name);

struct NeighborQuery {
  /// Query by stored sample id, or by an explicit profile when unset.
  std::optional<std::size_t> sample_id;
  std::vector<double> profile;
  std::size_t k = 10;
  /// Inclusive [first_layer, last_layer] restriction of the compared coordinates.
  std::optional<std::pair<std::size_t, std::size_t>> layer_range;
  PoolFilter pool = PoolFilter::kAll;
  /// Sample id left out of the results (set automatically for stored queries).
  std::optional<std::size_t> exclude_id;
};

struct Neighbor {
  std::size_t sample_id;
  double similarity;
};

struct NeighborResult {
  std::vector<Neighbor> neighbors;  // descending similarity, ties by ascending id
  bool truncated = false;           // k exceeded the pool size
  bool zero_norm_query = false;     // query slice had zero norm; all similarities are 0
};

nlohmann::json neighbors_to_json(const NeighborResult& result);

/// Exact cosine-similarity search over standardized filter profiles.
class ProfileIndex {
 public:
  ProfileIndex() = default;
  ProfileIndex(const std::vector<FilterSaliencyProfile>& profiles, std::vector<LayerRange> layers);

  static ProfileIndex build(const Model& model, const Dataset& dataset, const ProfileStats& stats,
                            std::size_t workers = 1);

  std::size_t size() const { return meta_.size(); }
  std::size_t filter_count() const { return filters_; }
  const RowMeta& meta(std::size_t row) const { return meta_[row]; }
  const std::vector<RowMeta>& metas() const { return meta_; }
  std::vector<double> row(std::size_t r) const;
  const std::vector<LayerRange>& layers() const { return layers_; }
  /// Row holding the given sample id, or throws ConfigError.
  std::size_t row_of(std::size_t sample_id) const;

  /// Coordinate range [begin, end) of an inclusive layer range; the full range when unset.
  std::pair<std::size_t, std::size_t> slice(const std::optional<std::pair<std::size_t, std::size_t>>& layer_range) const;
  double similarity(std::size_t row_a, std::size_t row_b,
                    const std::optional<std::pair<std::size_t, std::size_t>>& layer_range = std::nullopt) const;

  NeighborResult knn(const NeighborQuery& query) const;

  /// Profiles go to <stem>.jsonl + <stem>.f32; the sidecar JSON records the layer table.
  void save(const std::filesystem::path& sidecar_path) const;
  static ProfileIndex load(const std::filesystem::path& sidecar_path);

 private:
  bool in_pool(std::size_t row, PoolFilter pool) const;

  std::vector<double> data_;  // row-major N x F
  std::vector<RowMeta> meta_;
  std::vector<LayerRange> layers_;
  std::size_t filters_ = 0;
};

/// Share of the k nearest neighbors whose unordered {label, predicted} pair
/// matches that of the (misclassified) sample; neighbors come from `pool`.
double neighbor_confusion_fraction(const ProfileIndex& index, std::size_t sample_id, std::size_t k,
                                   PoolFilter pool = PoolFilter::kMisclassifiedOnly);

struct PermutationTest {
  double observed = 0.0;
  std::vector<double> null_means;
  double p_value = 1.0;  // (1 + #{null >= observed}) / (1 + permutations)
  std::size_t queries = 0;
};

/// Mean confusion-pair sharing over all misclassified samples, against the
/// same statistic with neighbor lists shuffled across samples.
PermutationTest confusion_permutation_test(const ProfileIndex& index, std::size_t k, std::size_t permutations,
                                           std::uint64_t seed, PoolFilter pool = PoolFilter::kMisclassifiedOnly);

/// Mean fraction of correctly classified neighbors over the samples of one group.
double neighbor_correctness_rate(const ProfileIndex& index, SampleGroup group, std::size_t k = 10);

}  // namespace psal
