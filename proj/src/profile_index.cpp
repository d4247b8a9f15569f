#include "psal/profile_index.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "psal/checkpoint.hpp"
#include "psal/error.hpp"

namespace psal {

std::string pool_filter_name(PoolFilter pool) {
  switch (pool) {
    case PoolFilter::kAll: return "all";
    case PoolFilter::kMisclassifiedOnly: return "misclassified";
    case PoolFilter::kCorrectOnly: return "correct";
  }
  return "?";
}

PoolFilter parse_pool_filter(const std::string& name) {
  if (name == "all") return PoolFilter::kAll;
  if (name == "misclassified" || name == "misclassified_only") return PoolFilter::kMisclassifiedOnly;
  if (name == "correct" || name == "correct_only") return PoolFilter::kCorrectOnly;
  throw ConfigError("unknown pool filter '" + name + "'");
}

nlohmann::json neighbors_to_json(const NeighborResult& r) {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& n : r.neighbors) list.push_back({{"id", n.sample_id}, {"similarity", n.similarity}});
  return {{"neighbors", list}, {"truncated", r.truncated}, {"zero_norm_query", r.zero_norm_query}};
}

ProfileIndex::ProfileIndex(const std::vector<FilterSaliencyProfile>& profiles, std::vector<LayerRange> layers)
    : layers_(std::move(layers)) {
  filters_ = profiles.empty() ? 0 : profiles.front().values.size();
  std::size_t covered = 0;
  for (const auto& l : layers_) {
    if (l.first_filter != covered) throw ConfigError("layer table is not contiguous");
    covered += l.filter_count;
  }
  if (!profiles.empty() && covered != filters_) throw ShapeError("layer table does not cover the profile length");
  data_.reserve(profiles.size() * filters_);
  for (const auto& p : profiles) {
    if (p.values.size() != filters_) throw ShapeError("profiles in an index must share one length");
    data_.insert(data_.end(), p.values.begin(), p.values.end());
    meta_.push_back({p.sample_id, p.label, p.predicted});
  }
}

ProfileIndex ProfileIndex::build(const Model& model, const Dataset& dataset, const ProfileStats& stats,
                                 std::size_t workers) {
  auto profiles = raw_profiles(model, dataset, workers);
  for (auto& p : profiles) p = standardize(p, stats);
  return ProfileIndex(profiles, model.registry().layers());
}

std::vector<double> ProfileIndex::row(std::size_t r) const {
  if (r >= size()) throw ConfigError("index row out of range");
  return {data_.begin() + static_cast<long>(r * filters_), data_.begin() + static_cast<long>((r + 1) * filters_)};
}

std::size_t ProfileIndex::row_of(std::size_t sample_id) const {
  for (std::size_t r = 0; r < meta_.size(); ++r) {
    if (meta_[r].sample_id == sample_id) return r;
  }
  throw ConfigError("sample " + std::to_string(sample_id) + " is not in the index");
}

std::pair<std::size_t, std::size_t> ProfileIndex::slice(
    const std::optional<std::pair<std::size_t, std::size_t>>& range) const {
  if (!range) return {0, filters_};
  const auto [first, last] = *range;
  if (first > last || last >= layers_.size()) {
    throw ConfigError("layer range [" + std::to_string(first) + ", " + std::to_string(last) + "] outside 0.." +
                      std::to_string(layers_.size() - 1));
  }
  return {layers_[first].first_filter, layers_[last].first_filter + layers_[last].filter_count};
}

namespace {

double cosine_slice(const double* a, const double* b, std::size_t n, bool* zero) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0 || bb == 0) {
    if (zero) *zero = true;
    return 0.0;
  }
  return ab / (std::sqrt(aa) * std::sqrt(bb));
}

}  // namespace

double ProfileIndex::similarity(std::size_t a, std::size_t b,
                                const std::optional<std::pair<std::size_t, std::size_t>>& range) const {
  if (a >= size() || b >= size()) throw ConfigError("index row out of range");
  const auto [lo, hi] = slice(range);
  return cosine_slice(data_.data() + a * filters_ + lo, data_.data() + b * filters_ + lo, hi - lo, nullptr);
}

bool ProfileIndex::in_pool(std::size_t row, PoolFilter pool) const {
  switch (pool) {
    case PoolFilter::kAll: return true;
    case PoolFilter::kMisclassifiedOnly: return !meta_[row].correct();
    case PoolFilter::kCorrectOnly: return meta_[row].correct();
  }
  return false;
}

NeighborResult ProfileIndex::knn(const NeighborQuery& q) const {
  if (q.k == 0) throw ConfigError("k must be at least 1");
  std::vector<double> query_row;
  const double* qp = nullptr;
  std::optional<std::size_t> exclude = q.exclude_id;
  if (q.sample_id) {
    const std::size_t r = row_of(*q.sample_id);
    qp = data_.data() + r * filters_;
    if (!exclude) exclude = q.sample_id;
  } else {
    if (q.profile.size() != filters_) {
      throw ShapeError("query profile has " + std::to_string(q.profile.size()) + " entries, index has " +
                       std::to_string(filters_));
    }
    qp = q.profile.data();
  }
  const auto [lo, hi] = slice(q.layer_range);

  NeighborResult out;
  std::vector<Neighbor> pool;
  for (std::size_t r = 0; r < size(); ++r) {
    if (!in_pool(r, q.pool) || (exclude && meta_[r].sample_id == *exclude)) continue;
    bool zero = false;
    const double s = cosine_slice(qp + lo, data_.data() + r * filters_ + lo, hi - lo, &zero);
    pool.push_back({meta_[r].sample_id, s});
  }
  if (pool.empty()) throw ConfigError("neighbor pool is empty after filtering (" + pool_filter_name(q.pool) + ")");
  double qn = 0.0;
  for (std::size_t i = lo; i < hi; ++i) qn += qp[i] * qp[i];
  out.zero_norm_query = qn == 0.0;
  const std::size_t k = std::min(q.k, pool.size());
  out.truncated = q.k > pool.size();
  auto before = [](const Neighbor& a, const Neighbor& b) {
    return a.similarity > b.similarity || (a.similarity == b.similarity && a.sample_id < b.sample_id);
  };
  std::partial_sort(pool.begin(), pool.begin() + static_cast<long>(k), pool.end(), before);
  pool.resize(k);
  out.neighbors = std::move(pool);
  return out;
}

void ProfileIndex::save(const std::filesystem::path& sidecar_path) const {
  std::filesystem::path jsonl = sidecar_path, blob = sidecar_path;
  jsonl.replace_extension(".jsonl");
  blob.replace_extension(".f32");
  std::vector<FilterSaliencyProfile> profiles;
  for (std::size_t r = 0; r < size(); ++r) {
    FilterSaliencyProfile p;
    p.values = row(r);
    p.standardized = true;
    p.sample_id = meta_[r].sample_id;
    p.label = meta_[r].label;
    p.predicted = meta_[r].predicted;
    profiles.push_back(std::move(p));
  }
  save_profile_batch(profiles, jsonl, blob);
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : layers_) {
    layers.push_back({{"layer_id", l.layer_id}, {"name", l.name}, {"first_filter", l.first_filter}, {"filter_count", l.filter_count}});
  }
  const std::string text =
      nlohmann::json{{"profiles", jsonl.filename().string()}, {"rows", size()}, {"filters", filters_}, {"layers", layers}}.dump(2);
  write_file_bytes(sidecar_path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

ProfileIndex ProfileIndex::load(const std::filesystem::path& sidecar_path) {
  const auto bytes = read_file_bytes(sidecar_path);
  try {
    const auto j = nlohmann::json::parse(bytes.begin(), bytes.end());
    std::vector<LayerRange> layers;
    for (const auto& l : j.at("layers")) {
      layers.push_back({l.at("layer_id"), l.at("name"), l.at("first_filter"), l.at("filter_count")});
    }
    const auto profiles = load_profile_batch(sidecar_path.parent_path() / j.at("profiles").get<std::string>());
    if (profiles.size() != j.at("rows").get<std::size_t>()) throw FormatError("index row count mismatch");
    ProfileIndex index(profiles, std::move(layers));
    return index;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("invalid index sidecar " + sidecar_path.string() + ": " + e.what());
  }
}

namespace {

bool same_pair(const RowMeta& a, const RowMeta& b) {
  return std::minmax(a.label, a.predicted) == std::minmax(b.label, b.predicted);
}

double sharing(const ProfileIndex& index, const RowMeta& query, const std::vector<std::size_t>& neighbor_rows) {
  if (neighbor_rows.empty()) return 0.0;
  std::size_t hits = 0;
  for (auto r : neighbor_rows) hits += same_pair(query, index.meta(r));
  return static_cast<double>(hits) / static_cast<double>(neighbor_rows.size());
}

std::vector<std::size_t> neighbor_rows(const ProfileIndex& index, std::size_t sample_id, std::size_t k, PoolFilter pool) {
  NeighborQuery q;
  q.sample_id = sample_id;
  q.k = k;
  q.pool = pool;
  std::vector<std::size_t> rows;
  for (const auto& n : index.knn(q).neighbors) rows.push_back(index.row_of(n.sample_id));
  return rows;
}

}  // namespace

double neighbor_confusion_fraction(const ProfileIndex& index, std::size_t sample_id, std::size_t k, PoolFilter pool) {
  const RowMeta& m = index.meta(index.row_of(sample_id));
  if (m.correct()) throw ConfigError("sample " + std::to_string(sample_id) + " is correctly classified");
  return sharing(index, m, neighbor_rows(index, sample_id, k, pool));
}

PermutationTest confusion_permutation_test(const ProfileIndex& index, std::size_t k, std::size_t permutations,
                                           std::uint64_t seed, PoolFilter pool) {
  std::vector<std::size_t> queries;
  std::vector<std::vector<std::size_t>> lists;
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index.meta(r).correct()) continue;
    queries.push_back(r);
    lists.push_back(neighbor_rows(index, index.meta(r).sample_id, k, pool));
  }
  if (queries.size() < 2) throw ConfigError("permutation test needs at least two misclassified samples");
  auto statistic = [&](const std::vector<std::size_t>& assignment) {
    double s = 0.0;
    for (std::size_t i = 0; i < queries.size(); ++i) s += sharing(index, index.meta(queries[i]), lists[assignment[i]]);
    return s / static_cast<double>(queries.size());
  };
  PermutationTest t;
  t.queries = queries.size();
  std::vector<std::size_t> perm(queries.size());
  std::iota(perm.begin(), perm.end(), 0);
  t.observed = statistic(perm);
  std::mt19937_64 rng(seed);
  std::size_t at_least = 0;
  for (std::size_t p = 0; p < permutations; ++p) {
    std::shuffle(perm.begin(), perm.end(), rng);
    const double v = statistic(perm);
    t.null_means.push_back(v);
    at_least += v >= t.observed;
  }
  t.p_value = static_cast<double>(1 + at_least) / static_cast<double>(1 + permutations);
  return t;
}

double neighbor_correctness_rate(const ProfileIndex& index, SampleGroup group, std::size_t k) {
  double total = 0.0;
  std::size_t members = 0;
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index.meta(r).correct() != (group == SampleGroup::kCorrect)) continue;
    const auto rows = neighbor_rows(index, index.meta(r).sample_id, k, PoolFilter::kAll);
    std::size_t ok = 0;
    for (auto n : rows) ok += index.meta(n).correct();
    total += static_cast<double>(ok) / static_cast<double>(rows.size());
    ++members;
  }
  if (members == 0) throw ConfigError("no samples in the requested group");
  return total / static_cast<double>(members);
}

}  // namespace psal
