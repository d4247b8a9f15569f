#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "psal/input_saliency.hpp"
#include "psal/profile_index.hpp"
#include "psal/saliency.hpp"
#include "psal/stats.hpp"
#include "psal/trainer.hpp"

namespace psal {

using SelectionMode = FinetuneMode;

struct SweepConfig {
  std::vector<SelectionMode> modes{SelectionMode::kMostSalient, SelectionMode::kRandom, SelectionMode::kLeastSalient};
  std::vector<std::size_t> counts;  // ascending numbers of filters
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  std::size_t resamples = 1000;
  // Perturbation sweeps.
  double noise_std = 0.001;
  std::size_t noise_seeds = 5;
  // Fine-tune sweeps.
  double step_size = 1e-3;
  bool allow_over_cap = false;
  std::size_t neighbors = 10;

  void validate(std::size_t filter_count) const;
};

nlohmann::json sweep_config_to_json(const SweepConfig& c);
SweepConfig sweep_config_from_json(const nlohmann::json& j);

/// Filter counts for the given percentages of `total` (rounded, at least 1, deduplicated).
std::vector<std::size_t> counts_from_percentages(std::size_t total, const std::vector<double>& percentages);

/// Filters picked for one sample: top-k or bottom-k of ŝ (ties by lower id), or
/// k uniform draws without replacement seeded by (seed, sample id, k).
std::vector<std::size_t> select_filters(const std::vector<double>& standardized, SelectionMode mode, std::size_t k,
                                        std::uint64_t seed, std::size_t sample_id);

/// Samples the model gets wrong (or right), in dataset order, optionally capped.
Dataset misclassified_subset(const Model& model, const Dataset& dataset,
                             std::optional<std::size_t> limit = std::nullopt);
Dataset correct_subset(const Model& model, const Dataset& dataset, std::optional<std::size_t> limit = std::nullopt);

struct SampleRecord {
  std::size_t sample_id = 0;
  SelectionMode mode = SelectionMode::kMostSalient;
  std::size_t k = 0;
  double d_predicted = 0.0;  // confidence change of the originally predicted class
  double d_true = 0.0;       // confidence change of the true class
  double corrected = 0.0;    // 1 if now predicted as the true label (mean over noise seeds when perturbing)
  // Fine-tune sweeps only.
  double neighbor_corrected = 0.0;
  double neighbor_true_delta = 0.0;
  double baseline_corrected = 0.0;
};

struct MetricCI {
  double mean = 0.0, lower = 0.0, upper = 0.0;
};

struct ReportRow {
  SelectionMode mode;
  std::size_t k;
  std::size_t samples;
  MetricCI d_predicted, d_true, corrected;
  MetricCI neighbor_corrected, neighbor_true_delta, baseline_corrected;
};

struct ExperimentReport {
  std::string name;
  std::vector<ReportRow> rows;
  std::vector<SampleRecord> records;
  nlohmann::json config;
  std::uint64_t model_fingerprint = 0;
  double runtime_seconds = 0.0;  // kept out of written files so they stay reproducible

  const ReportRow& row(SelectionMode mode, std::size_t k) const;
};

/// Prunes the per-sample selection and re-predicts. Use a misclassified pool
/// for the main sweep or a correct pool for the confidence-drop variant.
ExperimentReport pruning_sweep(const Model& model, const Dataset& pool, const ProfileStats& stats,
                               const SweepConfig& config);
ExperimentReport correct_pool_pruning(const Model& model, const Dataset& correct_pool, const ProfileStats& stats,
                                      const SweepConfig& config);
/// As pruning_sweep with Gaussian kernel-weight noise, averaged over noise seeds.
ExperimentReport perturbation_sweep(const Model& model, const Dataset& pool, const ProfileStats& stats,
                                    const SweepConfig& config);
/// One targeted fine-tune step per (sample, mode, count), plus neighbor effects
/// on the misclassified part of `neighbor_pool` found through `neighbor_index`.
ExperimentReport finetune_sweep(const Model& model, const Dataset& pool, const ProfileStats& stats,
                                const Dataset& neighbor_pool, const ProfileIndex& neighbor_index,
                                const SweepConfig& config);

struct MaskRecord {
  std::size_t sample_id = 0;
  std::size_t masked_pixels = 0;
  double salient_d_true = 0.0, salient_d_incorrect = 0.0;
  double random_d_true = 0.0, random_d_incorrect = 0.0;
  double filter_saliency_original = 0.0, filter_saliency_salient = 0.0, filter_saliency_random = 0.0;
};

struct MaskReport {
  double percent = 0.0;
  std::vector<MaskRecord> records;
  double mean_salient_d_true = 0, mean_salient_d_incorrect = 0, mean_random_d_true = 0, mean_random_d_incorrect = 0;
  double mean_filter_saliency_salient = 0, mean_filter_saliency_random = 0;
  SignTest salient_true, salient_incorrect, random_true, random_incorrect;
  /// Paired: salient incorrect-class change vs random incorrect-class change.
  SignTest salient_vs_random_incorrect;
  SignTest salient_vs_random_filter_saliency;
  std::uint64_t model_fingerprint = 0;
  double runtime_seconds = 0.0;
};

struct MaskConfig {
  double percent = 5.0;
  std::size_t top_filters = 10;
  double boost = 100.0;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  std::map<std::size_t, Rect> protect;  // per sample id
};

MaskReport mask_dataset_experiment(const Model& model, const Dataset& pool, const ProfileStats& stats,
                                   const MaskConfig& config);

nlohmann::json report_to_json(const ExperimentReport& report);
void write_report_csv(const std::filesystem::path& path, const ExperimentReport& report);
nlohmann::json mask_report_to_json(const MaskReport& report);
void write_mask_csv(const std::filesystem::path& path, const MaskReport& report);
void write_json(const std::filesystem::path& path, const nlohmann::json& j);

}  // namespace psal
