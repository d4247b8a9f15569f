#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "psal/checkpoint.hpp"
#include "psal/data.hpp"
#include "psal/model.hpp"

namespace psal {

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double lr = 0.05;
  /// Epochs at which lr is multiplied by decay_factor. Empty means 50% and 75% of epochs.
  std::vector<std::size_t> decay_epochs;
  double decay_factor = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::uint64_t seed = 0;

  void validate() const;
  double lr_at(std::size_t epoch) const;
};

nlohmann::json train_config_to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
};

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
  std::vector<Prediction> predictions;  // in dataset order
};

EvalResult evaluate(const Model& model, const Dataset& dataset, std::size_t batch_size = 128);

/// SGD with momentum over `train_set`; the model is updated in place. BN
/// running statistics are refreshed as a side effect. Throws NumericalError
/// with the epoch and batch if the loss stops being finite.
std::vector<EpochMetrics> train(Model& model, const Dataset& train_set, const Dataset& val_set,
                                const TrainConfig& config,
                                const std::function<void(const EpochMetrics&)>& on_epoch = {});

/// Rounds the model to storage precision and builds metadata with a golden
/// confidence vector, so a reloaded checkpoint reproduces it bit-for-bit.
TrainingMetadata finalize_for_checkpoint(Model& model, const Dataset& val_set, const TrainConfig& config);

void write_history_csv(const std::filesystem::path& path, const std::vector<EpochMetrics>& history);

enum class FinetuneMode { kMostSalient, kRandom, kLeastSalient };
std::string finetune_mode_name(FinetuneMode mode);
FinetuneMode parse_finetune_mode(const std::string& name);

struct FinetuneStep {
  std::vector<std::size_t> filter_ids;
  double step_size = 1e-3;
  FinetuneMode mode = FinetuneMode::kMostSalient;
  /// Largest allowed share of all filters; exceeding it needs allow_over_cap.
  double cap_fraction = 0.01;
  bool allow_over_cap = false;
};

struct FinetuneResult {
  Model model;
  bool corrected = false;      // predicted label equals the sample label after the step
  bool zero_gradient = false;  // restricted gradient vanished; model is an unmodified copy
  double loss_before = 0.0;
  double loss_after = 0.0;
  double update_norm = 0.0;
};

/// One normalized gradient step on the kernel weights of the listed filters,
/// evaluated with BN in inference mode. Everything else stays frozen.
FinetuneResult targeted_finetune(const Model& model, const Sample& sample, const FinetuneStep& step);

/// Same step with every trainable parameter free (full-network baseline).
FinetuneResult full_network_finetune(const Model& model, const Sample& sample, double step_size);

/// Cross-entropy of one sample under the inference-mode network.
double sample_loss(const Model& model, const Sample& sample);

}  // namespace psal
