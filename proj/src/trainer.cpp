#include "psal/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "psal/autograd.hpp"
#include "psal/error.hpp"

namespace psal {

void TrainConfig::validate() const {
  if (epochs == 0 || batch_size == 0) throw ConfigError("epochs and batch_size must be positive");
  if (!(lr >= 0) || !std::isfinite(lr)) throw ConfigError("lr must be a finite non-negative number");
  if (!(decay_factor > 0 && decay_factor <= 1)) throw ConfigError("decay_factor must lie in (0, 1] so the schedule never increases");
  if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be non-negative");
}

double TrainConfig::lr_at(std::size_t epoch) const {
  std::vector<std::size_t> marks = decay_epochs;
  if (marks.empty()) marks = {epochs / 2, (3 * epochs) / 4};
  double rate = lr;
  for (auto m : marks) {
    if (m > 0 && epoch >= m) rate *= decay_factor;
  }
  return rate;
}

nlohmann::json train_config_to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},         {"batch_size", c.batch_size},     {"lr", c.lr},
          {"decay_epochs", c.decay_epochs}, {"decay_factor", c.decay_factor}, {"momentum", c.momentum},
          {"weight_decay", c.weight_decay}, {"seed", c.seed}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.decay_epochs = j.value("decay_epochs", c.decay_epochs);
    c.decay_factor = j.value("decay_factor", c.decay_factor);
    c.momentum = j.value("momentum", c.momentum);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid training config: ") + e.what());
  }
  c.validate();
  return c;
}

EvalResult evaluate(const Model& model, const Dataset& dataset, std::size_t batch_size) {
  if (dataset.empty()) throw ConfigError("cannot evaluate on an empty dataset");
  NoGradGuard no_grad;
  EvalResult out;
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < dataset.size(); start += batch_size) {
    const std::size_t end = std::min(dataset.size(), start + batch_size);
    std::vector<Tensor> images;
    std::vector<std::size_t> labels;
    for (std::size_t i = start; i < end; ++i) {
      images.push_back(dataset.samples[i].image);
      labels.push_back(dataset.samples[i].label);
    }
    const Tensor batch = stack_images(images);
    const Tensor logits = model.forward_eval(batch);
    loss_sum += softmax_cross_entropy(logits, labels).item() * static_cast<double>(end - start);
    auto preds = model.predict_batch(batch);
    for (std::size_t i = 0; i < preds.size(); ++i) correct += preds[i].predicted == labels[i];
    for (auto& p : preds) out.predictions.push_back(std::move(p));
  }
  out.loss = loss_sum / static_cast<double>(dataset.size());
  out.accuracy = static_cast<double>(correct) / static_cast<double>(dataset.size());
  return out;
}

std::vector<EpochMetrics> train(Model& model, const Dataset& train_set, const Dataset& val_set,
                                const TrainConfig& config, const std::function<void(const EpochMetrics&)>& on_epoch) {
  config.validate();
  if (train_set.empty()) throw ConfigError("training split is empty");
  auto& params = model.parameters();
  std::vector<std::size_t> trainable;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].trainable()) trainable.push_back(i);
  }
  std::vector<Tensor> wrt;
  std::vector<std::vector<double>> velocity;
  for (auto i : trainable) {
    wrt.push_back(params[i].value);
    velocity.emplace_back(params[i].value.numel(), 0.0);
  }

  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<EpochMetrics> history;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = config.lr_at(epoch);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size, ++batch_index) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<Tensor> images;
      std::vector<std::size_t> labels;
      for (std::size_t k = start; k < end; ++k) {
        images.push_back(train_set.samples[order[k]].image);
        labels.push_back(train_set.samples[order[k]].label);
      }
      GradResult grads;
      double loss_value = 0.0;
      try {
        const Tensor loss = softmax_cross_entropy(model.forward(stack_images(images), true), labels);
        loss_value = loss.item();
        grads = backward(loss, wrt);
      } catch (const NumericalError& e) {
        throw NumericalError("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(batch_index) + " (lr " + std::to_string(lr) + "): " + e.what());
      }
      loss_sum += loss_value * static_cast<double>(end - start);
      for (std::size_t t = 0; t < trainable.size(); ++t) {
        const auto role = params[trainable[t]].role;
        const double decay =
            (role == ParamRole::kConvWeight || role == ParamRole::kDenseWeight) ? config.weight_decay : 0.0;
        auto value = params[trainable[t]].value.mutable_data();
        const auto g = grads.grads[t].data();
        auto& v = velocity[t];
        for (std::size_t k = 0; k < v.size(); ++k) {
          v[k] = config.momentum * v[k] + g[k] + decay * value[k];
          value[k] -= lr * v[k];
        }
      }
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = loss_sum / static_cast<double>(order.size());
    if (!std::isfinite(m.train_loss)) {
      throw NumericalError("training diverged at epoch " + std::to_string(epoch) + ": non-finite mean loss");
    }
    if (!val_set.empty()) {
      EvalResult ev;
      try {
        ev = evaluate(model, val_set);
      } catch (const NumericalError& e) {
        throw NumericalError("training diverged at epoch " + std::to_string(epoch) + " (validation pass): " + e.what());
      }
      m.val_loss = ev.loss;
      m.val_acc = ev.accuracy;
    }
    history.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  return history;
}

TrainingMetadata finalize_for_checkpoint(Model& model, const Dataset& val_set, const TrainConfig& config) {
  model.round_to_storage_precision();
  TrainingMetadata meta;
  meta.seed = config.seed;
  meta.epochs = config.epochs;
  meta.final_accuracy = val_set.empty() ? 0.0 : evaluate(model, val_set).accuracy;
  meta.golden = make_golden(model, config.seed);
  return meta;
}

void write_history_csv(const std::filesystem::path& path, const std::vector<EpochMetrics>& history) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out.precision(10);
  out << "epoch,train_loss,val_loss,val_acc\n";
  for (const auto& m : history) out << m.epoch << ',' << m.train_loss << ',' << m.val_loss << ',' << m.val_acc << '\n';
}

std::string finetune_mode_name(FinetuneMode mode) {
  switch (mode) {
    case FinetuneMode::kMostSalient: return "most_salient";
    case FinetuneMode::kRandom: return "random";
    case FinetuneMode::kLeastSalient: return "least_salient";
  }
  return "?";
}

FinetuneMode parse_finetune_mode(const std::string& name) {
  if (name == "most_salient") return FinetuneMode::kMostSalient;
  if (name == "random") return FinetuneMode::kRandom;
  if (name == "least_salient") return FinetuneMode::kLeastSalient;
  throw ConfigError("unknown fine-tune mode '" + name + "'");
}

double sample_loss(const Model& model, const Sample& sample) {
  NoGradGuard no_grad;
  return softmax_cross_entropy(model.forward_eval(stack_images({sample.image})), {sample.label}).item();
}

namespace {

Tensor sample_loss_tensor(const Model& model, const Sample& sample) {
  if (sample.label >= model.spec().num_classes) throw ConfigError("sample label outside the model's classes");
  return softmax_cross_entropy(model.forward_eval(stack_images({sample.image})), {sample.label});
}

void finish(FinetuneResult& r, const Sample& sample) {
  r.loss_after = sample_loss(r.model, sample);
  r.corrected = r.model.predict(sample.image).predicted == sample.label;
}

}  // namespace

FinetuneResult targeted_finetune(const Model& model, const Sample& sample, const FinetuneStep& step) {
  if (!(step.step_size >= 0) || !std::isfinite(step.step_size)) throw ConfigError("step_size must be finite and >= 0");
  const auto& registry = model.registry();
  const std::set<std::size_t> unique(step.filter_ids.begin(), step.filter_ids.end());
  if (unique.size() != step.filter_ids.size()) throw ConfigError("duplicate filter ids in fine-tune step");
  for (auto id : unique) registry.group(id);  // range check
  const auto cap = static_cast<std::size_t>(std::floor(step.cap_fraction * static_cast<double>(registry.filter_count())));
  if (!step.allow_over_cap && unique.size() > cap) {
    throw ConfigError("fine-tune touches " + std::to_string(unique.size()) + " filters; cap is " + std::to_string(cap) +
                      " (" + std::to_string(step.cap_fraction * 100) + "% of " +
                      std::to_string(registry.filter_count()) + "), pass an override to exceed it");
  }

  FinetuneResult r{Model(model)};
  const auto weights = r.model.conv_weights();
  GradResult grads = backward(sample_loss_tensor(r.model, sample), weights);
  r.loss_before = sample_loss(r.model, sample);

  double norm_sq = 0.0;
  for (auto id : unique) {
    const auto& g = registry.group(id);
    const auto& layer = r.model.conv_layers()[g.layer_id];
    const auto gd = grads.grads[g.layer_id].data();
    for (std::size_t k = 0; k < layer.fan_in(); ++k) norm_sq += gd[g.channel * layer.fan_in() + k] * gd[g.channel * layer.fan_in() + k];
  }
  const double norm = std::sqrt(norm_sq);
  if (norm == 0.0 || unique.empty()) {
    r.zero_gradient = true;
    finish(r, sample);
    return r;
  }
  if (step.step_size > 0) {
    for (auto id : unique) {
      const auto& g = registry.group(id);
      const auto& layer = r.model.conv_layers()[g.layer_id];
      const auto gd = grads.grads[g.layer_id].data();
      auto w = r.model.parameters()[layer.weight].value.mutable_data();
      for (std::size_t k = 0; k < layer.fan_in(); ++k) {
        const std::size_t idx = g.channel * layer.fan_in() + k;
        w[idx] -= step.step_size * gd[idx] / norm;
      }
    }
    r.update_norm = step.step_size;
  }
  finish(r, sample);
  return r;
}

FinetuneResult full_network_finetune(const Model& model, const Sample& sample, double step_size) {
  if (!(step_size >= 0) || !std::isfinite(step_size)) throw ConfigError("step_size must be finite and >= 0");
  FinetuneResult r{Model(model)};
  const auto wrt = r.model.trainable_tensors();
  GradResult grads = backward(sample_loss_tensor(r.model, sample), wrt);
  r.loss_before = sample_loss(r.model, sample);
  double norm_sq = 0.0;
  for (const auto& g : grads.grads) {
    for (double v : g.data()) norm_sq += v * v;
  }
  const double norm = std::sqrt(norm_sq);
  if (norm == 0.0) {
    r.zero_gradient = true;
    finish(r, sample);
    return r;
  }
  if (step_size > 0) {
    for (std::size_t t = 0; t < wrt.size(); ++t) {
      Tensor target = wrt[t];
      auto w = target.mutable_data();
      const auto g = grads.grads[t].data();
      for (std::size_t k = 0; k < w.size(); ++k) w[k] -= step_size * g[k] / norm;
    }
    r.update_norm = step_size;
  }
  finish(r, sample);
  return r;
}

}  // namespace psal
