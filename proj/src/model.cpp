#include "psal/model.hpp"

#include <cmath>
#include <cstring>
#include <random>
#include <set>

#include "psal/error.hpp"

namespace psal {

std::string architecture_name(Architecture arch) {
  return arch == Architecture::kSmallResnet ? "small_resnet" : "plain_cnn";
}

Architecture parse_architecture(const std::string& name) {
  if (name == "small_resnet") return Architecture::kSmallResnet;
  if (name == "plain_cnn") return Architecture::kPlainCnn;
  throw ConfigError("unsupported architecture '" + name + "'");
}

void ModelSpec::validate() const {
  if (widths.empty()) throw ConfigError("model spec needs at least one stage width");
  for (auto w : widths) {
    if (w == 0) throw ConfigError("stage widths must be positive");
  }
  if (blocks_per_stage == 0) throw ConfigError("blocks per stage must be positive");
  if (channels == 0 || height == 0 || width == 0) throw ConfigError("input shape must be positive");
  if (num_classes < 2) throw ConfigError("class count must be at least 2");
}

FilterRegistry::FilterRegistry(const std::vector<ConvLayer>& layers) {
  auto sets = std::make_shared<std::vector<std::vector<std::size_t>>>();
  for (const auto& layer : layers) {
    layers_.push_back({layer.layer_id, layer.name, groups_.size(), layer.out_channels});
    const std::size_t fan = layer.fan_in();
    for (std::size_t ch = 0; ch < layer.out_channels; ++ch) {
      FilterGroup g;
      g.id = groups_.size();
      g.layer_id = layer.layer_id;
      g.channel = ch;
      g.alpha.resize(fan);
      for (std::size_t i = 0; i < fan; ++i) g.alpha[i] = layer.weight_offset + ch * fan + i;
      g.bias_param = layer.bias;
      g.bn_gamma_param = layer.bn_gamma;
      g.bn_beta_param = layer.bn_beta;
      sets->push_back(g.alpha);
      groups_.push_back(std::move(g));
    }
    kernel_weights_ += layer.out_channels * fan;
  }
  sets_ = std::move(sets);
}

const FilterGroup& FilterRegistry::group(std::size_t id) const {
  if (id >= groups_.size()) {
    throw ConfigError("filter id " + std::to_string(id) + " out of range (" + std::to_string(groups_.size()) +
                      " filters)");
  }
  return groups_[id];
}

Model::Model(const ModelSpec& spec, std::uint64_t seed) : spec_(spec) {
  spec_.validate();
  std::size_t in = spec_.channels;
  std::size_t h = spec_.height, w = spec_.width;
  if (spec_.architecture == Architecture::kSmallResnet) {
    stage_names_.push_back("stem");
    stem_ = add_conv("stem.conv", in, spec_.widths[0], 3, 1, 1, false, true, 0);
    in = spec_.widths[0];
    for (std::size_t s = 0; s < spec_.widths.size(); ++s) {
      const std::string stage = "stage" + std::to_string(s + 1);
      stage_names_.push_back(stage);
      const std::size_t out = spec_.widths[s];
      for (std::size_t b = 0; b < spec_.blocks_per_stage; ++b) {
        const std::string prefix = stage + ".block" + std::to_string(b);
        const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
        ResBlock block{};
        block.conv1 = add_conv(prefix + ".conv1", in, out, 3, stride, 1, false, true, s + 1);
        block.conv2 = add_conv(prefix + ".conv2", out, out, 3, 1, 1, false, true, s + 1);
        if (stride != 1 || in != out) {
          block.shortcut = add_conv(prefix + ".shortcut", in, out, 1, stride, 0, false, true, s + 1);
        }
        blocks_.push_back(block);
        in = out;
      }
    }
  } else {
    for (std::size_t s = 0; s < spec_.widths.size(); ++s) {
      const std::string stage = "stage" + std::to_string(s + 1);
      stage_names_.push_back(stage);
      std::vector<std::size_t> convs;
      for (std::size_t b = 0; b < spec_.blocks_per_stage; ++b) {
        convs.push_back(add_conv(stage + ".conv" + std::to_string(b), in, spec_.widths[s], 3, 1, 1, true, false,
                                 stage_names_.size() - 1));
        in = spec_.widths[s];
      }
      plain_stages_.push_back(std::move(convs));
      if (h >= 2 && w >= 2) {
        h /= 2;
        w /= 2;
      }
    }
  }
  stage_names_.push_back("head");
  const std::size_t head = stage_names_.size() - 1;
  fc_weight_ = add_param("fc.weight", {spec_.num_classes, in}, ParamRole::kDenseWeight, head);
  fc_bias_ = add_param("fc.bias", {spec_.num_classes}, ParamRole::kDenseBias, head);

  for (std::size_t i = 0; i < params_.size(); ++i) init_parameter(params_[i], seed, i);
  registry_ = FilterRegistry(conv_layers_);
}

Model::Model(const Model& other)
    : spec_(other.spec_),
      params_(other.params_),
      conv_layers_(other.conv_layers_),
      blocks_(other.blocks_),
      stem_(other.stem_),
      plain_stages_(other.plain_stages_),
      fc_weight_(other.fc_weight_),
      fc_bias_(other.fc_bias_),
      stage_names_(other.stage_names_),
      registry_(other.registry_) {
  for (auto& p : params_) p.value = p.value.clone();
}

Model& Model::operator=(const Model& other) {
  if (this != &other) *this = Model(other);
  return *this;
}

std::size_t Model::add_param(std::string name, Shape shape, ParamRole role, std::size_t stage) {
  const bool grad = role != ParamRole::kBnRunningMean && role != ParamRole::kBnRunningVar;
  params_.push_back({std::move(name), Tensor::zeros(std::move(shape)).set_requires_grad(grad), role, stage});
  return params_.size() - 1;
}

std::size_t Model::add_conv(const std::string& name, std::size_t in, std::size_t out, std::size_t kernel,
                            std::size_t stride, std::size_t pad, bool bias, bool bn, std::size_t stage) {
  ConvLayer layer{};
  layer.layer_id = conv_layers_.size();
  layer.name = name;
  layer.weight = add_param(name + ".weight", {out, in, kernel, kernel}, ParamRole::kConvWeight, stage);
  if (bias) layer.bias = add_param(name + ".bias", {out}, ParamRole::kConvBias, stage);
  if (bn) {
    const std::string bn_name = name + ".bn";
    layer.bn_gamma = add_param(bn_name + ".weight", {out}, ParamRole::kBnGamma, stage);
    layer.bn_beta = add_param(bn_name + ".bias", {out}, ParamRole::kBnBeta, stage);
    layer.bn_mean = add_param(bn_name + ".running_mean", {out}, ParamRole::kBnRunningMean, stage);
    layer.bn_var = add_param(bn_name + ".running_var", {out}, ParamRole::kBnRunningVar, stage);
  }
  layer.in_channels = in;
  layer.out_channels = out;
  layer.kernel = kernel;
  layer.stride = stride;
  layer.pad = pad;
  layer.stage = stage;
  layer.filter_offset = 0;
  layer.weight_offset = 0;
  if (!conv_layers_.empty()) {
    const auto& prev = conv_layers_.back();
    layer.filter_offset = prev.filter_offset + prev.out_channels;
    layer.weight_offset = prev.weight_offset + prev.out_channels * prev.fan_in();
  }
  conv_layers_.push_back(layer);
  return conv_layers_.size() - 1;
}

void Model::init_parameter(Parameter& p, std::uint64_t seed, std::size_t salt) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(salt), 0x5a11u};
  std::mt19937_64 rng(seq);
  auto values = p.value.mutable_data();
  switch (p.role) {
    case ParamRole::kConvWeight:
    case ParamRole::kDenseWeight: {
      const auto& shape = p.value.shape();
      const std::size_t fan_in = p.value.numel() / shape[0];
      std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
      for (auto& v : values) v = dist(rng);
      break;
    }
    case ParamRole::kBnGamma:
    case ParamRole::kBnRunningVar:
      std::fill(values.begin(), values.end(), 1.0);
      break;
    default:
      std::fill(values.begin(), values.end(), 0.0);
  }
}

namespace {

struct BnUpdate {
  std::size_t mean_param, var_param;
  std::vector<double> mean, var;
  double count;
};

}  // namespace

Tensor Model::apply_conv(const Tensor& x, std::size_t conv_index, bool train, const std::optional<std::size_t>& stop,
                         std::optional<Tensor>* captured) {
  const auto& layer = conv_layers_[conv_index];
  Tensor y = conv2d(x, params_[layer.weight].value, {layer.stride, layer.pad});
  if (layer.bias) y = add(y, channel_broadcast(params_[*layer.bias].value, y.shape()));
  if (layer.bn_gamma) {
    const auto& gamma = params_[*layer.bn_gamma].value;
    const auto& beta = params_[*layer.bn_beta].value;
    if (train) {
      auto r = batchnorm2d_train(y, gamma, beta);
      const double count = static_cast<double>(y.numel() / y.dim(1));
      const double unbias = count > 1 ? count / (count - 1.0) : 1.0;
      auto rm = params_[*layer.bn_mean].value.mutable_data();
      auto rv = params_[*layer.bn_var].value.mutable_data();
      for (std::size_t c = 0; c < rm.size(); ++c) {
        rm[c] = 0.9 * rm[c] + 0.1 * r.batch_mean[c];
        rv[c] = 0.9 * rv[c] + 0.1 * r.batch_var[c] * unbias;
      }
      y = r.output;
    } else {
      y = batchnorm2d_eval(y, gamma, beta, params_[*layer.bn_mean].value, params_[*layer.bn_var].value);
    }
  }
  if (stop && *stop == layer.layer_id && captured) *captured = y;
  return y;
}

Tensor Model::run(const Tensor& x, bool train, std::optional<std::size_t> stop, std::optional<Tensor>* captured) {
  if (x.rank() != 4 || x.dim(1) != spec_.channels || x.dim(2) != spec_.height || x.dim(3) != spec_.width) {
    throw ShapeError("model input must be [N," + std::to_string(spec_.channels) + "," + std::to_string(spec_.height) +
                     "," + std::to_string(spec_.width) + "], got " + shape_str(x.shape()));
  }
  Tensor h = x;
  if (spec_.architecture == Architecture::kSmallResnet) {
    h = relu(apply_conv(h, *stem_, train, stop, captured));
    for (const auto& block : blocks_) {
      Tensor branch = relu(apply_conv(h, block.conv1, train, stop, captured));
      branch = apply_conv(branch, block.conv2, train, stop, captured);
      Tensor skip = block.shortcut ? apply_conv(h, *block.shortcut, train, stop, captured) : h;
      h = relu(add(branch, skip));
    }
  } else {
    for (const auto& stage : plain_stages_) {
      for (auto conv : stage) h = relu(apply_conv(h, conv, train, stop, captured));
      if (h.dim(2) >= 2 && h.dim(3) >= 2) h = max_pool2d(h, 2, 2);
    }
  }
  return dense(global_avg_pool(h), params_[fc_weight_].value, params_[fc_bias_].value);
}

Tensor Model::forward(const Tensor& x, bool train) { return run(x, train, std::nullopt, nullptr); }

Tensor Model::forward_eval(const Tensor& x) const {
  // Eval mode reads parameters only.
  return const_cast<Model*>(this)->run(x, false, std::nullopt, nullptr);
}

Tensor Model::conv_block_output(const Tensor& x, std::size_t layer_id) const {
  if (layer_id >= conv_layers_.size()) throw ConfigError("conv layer id out of range");
  std::optional<Tensor> captured;
  NoGradGuard no_grad;
  const_cast<Model*>(this)->run(x, false, layer_id, &captured);
  return *captured;
}

std::vector<Tensor> Model::conv_weights() const {
  std::vector<Tensor> out;
  for (const auto& layer : conv_layers_) out.push_back(params_[layer.weight].value);
  return out;
}

std::vector<Tensor> Model::trainable_tensors() const {
  std::vector<Tensor> out;
  for (const auto& p : params_) {
    if (p.trainable()) out.push_back(p.value);
  }
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) {
    if (p.trainable()) n += p.value.numel();
  }
  return n;
}

std::uint64_t Model::fingerprint() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* data, std::size_t bytes) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < bytes; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& p : params_) {
    mix(p.name.data(), p.name.size());
    mix(p.value.data().data(), p.value.numel() * sizeof(double));
  }
  return h;
}

void Model::round_to_storage_precision() {
  for (auto& p : params_) {
    for (auto& v : p.value.mutable_data()) v = static_cast<double>(static_cast<float>(v));
  }
}

std::vector<Prediction> Model::predict_batch(const Tensor& batch) const {
  NoGradGuard no_grad;
  Tensor logits = forward_eval(batch);
  Tensor probs = softmax(logits);
  const std::size_t k = spec_.num_classes;
  std::vector<Prediction> out(batch.dim(0));
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto& p = out[i];
    p.scores.assign(logits.data().begin() + i * k, logits.data().begin() + (i + 1) * k);
    p.confidences.assign(probs.data().begin() + i * k, probs.data().begin() + (i + 1) * k);
    p.predicted = 0;
    for (std::size_t c = 1; c < k; ++c) {
      if (p.scores[c] > p.scores[p.predicted]) p.predicted = c;
    }
  }
  return out;
}

Prediction Model::predict(const Tensor& image) const {
  return predict_batch(stack_images({image})).front();
}

Model build_model(const ModelSpec& spec, std::uint64_t seed) { return Model(spec, seed); }

Model prune_filters(const Model& model, const std::vector<std::size_t>& filter_ids) {
  Model out(model);
  auto& params = out.parameters();
  for (auto id : filter_ids) {
    const auto& group = out.registry().group(id);
    const auto& layer = out.conv_layers()[group.layer_id];
    auto w = params[layer.weight].value.mutable_data();
    std::fill_n(w.begin() + group.channel * layer.fan_in(), layer.fan_in(), 0.0);
    for (auto companion : {group.bias_param, group.bn_gamma_param, group.bn_beta_param}) {
      if (companion) params[*companion].value.mutable_data()[group.channel] = 0.0;
    }
  }
  return out;
}

Model perturb_filters(const Model& model, const std::vector<std::size_t>& filter_ids, double noise_std,
                      std::uint64_t seed) {
  if (!(noise_std >= 0.0)) throw ConfigError("noise_std must be non-negative");
  Model out(model);
  for (auto id : filter_ids) out.registry().group(id);
  if (noise_std == 0.0) return out;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, noise_std);
  auto& params = out.parameters();
  for (auto id : filter_ids) {
    const auto& group = out.registry().group(id);
    const auto& layer = out.conv_layers()[group.layer_id];
    auto w = params[layer.weight].value.mutable_data();
    for (std::size_t i = 0; i < layer.fan_in(); ++i) w[group.channel * layer.fan_in() + i] += dist(rng);
  }
  return out;
}

Model randomize_stages(const Model& model, const std::vector<std::size_t>& stage_ids, std::uint64_t seed) {
  Model out(model);
  std::set<std::size_t> stages;
  for (auto s : stage_ids) {
    if (s >= out.stage_count()) throw ConfigError("stage id " + std::to_string(s) + " out of range");
    stages.insert(s);
  }
  for (std::size_t i = 0; i < out.params_.size(); ++i) {
    auto& p = out.params_[i];
    if (stages.count(p.stage)) out.init_parameter(p, seed ^ 0x9e3779b97f4a7c15ULL, i);
  }
  return out;
}

Tensor stack_images(const std::vector<Tensor>& images) {
  if (images.empty()) throw ShapeError("cannot stack zero images");
  const Shape& s = images.front().shape();
  if (s.size() != 3) throw ShapeError("images must be [C,H,W]");
  std::vector<double> data;
  data.reserve(images.size() * images.front().numel());
  for (const auto& img : images) {
    if (img.shape() != s) throw ShapeError("images in a batch must share a shape");
    data.insert(data.end(), img.data().begin(), img.data().end());
  }
  return Tensor({images.size(), s[0], s[1], s[2]}, std::move(data));
}

}  // namespace psal
