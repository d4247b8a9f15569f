#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "psal/ops.hpp"
#include "psal/tensor.hpp"

namespace psal {

enum class Architecture { kSmallResnet, kPlainCnn };

std::string architecture_name(Architecture arch);
Architecture parse_architecture(const std::string& name);

struct ModelSpec {
  Architecture architecture = Architecture::kSmallResnet;
  std::vector<std::size_t> widths{16, 32, 64};
  std::size_t blocks_per_stage = 2;
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t num_classes = 10;

  void validate() const;
  bool operator==(const ModelSpec&) const = default;
};

enum class ParamRole { kConvWeight, kConvBias, kBnGamma, kBnBeta, kBnRunningMean, kBnRunningVar, kDenseWeight, kDenseBias };

struct Parameter {
  std::string name;
  Tensor value;
  ParamRole role;
  std::size_t stage;
  bool trainable() const { return role != ParamRole::kBnRunningMean && role != ParamRole::kBnRunningVar; }
};

struct ConvLayer {
  std::size_t layer_id;
  std::string name;
  std::size_t weight;  // index into Model::parameters()
  std::optional<std::size_t> bias;
  std::optional<std::size_t> bn_gamma, bn_beta, bn_mean, bn_var;
  std::size_t in_channels, out_channels, kernel, stride, pad;
  std::size_t stage;
  std::size_t filter_offset;  // global id of output channel 0
  std::size_t weight_offset;  // global kernel-weight index of the first weight

  std::size_t fan_in() const { return in_channels * kernel * kernel; }
};

/// A convolutional filter: one output channel of one conv layer. `alpha` holds
/// the global indices of its kernel weights in the concatenated kernel-weight
/// vector (conv layers in layer order, each flattened row-major).
struct FilterGroup {
  std::size_t id;
  std::size_t layer_id;
  std::size_t channel;
  std::vector<std::size_t> alpha;
  std::optional<std::size_t> bias_param;
  std::optional<std::size_t> bn_gamma_param;
  std::optional<std::size_t> bn_beta_param;
};

struct LayerRange {
  std::size_t layer_id;
  std::string name;
  std::size_t first_filter;
  std::size_t filter_count;
};

class FilterRegistry {
 public:
  FilterRegistry() = default;
  FilterRegistry(const std::vector<ConvLayer>& layers);

  std::size_t filter_count() const { return groups_.size(); }
  std::size_t kernel_weight_count() const { return kernel_weights_; }
  const std::vector<FilterGroup>& groups() const { return groups_; }
  const FilterGroup& group(std::size_t id) const;
  const std::vector<LayerRange>& layers() const { return layers_; }
  const IndexSets& index_sets() const { return sets_; }

 private:
  std::vector<FilterGroup> groups_;
  std::vector<LayerRange> layers_;
  std::size_t kernel_weights_ = 0;
  IndexSets sets_;
};

struct Prediction {
  std::vector<double> scores;
  std::vector<double> confidences;
  std::size_t predicted = 0;
};

/// Small residual CNN or plain CNN with a filter registry. Copying a Model
/// deep-copies every tensor, so interventions on a copy never touch the source.
class Model {
 public:
  Model(const ModelSpec& spec, std::uint64_t seed);
  Model(const Model& other);
  Model& operator=(const Model& other);
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const ModelSpec& spec() const { return spec_; }
  const FilterRegistry& registry() const { return registry_; }
  const std::vector<ConvLayer>& conv_layers() const { return conv_layers_; }
  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  std::size_t stage_count() const { return stage_names_.size(); }
  const std::vector<std::string>& stage_names() const { return stage_names_; }

  /// x is [N,C,H,W]. Eval mode uses running statistics; train mode uses batch
  /// statistics and updates the running averages.
  Tensor forward(const Tensor& x, bool train = false);
  Tensor forward_eval(const Tensor& x) const;

  std::vector<Tensor> conv_weights() const;
  std::vector<Tensor> trainable_tensors() const;
  std::size_t parameter_count() const;

  /// Hash of every parameter and buffer value.
  std::uint64_t fingerprint() const;
  /// Rounds every value to the 32-bit checkpoint precision.
  void round_to_storage_precision();

  Prediction predict(const Tensor& image) const;
  std::vector<Prediction> predict_batch(const Tensor& batch) const;

  /// Output of conv + (bias) + batch norm for `layer_id`, before the
  /// non-linearity or residual add, evaluated on x.
  Tensor conv_block_output(const Tensor& x, std::size_t layer_id) const;

 private:
  struct ResBlock {
    std::size_t conv1, conv2;
    std::optional<std::size_t> shortcut;
  };

  std::size_t add_param(std::string name, Shape shape, ParamRole role, std::size_t stage);
  std::size_t add_conv(const std::string& name, std::size_t in, std::size_t out, std::size_t kernel,
                       std::size_t stride, std::size_t pad, bool bias, bool bn, std::size_t stage);
  Tensor apply_conv(const Tensor& x, std::size_t conv_index, bool train, const std::optional<std::size_t>& stop,
                    std::optional<Tensor>* captured);
  Tensor run(const Tensor& x, bool train, std::optional<std::size_t> stop_layer, std::optional<Tensor>* captured);
  void init_parameter(Parameter& p, std::uint64_t seed, std::size_t salt);

  friend Model randomize_stages(const Model&, const std::vector<std::size_t>&, std::uint64_t);

  ModelSpec spec_;
  std::vector<Parameter> params_;
  std::vector<ConvLayer> conv_layers_;
  std::vector<ResBlock> blocks_;
  std::optional<std::size_t> stem_;
  std::vector<std::vector<std::size_t>> plain_stages_;
  std::size_t fc_weight_ = 0, fc_bias_ = 0;
  std::vector<std::string> stage_names_;
  FilterRegistry registry_;
};

Model build_model(const ModelSpec& spec, std::uint64_t seed);

/// Kernel weights := 0, conv bias := 0, batch-norm gamma and beta := 0 for each
/// listed filter, so its channel's post-norm output is exactly zero.
Model prune_filters(const Model& model, const std::vector<std::size_t>& filter_ids);

/// Adds i.i.d. N(0, noise_std^2) noise to the kernel weights of the listed filters.
Model perturb_filters(const Model& model, const std::vector<std::size_t>& filter_ids, double noise_std,
                      std::uint64_t seed);

/// Re-initializes every parameter of the listed stages from the init distribution
/// (batch-norm running statistics reset to mean 0, variance 1).
Model randomize_stages(const Model& model, const std::vector<std::size_t>& stage_ids, std::uint64_t seed);

/// Builds a [N,C,H,W] batch from [C,H,W] images.
Tensor stack_images(const std::vector<Tensor>& images);

}  // namespace psal
