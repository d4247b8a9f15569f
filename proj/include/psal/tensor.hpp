#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace psal {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

enum class OpKind {
  kAdd,
  kSub,
  kMul,
  kDiv,
  kScale,
  kAbs,
  kSqrt,
  kRelu,
  kSumAll,
  kBroadcastScalar,
  kMatmul,
  kTranspose,
  kReshape,
  kConv2d,
  kConv2dInputGrad,
  kConv2dWeightGrad,
  kChannelSum,
  kChannelBroadcast,
  kRowSum,
  kRowBroadcast,
  kColSum,
  kColBroadcast,
  kMaxPool2d,
  kGather,
  kScatter,
  kAvgPool2d,
  kAvgPool2dAdjoint,
  kSoftmax,
  kSoftmaxCrossEntropy,
  kSlice,
  kEmbed,
  kConcat,
  kGroupMean,
  kGroupSpread,
};

const char* op_name(OpKind kind);

/// Backward rule of a recorded operation. Receives the incoming gradient and
/// a per-input flag telling which input gradients are wanted; returns one
/// gradient per input (undefined tensors for unwanted ones). Rules are written
/// with the differentiable ops themselves, so the arithmetic they perform is
/// recorded when a higher-order backward pass is running.
using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad, const std::vector<bool>& need)>;

struct TapeNode {
  OpKind kind;
  std::vector<Tensor> inputs;
  BackwardFn backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::shared_ptr<TapeNode> node;  // null for leaves
};

/// Dense row-major n-d array of doubles with optional autograd history.
/// Copies are shallow handles; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const double> data() const;
  /// Mutable access for leaves only (parameter updates, input construction).
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t flat) const { return data()[flat]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool value);
  bool is_leaf() const;
  const std::shared_ptr<TapeNode>& node() const;

  /// Fresh leaf holding a copy of the values, without history.
  Tensor detach() const;
  /// Deep copy that keeps the requires_grad flag but drops history.
  Tensor clone() const;

  const TensorImpl* id() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

  static Tensor from_impl(std::shared_ptr<TensorImpl> impl);

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Thread-local switch controlling whether ops record onto the tape.
bool recording_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class EnableGradGuard {
 public:
  EnableGradGuard();
  ~EnableGradGuard();
  EnableGradGuard(const EnableGradGuard&) = delete;
  EnableGradGuard& operator=(const EnableGradGuard&) = delete;

 private:
  bool previous_;
};

/// Builds the output tensor of an op and records a tape node when recording is
/// on and some input requires grad. Throws NumericalError on non-finite output.
Tensor make_result(OpKind kind, Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                   BackwardFn backward);

/// Accumulates a hash of piecewise-linear branch decisions (ReLU masks,
/// max-pool argmax) made on this thread while alive. Two evaluations with equal
/// signatures lie in the same linear region, which finite-difference oracles
/// use to reject samples straddling a kink.
class ActivationPatternProbe {
 public:
  ActivationPatternProbe();
  ~ActivationPatternProbe();
  ActivationPatternProbe(const ActivationPatternProbe&) = delete;
  ActivationPatternProbe& operator=(const ActivationPatternProbe&) = delete;

  std::uint64_t signature() const { return hash_; }
  void mix(std::uint64_t value);

  static ActivationPatternProbe* current();

 private:
  std::uint64_t hash_ = 1469598103934665603ULL;
  ActivationPatternProbe* previous_;
};

}  // namespace psal
