#include "psal/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "psal/error.hpp"

namespace psal {

namespace {
thread_local bool g_recording = true;
thread_local ActivationPatternProbe* g_probe = nullptr;
}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kDiv: return "div";
    case OpKind::kScale: return "scale";
    case OpKind::kAbs: return "abs";
    case OpKind::kSqrt: return "sqrt";
    case OpKind::kRelu: return "relu";
    case OpKind::kSumAll: return "sum_all";
    case OpKind::kBroadcastScalar: return "broadcast_scalar";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kReshape: return "reshape";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kConv2dInputGrad: return "conv2d_input_grad";
    case OpKind::kConv2dWeightGrad: return "conv2d_weight_grad";
    case OpKind::kChannelSum: return "channel_sum";
    case OpKind::kChannelBroadcast: return "channel_broadcast";
    case OpKind::kRowSum: return "row_sum";
    case OpKind::kRowBroadcast: return "row_broadcast";
    case OpKind::kColSum: return "col_sum";
    case OpKind::kColBroadcast: return "col_broadcast";
    case OpKind::kMaxPool2d: return "max_pool2d";
    case OpKind::kGather: return "gather";
    case OpKind::kScatter: return "scatter";
    case OpKind::kAvgPool2d: return "avg_pool2d";
    case OpKind::kAvgPool2dAdjoint: return "avg_pool2d_adjoint";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kSoftmaxCrossEntropy: return "softmax_cross_entropy";
    case OpKind::kSlice: return "slice";
    case OpKind::kEmbed: return "embed";
    case OpKind::kConcat: return "concat";
    case OpKind::kGroupMean: return "group_mean";
    case OpKind::kGroupSpread: return "group_spread";
  }
  return "unknown";
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_str(shape));
  }
  for (auto e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
  impl_ = std::make_shared<TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= impl_->shape.size()) throw ShapeError("axis out of range for " + shape_str(impl_->shape));
  return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->data.size(); }

std::span<const double> Tensor::data() const { return impl_->data; }

std::span<double> Tensor::mutable_data() {
  if (impl_->node) throw Error("mutable_data() is only allowed on leaf tensors");
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
  if (impl_->node && !value) throw Error("cannot clear requires_grad on a non-leaf tensor");
  impl_->requires_grad = value;
  return *this;
}

bool Tensor::is_leaf() const { return !impl_->node; }

const std::shared_ptr<TapeNode>& Tensor::node() const { return impl_->node; }

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->data, false); }

Tensor Tensor::clone() const { return Tensor(impl_->shape, impl_->data, impl_->requires_grad); }

Tensor Tensor::from_impl(std::shared_ptr<TensorImpl> impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

bool recording_enabled() { return g_recording; }

NoGradGuard::NoGradGuard() : previous_(g_recording) { g_recording = false; }
NoGradGuard::~NoGradGuard() { g_recording = previous_; }

EnableGradGuard::EnableGradGuard() : previous_(g_recording) { g_recording = true; }
EnableGradGuard::~EnableGradGuard() { g_recording = previous_; }

Tensor make_result(OpKind kind, Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                   BackwardFn backward) {
  for (double v : data) {
    if (!std::isfinite(v)) {
      throw NumericalError(std::string("non-finite value produced by ") + op_name(kind));
    }
  }
  Tensor out(std::move(shape), std::move(data));
  if (!g_recording) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  auto node = std::make_shared<TapeNode>();
  node->kind = kind;
  node->inputs = std::move(inputs);
  node->backward = std::move(backward);
  out.impl()->requires_grad = true;
  out.impl()->node = std::move(node);
  return out;
}

ActivationPatternProbe::ActivationPatternProbe() : previous_(g_probe) { g_probe = this; }
ActivationPatternProbe::~ActivationPatternProbe() { g_probe = previous_; }

void ActivationPatternProbe::mix(std::uint64_t value) {
  hash_ ^= value + 0x9e3779b97f4a7c15ULL + (hash_ << 6) + (hash_ >> 2);
}

ActivationPatternProbe* ActivationPatternProbe::current() { return g_probe; }

}  // namespace psal
