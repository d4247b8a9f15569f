#pragma once

#include <functional>
#include <vector>

#include "psal/tensor.hpp"

namespace psal {

enum class GradMode {
  kFirst,
  /// Backward arithmetic is recorded, so returned gradients can be differentiated again.
  kHigher,
};

struct GradResult {
  std::vector<Tensor> grads;
  /// False where the wrt tensor is not reachable from the output; its gradient is zero.
  std::vector<bool> reachable;
};

/// Reverse-mode gradient of a scalar output with respect to each wrt tensor.
GradResult backward(const Tensor& output, const std::vector<Tensor>& wrt, GradMode mode = GradMode::kFirst);

/// Central-difference gradient estimate of a scalar function, one coordinate at a time.
Tensor finite_diff_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, double h);

}  // namespace psal
