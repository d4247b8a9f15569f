#include "psal/autograd.hpp"

#include <cmath>
#include <optional>
#include <unordered_map>
#include <unordered_set>

#include "psal/error.hpp"
#include "psal/ops.hpp"

namespace psal {

namespace {

struct Visit {
  TensorImpl* impl;
  std::size_t next_input;
};

}  // namespace

GradResult backward(const Tensor& output, const std::vector<Tensor>& wrt, GradMode mode) {
  if (!output.defined() || output.numel() != 1) {
    throw ShapeError("backward requires a scalar output");
  }
  for (const auto& w : wrt) {
    if (!w.requires_grad()) throw Error("backward: wrt tensor does not require grad");
  }

  std::unordered_set<const TensorImpl*> targets;
  for (const auto& w : wrt) targets.insert(w.id());

  // Post-order DFS gives a topological order; `needed` marks tensors with a path to a target.
  std::vector<TensorImpl*> order;
  std::unordered_map<const TensorImpl*, bool> needed;
  if (output.requires_grad()) {
    std::vector<Visit> stack{{output.impl().get(), 0}};
    std::unordered_set<const TensorImpl*> seen{output.id()};
    while (!stack.empty()) {
      auto& top = stack.back();
      const auto& node = top.impl->node;
      if (node && top.next_input < node->inputs.size()) {
        const auto& in = node->inputs[top.next_input++];
        if (in.requires_grad() && seen.insert(in.id()).second) {
          stack.push_back({in.impl().get(), 0});
        }
        continue;
      }
      bool need = targets.count(top.impl) > 0;
      if (node) {
        for (const auto& in : node->inputs) {
          if (in.requires_grad() && needed[in.id()]) need = true;
        }
      }
      needed[top.impl] = need;
      order.push_back(top.impl);
      stack.pop_back();
    }
  }

  std::optional<NoGradGuard> no_grad;
  std::optional<EnableGradGuard> with_grad;
  if (mode == GradMode::kFirst) {
    no_grad.emplace();
  } else {
    with_grad.emplace();
  }

  std::unordered_map<const TensorImpl*, Tensor> grads;
  if (output.requires_grad()) grads[output.id()] = Tensor::full(output.shape(), 1.0);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* impl = *it;
    if (!impl->node || !needed[impl]) continue;
    auto git = grads.find(impl);
    if (git == grads.end()) continue;
    const Tensor grad = git->second;
    // Intermediate gradients are released once consumed unless requested.
    if (!targets.count(impl)) grads.erase(git);

    const auto& node = *impl->node;
    std::vector<bool> need(node.inputs.size());
    bool any = false;
    for (std::size_t i = 0; i < node.inputs.size(); ++i) {
      need[i] = node.inputs[i].requires_grad() && needed[node.inputs[i].id()];
      any = any || need[i];
    }
    if (!any) continue;
    auto input_grads = node.backward(grad, need);
    for (std::size_t i = 0; i < node.inputs.size(); ++i) {
      if (!need[i] || !input_grads[i].defined()) continue;
      const auto* key = node.inputs[i].id();
      auto slot = grads.find(key);
      if (slot == grads.end()) {
        grads.emplace(key, input_grads[i]);
      } else {
        slot->second = add(slot->second, input_grads[i]);
      }
    }
  }

  GradResult result;
  result.grads.reserve(wrt.size());
  result.reachable.reserve(wrt.size());
  for (const auto& w : wrt) {
    auto g = grads.find(w.id());
    if (g == grads.end()) {
      result.grads.push_back(Tensor::zeros(w.shape()));
      result.reachable.push_back(false);
    } else {
      result.grads.push_back(g->second);
      result.reachable.push_back(true);
    }
  }
  return result;
}

Tensor finite_diff_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
  if (!(h > 0.0)) throw ConfigError("finite difference step must be positive");
  NoGradGuard no_grad;
  Tensor probe = x.detach();
  std::vector<double> out(x.numel());
  auto values = probe.mutable_data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double original = values[i];
    values[i] = original + h;
    const double up = f(probe);
    values[i] = original - h;
    const double down = f(probe);
    values[i] = original;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericalError("non-finite function value during finite differencing");
    }
    out[i] = (up - down) / (2.0 * h);
  }
  return Tensor(x.shape(), std::move(out));
}

}  // namespace psal
