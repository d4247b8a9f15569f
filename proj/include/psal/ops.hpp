#pragma once

#include <cstddef>
#include <memory>
#include <vector>

#include "psal/tensor.hpp"

namespace psal {

// Elementwise ops require identical shapes; the only broadcasting is through
// the explicit *_broadcast ops (bias-add, per-channel affine, scalar scaling).

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor abs(const Tensor& a);  // subgradient 0 at 0
Tensor sqrt(const Tensor& a);
Tensor relu(const Tensor& a);

/// Sum of all entries, shape [1].
Tensor sum(const Tensor& a);
Tensor broadcast_scalar(const Tensor& s, const Shape& shape);
/// a * s for a one-element tensor s.
Tensor mul_scalar(const Tensor& a, const Tensor& s);
Tensor dot(const Tensor& a, const Tensor& b);
Tensor l2_norm(const Tensor& a);
Tensor cosine_similarity(const Tensor& a, const Tensor& b);
/// 1 - cosine similarity. Throws NumericalError when either norm is zero.
Tensor cosine_distance(const Tensor& a, const Tensor& b);

Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n]
Tensor transpose(const Tensor& a);                // [m,n] -> [n,m]
Tensor reshape(const Tensor& a, Shape shape);

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

/// x [N,C,H,W], w [O,C,kh,kw] -> [N,O,Ho,Wo]; zero padding, no bias.
Tensor conv2d(const Tensor& x, const Tensor& w, Conv2dParams p = {});
/// Adjoint of conv2d with respect to its input: g [N,O,Ho,Wo] -> [N,C,H,W].
Tensor conv2d_input_grad(const Tensor& g, const Tensor& w, const Shape& input_shape, Conv2dParams p);
/// Adjoint of conv2d with respect to its kernel: -> [O,C,kh,kw].
Tensor conv2d_weight_grad(const Tensor& x, const Tensor& g, const Shape& weight_shape, Conv2dParams p);

/// [N,C,...] -> [C] summing every axis except 1.
Tensor channel_sum(const Tensor& x);
/// [C] -> shape (axis 1 must equal C), repeating over the other axes.
Tensor channel_broadcast(const Tensor& v, const Shape& shape);
/// [N,K] -> [N]
Tensor row_sum(const Tensor& x);
/// [N] -> [N,K]
Tensor row_broadcast(const Tensor& v, std::size_t cols);
/// [N,K] -> [K]
Tensor col_sum(const Tensor& x);
/// [K] -> [N,K]
Tensor col_broadcast(const Tensor& v, std::size_t rows);

using IndexList = std::shared_ptr<const std::vector<std::size_t>>;

/// out[j] = x[index[j]] (flat indices), reshaped to out_shape.
Tensor gather(const Tensor& x, IndexList index, const Shape& out_shape);
/// Scatter-add: out[index[j]] += v[j]; out has out_shape.
Tensor scatter(const Tensor& v, IndexList index, const Shape& out_shape);

/// Max pooling without padding; gradient routes to the first maximal element
/// in row-major window order.
Tensor max_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride);
Tensor avg_pool2d(const Tensor& x, std::size_t kh, std::size_t kw, std::size_t stride);
Tensor avg_pool2d_adjoint(const Tensor& g, const Shape& input_shape, std::size_t kh, std::size_t kw,
                          std::size_t stride);
/// [N,C,H,W] -> [N,C]
Tensor global_avg_pool(const Tensor& x);

/// Row-wise softmax of [N,K].
Tensor softmax(const Tensor& z);
/// Mean over rows of -log softmax(z)[label]; shape [1].
Tensor softmax_cross_entropy(const Tensor& z, const std::vector<std::size_t>& labels);

/// 1-d slicing helpers.
Tensor slice(const Tensor& v, std::size_t offset, std::size_t length);
Tensor embed(const Tensor& v, std::size_t offset, std::size_t total);
Tensor concat(const std::vector<Tensor>& parts);

using IndexSets = std::shared_ptr<const std::vector<std::vector<std::size_t>>>;

/// out[k] = mean of v[i] over i in sets[k] (v flattened).
Tensor mean_over_index_sets(const Tensor& v, IndexSets sets);
/// Adjoint of mean_over_index_sets: out[i] = sum over k with i in sets[k] of g[k]/|sets[k]|.
Tensor spread_over_index_sets(const Tensor& g, IndexSets sets, std::size_t total);

/// x [N,I], w [O,I], b [O] -> [N,O]
Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b);

/// Eval-mode batch norm: running statistics are constants.
Tensor batchnorm2d_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                        const Tensor& running_mean, const Tensor& running_var, double eps = 1e-5);

struct BatchNormTrainResult {
  Tensor output;
  std::vector<double> batch_mean;
  std::vector<double> batch_var;  // biased (population) variance
};

/// Train-mode batch norm using batch statistics.
BatchNormTrainResult batchnorm2d_train(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                                       double eps = 1e-5);

}  // namespace psal
