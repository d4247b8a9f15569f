#include "psal/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "conv_kernels.hpp"
#include "psal/error.hpp"

namespace psal {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMapMatrix = Eigen::Map<const RowMatrix>;
using MapMatrix = Eigen::Map<RowMatrix>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_rank(const Tensor& a, std::size_t rank, const char* op) {
  if (a.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(a.shape()));
  }
}

template <typename F>
std::vector<double> map_binary(const Tensor& a, const Tensor& b, F f) {
  auto x = a.data();
  auto y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i], y[i]);
  return out;
}

template <typename F>
std::vector<double> map_unary(const Tensor& a, F f) {
  auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  return out;
}

std::vector<Tensor> grads(std::size_t n) { return std::vector<Tensor>(n); }

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  return make_result(OpKind::kAdd, a.shape(), map_binary(a, b, std::plus<>()), {a, b},
                     [](const Tensor& g, const std::vector<bool>& need) {
                       auto out = grads(2);
                       if (need[0]) out[0] = g;
                       if (need[1]) out[1] = g;
                       return out;
                     });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  return make_result(OpKind::kSub, a.shape(), map_binary(a, b, std::minus<>()), {a, b},
                     [](const Tensor& g, const std::vector<bool>& need) {
                       auto out = grads(2);
                       if (need[0]) out[0] = g;
                       if (need[1]) out[1] = scale(g, -1.0);
                       return out;
                     });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  return make_result(OpKind::kMul, a.shape(), map_binary(a, b, std::multiplies<>()), {a, b},
                     [a, b](const Tensor& g, const std::vector<bool>& need) {
                       auto out = grads(2);
                       if (need[0]) out[0] = mul(g, b);
                       if (need[1]) out[1] = mul(g, a);
                       return out;
                     });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "div");
  for (double v : b.data()) {
    if (v == 0.0) throw NumericalError("div: division by zero");
  }
  return make_result(OpKind::kDiv, a.shape(), map_binary(a, b, std::divides<>()), {a, b},
                     [a, b](const Tensor& g, const std::vector<bool>& need) {
                       auto out = grads(2);
                       if (need[0]) out[0] = div(g, b);
                       if (need[1]) out[1] = scale(div(mul(g, a), mul(b, b)), -1.0);
                       return out;
                     });
}

Tensor scale(const Tensor& a, double factor) {
  return make_result(OpKind::kScale, a.shape(), map_unary(a, [factor](double v) { return v * factor; }), {a},
                     [factor](const Tensor& g, const std::vector<bool>&) {
                       return std::vector<Tensor>{scale(g, factor)};
                     });
}

Tensor abs(const Tensor& a) {
  Tensor sign(a.shape(), map_unary(a, [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }));
  return make_result(OpKind::kAbs, a.shape(), map_unary(a, [](double v) { return std::fabs(v); }), {a},
                     [sign](const Tensor& g, const std::vector<bool>&) { return std::vector<Tensor>{mul(g, sign)}; });
}

Tensor sqrt(const Tensor& a) {
  for (double v : a.data()) {
    if (v < 0.0) throw NumericalError("sqrt of negative value");
  }
  return make_result(OpKind::kSqrt, a.shape(), map_unary(a, [](double v) { return std::sqrt(v); }), {a},
                     [a](const Tensor& g, const std::vector<bool>&) {
                       return std::vector<Tensor>{div(g, scale(sqrt(a), 2.0))};
                     });
}

Tensor relu(const Tensor& a) {
  Tensor mask(a.shape(), map_unary(a, [](double v) { return v > 0.0 ? 1.0 : 0.0; }));
  if (auto* probe = ActivationPatternProbe::current()) {
    std::uint64_t word = 0;
    std::size_t bit = 0;
    for (double m : mask.data()) {
      word = (word << 1) | (m > 0.0 ? 1u : 0u);
      if (++bit == 64) {
        probe->mix(word);
        word = 0;
        bit = 0;
      }
    }
    probe->mix(word ^ (bit << 56));
  }
  return make_result(OpKind::kRelu, a.shape(), map_unary(a, [](double v) { return v > 0.0 ? v : 0.0; }), {a},
                     [mask](const Tensor& g, const std::vector<bool>&) { return std::vector<Tensor>{mul(g, mask)}; });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  Shape shape = a.shape();
  return make_result(OpKind::kSumAll, {1}, {total}, {a}, [shape](const Tensor& g, const std::vector<bool>&) {
    return std::vector<Tensor>{broadcast_scalar(g, shape)};
  });
}

Tensor broadcast_scalar(const Tensor& s, const Shape& shape) {
  if (s.numel() != 1) throw ShapeError("broadcast_scalar: input must have one element");
  return make_result(OpKind::kBroadcastScalar, shape, std::vector<double>(shape_numel(shape), s.item()), {s},
                     [](const Tensor& g, const std::vector<bool>&) { return std::vector<Tensor>{sum(g)}; });
}

Tensor mul_scalar(const Tensor& a, const Tensor& s) { return mul(a, broadcast_scalar(s, a.shape())); }

Tensor dot(const Tensor& a, const Tensor& b) { return sum(mul(a, b)); }

Tensor l2_norm(const Tensor& a) { return sqrt(dot(a, a)); }

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "cosine_similarity");
  Tensor na = l2_norm(a);
  Tensor nb = l2_norm(b);
  if (na.item() == 0.0 || nb.item() == 0.0) throw NumericalError("cosine similarity of a zero-norm vector");
  return div(dot(a, b), mul(na, nb));
}

Tensor cosine_distance(const Tensor& a, const Tensor& b) { return sub(Tensor::scalar(1.0), cosine_similarity(a, b)); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<double> out(m * n);
  MapMatrix(out.data(), m, n).noalias() = ConstMapMatrix(a.data().data(), m, k) * ConstMapMatrix(b.data().data(), k, n);
  return make_result(OpKind::kMatmul, {m, n}, std::move(out), {a, b},
                     [a, b](const Tensor& g, const std::vector<bool>& need) {
                       auto out = grads(2);
                       if (need[0]) out[0] = matmul(g, transpose(b));
                       if (need[1]) out[1] = matmul(transpose(a), g);
                       return out;
                     });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  auto x = a.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
  }
  return make_result(OpKind::kTranspose, {n, m}, std::move(out), {a},
                     [](const Tensor& g, const std::vector<bool>&) { return std::vector<Tensor>{transpose(g)}; });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: " + shape_str(a.shape()) + " cannot become " + shape_str(shape));
  }
  Shape original = a.shape();
  std::vector<double> values(a.data().begin(), a.data().end());
  return make_result(OpKind::kReshape, std::move(shape), std::move(values), {a},
                     [original](const Tensor& g, const std::vector<bool>&) {
                       return std::vector<Tensor>{reshape(g, original)};
                     });
}

namespace {

detail::ConvDims conv_dims_for(const Shape& x, const Shape& w, Conv2dParams p) {
  if (x.size() != 4 || w.size() != 4) throw ShapeError("conv2d expects 4-d input and kernel");
  if (x[1] != w[1]) {
    throw ShapeError("conv2d: input channels " + std::to_string(x[1]) + " vs kernel " + shape_str(w));
  }
  return detail::make_conv_dims(x[0], x[1], x[2], x[3], w[0], w[2], w[3], p.stride, p.pad);
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, Conv2dParams p) {
  const auto d = conv_dims_for(x.shape(), w.shape(), p);
  std::vector<double> out(d.n * d.o * d.ho * d.wo);
  detail::conv_forward(d, x.data().data(), w.data().data(), out.data());
  Shape xs = x.shape(), ws = w.shape();
  return make_result(OpKind::kConv2d, {d.n, d.o, d.ho, d.wo}, std::move(out), {x, w},
                     [x, w, xs, ws, p](const Tensor& g, const std::vector<bool>& need) {
                       auto out = grads(2);
                       if (need[0]) out[0] = conv2d_input_grad(g, w, xs, p);
                       if (need[1]) out[1] = conv2d_weight_grad(x, g, ws, p);
                       return out;
                     });
}

Tensor conv2d_input_grad(const Tensor& g, const Tensor& w, const Shape& input_shape, Conv2dParams p) {
  const auto d = conv_dims_for(input_shape, w.shape(), p);
  if (g.shape() != Shape{d.n, d.o, d.ho, d.wo}) throw ShapeError("conv2d_input_grad: gradient shape mismatch");
  std::vector<double> out(shape_numel(input_shape));
  detail::conv_input_grad(d, g.data().data(), w.data().data(), out.data());
  Shape ws = w.shape();
  return make_result(OpKind::kConv2dInputGrad, input_shape, std::move(out), {g, w},
                     [g, w, ws, p](const Tensor& gx, const std::vector<bool>& need) {
                       auto out = grads(2);
                       if (need[0]) out[0] = conv2d(gx, w, p);
                       if (need[1]) out[1] = conv2d_weight_grad(gx, g, ws, p);
                       return out;
                     });
}

Tensor conv2d_weight_grad(const Tensor& x, const Tensor& g, const Shape& weight_shape, Conv2dParams p) {
  const auto d = conv_dims_for(x.shape(), weight_shape, p);
  if (g.shape() != Shape{d.n, d.o, d.ho, d.wo}) throw ShapeError("conv2d_weight_grad: gradient shape mismatch");
  std::vector<double> out(shape_numel(weight_shape));
  detail::conv_weight_grad(d, x.data().data(), g.data().data(), out.data());
  Shape xs = x.shape();
  return make_result(OpKind::kConv2dWeightGrad, weight_shape, std::move(out), {x, g},
                     [x, g, xs, p](const Tensor& gw, const std::vector<bool>& need) {
                       auto out = grads(2);
                       if (need[0]) out[0] = conv2d_input_grad(g, gw, xs, p);
                       if (need[1]) out[1] = conv2d(x, gw, p);
                       return out;
                     });
}

namespace {

// Splits a [N,C,...] shape into (outer=N, channels=C, inner=prod(rest)).
struct ChannelLayout {
  std::size_t outer, channels, inner;
};

ChannelLayout channel_layout(const Shape& shape) {
  if (shape.size() < 2) throw ShapeError("channel op needs rank >= 2, got " + shape_str(shape));
  std::size_t inner = 1;
  for (std::size_t i = 2; i < shape.size(); ++i) inner *= shape[i];
  return {shape[0], shape[1], inner};
}

}  // namespace

Tensor channel_sum(const Tensor& x) {
  const auto l = channel_layout(x.shape());
  std::vector<double> out(l.channels, 0.0);
  auto v = x.data();
  for (std::size_t n = 0; n < l.outer; ++n) {
    for (std::size_t c = 0; c < l.channels; ++c) {
      const double* p = v.data() + (n * l.channels + c) * l.inner;
      double acc = 0.0;
      for (std::size_t i = 0; i < l.inner; ++i) acc += p[i];
      out[c] += acc;
    }
  }
  Shape shape = x.shape();
  return make_result(OpKind::kChannelSum, {l.channels}, std::move(out), {x},
                     [shape](const Tensor& g, const std::vector<bool>&) {
                       return std::vector<Tensor>{channel_broadcast(g, shape)};
                     });
}

Tensor channel_broadcast(const Tensor& v, const Shape& shape) {
  const auto l = channel_layout(shape);
  if (v.rank() != 1 || v.dim(0) != l.channels) throw ShapeError("channel_broadcast: vector length mismatch");
  std::vector<double> out(shape_numel(shape));
  auto s = v.data();
  for (std::size_t n = 0; n < l.outer; ++n) {
    for (std::size_t c = 0; c < l.channels; ++c) {
      double* p = out.data() + (n * l.channels + c) * l.inner;
      std::fill(p, p + l.inner, s[c]);
    }
  }
  return make_result(OpKind::kChannelBroadcast, shape, std::move(out), {v},
                     [](const Tensor& g, const std::vector<bool>&) { return std::vector<Tensor>{channel_sum(g)}; });
}

Tensor row_sum(const Tensor& x) {
  require_rank(x, 2, "row_sum");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  std::vector<double> out(rows, 0.0);
  auto v = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r] += v[r * cols + c];
  }
  return make_result(OpKind::kRowSum, {rows}, std::move(out), {x}, [cols](const Tensor& g, const std::vector<bool>&) {
    return std::vector<Tensor>{row_broadcast(g, cols)};
  });
}

Tensor row_broadcast(const Tensor& v, std::size_t cols) {
  require_rank(v, 1, "row_broadcast");
  const std::size_t rows = v.dim(0);
  std::vector<double> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) std::fill_n(out.begin() + r * cols, cols, v.at(r));
  return make_result(OpKind::kRowBroadcast, {rows, cols}, std::move(out), {v},
                     [](const Tensor& g, const std::vector<bool>&) { return std::vector<Tensor>{row_sum(g)}; });
}

Tensor col_sum(const Tensor& x) {
  require_rank(x, 2, "col_sum");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  std::vector<double> out(cols, 0.0);
  auto v = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[c] += v[r * cols + c];
  }
  return make_result(OpKind::kColSum, {cols}, std::move(out), {x}, [rows](const Tensor& g, const std::vector<bool>&) {
    return std::vector<Tensor>{col_broadcast(g, rows)};
  });
}

Tensor col_broadcast(const Tensor& v, std::size_t rows) {
  require_rank(v, 1, "col_broadcast");
  const std::size_t cols = v.dim(0);
  std::vector<double> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) std::copy(v.data().begin(), v.data().end(), out.begin() + r * cols);
  return make_result(OpKind::kColBroadcast, {rows, cols}, std::move(out), {v},
                     [](const Tensor& g, const std::vector<bool>&) { return std::vector<Tensor>{col_sum(g)}; });
}

Tensor gather(const Tensor& x, IndexList index, const Shape& out_shape) {
  if (index->size() != shape_numel(out_shape)) throw ShapeError("gather: index count does not match output shape");
  std::vector<double> out(index->size());
  auto v = x.data();
  for (std::size_t j = 0; j < out.size(); ++j) {
    const auto i = (*index)[j];
    if (i >= v.size()) throw ShapeError("gather: index out of range");
    out[j] = v[i];
  }
  Shape in_shape = x.shape();
  return make_result(OpKind::kGather, out_shape, std::move(out), {x},
                     [index, in_shape](const Tensor& g, const std::vector<bool>&) {
                       return std::vector<Tensor>{scatter(g, index, in_shape)};
                     });
}

Tensor scatter(const Tensor& v, IndexList index, const Shape& out_shape) {
  if (index->size() != v.numel()) throw ShapeError("scatter: index count does not match input");
  std::vector<double> out(shape_numel(out_shape), 0.0);
  auto s = v.data();
  for (std::size_t j = 0; j < s.size(); ++j) {
    const auto i = (*index)[j];
    if (i >= out.size()) throw ShapeError("scatter: index out of range");
    out[i] += s[j];
  }
  Shape in_shape = v.shape();
  return make_result(OpKind::kScatter, out_shape, std::move(out), {v},
                     [index, in_shape](const Tensor& g, const std::vector<bool>&) {
                       return std::vector<Tensor>{gather(g, index, in_shape)};
                     });
}

Tensor max_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride) {
  require_rank(x, 4, "max_pool2d");
  if (kernel == 0 || stride == 0) throw ShapeError("max_pool2d: kernel and stride must be positive");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h < kernel || w < kernel) throw ShapeError("max_pool2d: kernel larger than input");
  const std::size_t ho = (h - kernel) / stride + 1, wo = (w - kernel) / stride + 1;
  auto index = std::make_shared<std::vector<std::size_t>>(n * c * ho * wo);
  auto v = x.data();
  std::size_t j = 0;
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t base = plane * h * w;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        std::size_t best = base + oy * stride * w + ox * stride;
        for (std::size_t i = 0; i < kernel; ++i) {
          for (std::size_t k = 0; k < kernel; ++k) {
            const std::size_t at = base + (oy * stride + i) * w + ox * stride + k;
            if (v[at] > v[best]) best = at;  // strict: ties keep the lowest index
          }
        }
        (*index)[j++] = best;
      }
    }
  }
  if (auto* probe = ActivationPatternProbe::current()) {
    for (auto i : *index) probe->mix(i);
  }
  return gather(x, index, {n, c, ho, wo});
}

Tensor avg_pool2d(const Tensor& x, std::size_t kh, std::size_t kw, std::size_t stride) {
  require_rank(x, 4, "avg_pool2d");
  if (kh == 0 || kw == 0 || stride == 0) throw ShapeError("avg_pool2d: kernel and stride must be positive");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h < kh || w < kw) throw ShapeError("avg_pool2d: kernel larger than input");
  const std::size_t ho = (h - kh) / stride + 1, wo = (w - kw) / stride + 1;
  const double inv = 1.0 / static_cast<double>(kh * kw);
  std::vector<double> out(n * c * ho * wo);
  auto v = x.data();
  std::size_t j = 0;
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const double* p = v.data() + plane * h * w;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        double acc = 0.0;
        for (std::size_t i = 0; i < kh; ++i) {
          for (std::size_t k = 0; k < kw; ++k) acc += p[(oy * stride + i) * w + ox * stride + k];
        }
        out[j++] = acc * inv;
      }
    }
  }
  Shape in_shape = x.shape();
  return make_result(OpKind::kAvgPool2d, {n, c, ho, wo}, std::move(out), {x},
                     [in_shape, kh, kw, stride](const Tensor& g, const std::vector<bool>&) {
                       return std::vector<Tensor>{avg_pool2d_adjoint(g, in_shape, kh, kw, stride)};
                     });
}

Tensor avg_pool2d_adjoint(const Tensor& g, const Shape& input_shape, std::size_t kh, std::size_t kw,
                          std::size_t stride) {
  if (input_shape.size() != 4) throw ShapeError("avg_pool2d_adjoint: input shape must be 4-d");
  const std::size_t n = input_shape[0], c = input_shape[1], h = input_shape[2], w = input_shape[3];
  const std::size_t ho = (h - kh) / stride + 1, wo = (w - kw) / stride + 1;
  if (g.shape() != Shape{n, c, ho, wo}) throw ShapeError("avg_pool2d_adjoint: gradient shape mismatch");
  const double inv = 1.0 / static_cast<double>(kh * kw);
  std::vector<double> out(n * c * h * w, 0.0);
  auto v = g.data();
  std::size_t j = 0;
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    double* p = out.data() + plane * h * w;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const double share = v[j++] * inv;
        for (std::size_t i = 0; i < kh; ++i) {
          for (std::size_t k = 0; k < kw; ++k) p[(oy * stride + i) * w + ox * stride + k] += share;
        }
      }
    }
  }
  return make_result(OpKind::kAvgPool2dAdjoint, input_shape, std::move(out), {g},
                     [kh, kw, stride](const Tensor& gg, const std::vector<bool>&) {
                       return std::vector<Tensor>{avg_pool2d(gg, kh, kw, stride)};
                     });
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 4, "global_avg_pool");
  const std::size_t n = x.dim(0), c = x.dim(1);
  return reshape(avg_pool2d(x, x.dim(2), x.dim(3), 1), {n, c});
}

Tensor softmax(const Tensor& z) {
  require_rank(z, 2, "softmax");
  const std::size_t rows = z.dim(0), cols = z.dim(1);
  std::vector<double> out(rows * cols);
  auto v = z.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = v.data() + r * cols;
    double* o = out.data() + r * cols;
    const double top = *std::max_element(in, in + cols);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) total += (o[c] = std::exp(in[c] - top));
    for (std::size_t c = 0; c < cols; ++c) o[c] /= total;
  }
  return make_result(OpKind::kSoftmax, z.shape(), std::move(out), {z},
                     [z, cols](const Tensor& g, const std::vector<bool>&) {
                       Tensor s = softmax(z);
                       Tensor sg = mul(s, g);
                       return std::vector<Tensor>{sub(sg, mul(s, row_broadcast(row_sum(sg), cols)))};
                     });
}

Tensor softmax_cross_entropy(const Tensor& z, const std::vector<std::size_t>& labels) {
  require_rank(z, 2, "softmax_cross_entropy");
  const std::size_t rows = z.dim(0), cols = z.dim(1);
  if (labels.size() != rows) throw ShapeError("softmax_cross_entropy: label count does not match batch");
  std::vector<double> onehot(rows * cols, 0.0);
  double loss = 0.0;
  auto v = z.data();
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] >= cols) throw ShapeError("softmax_cross_entropy: label out of range");
    const double* in = v.data() + r * cols;
    const double top = *std::max_element(in, in + cols);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) total += std::exp(in[c] - top);
    loss += top + std::log(total) - in[labels[r]];
    onehot[r * cols + labels[r]] = 1.0;
  }
  Tensor target(z.shape(), std::move(onehot));
  const double inv_rows = 1.0 / static_cast<double>(rows);
  return make_result(OpKind::kSoftmaxCrossEntropy, {1}, {loss * inv_rows}, {z},
                     [z, target, inv_rows](const Tensor& g, const std::vector<bool>&) {
                       Tensor diff = sub(softmax(z), target);
                       return std::vector<Tensor>{mul_scalar(diff, scale(g, inv_rows))};
                     });
}

Tensor slice(const Tensor& v, std::size_t offset, std::size_t length) {
  require_rank(v, 1, "slice");
  if (length == 0 || offset + length > v.numel()) throw ShapeError("slice out of range");
  std::vector<double> out(v.data().begin() + offset, v.data().begin() + offset + length);
  const std::size_t total = v.numel();
  return make_result(OpKind::kSlice, {length}, std::move(out), {v},
                     [offset, total](const Tensor& g, const std::vector<bool>&) {
                       return std::vector<Tensor>{embed(g, offset, total)};
                     });
}

Tensor embed(const Tensor& v, std::size_t offset, std::size_t total) {
  require_rank(v, 1, "embed");
  if (offset + v.numel() > total) throw ShapeError("embed out of range");
  std::vector<double> out(total, 0.0);
  std::copy(v.data().begin(), v.data().end(), out.begin() + offset);
  const std::size_t length = v.numel();
  return make_result(OpKind::kEmbed, {total}, std::move(out), {v},
                     [offset, length](const Tensor& g, const std::vector<bool>&) {
                       return std::vector<Tensor>{slice(g, offset, length)};
                     });
}

Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  std::vector<double> out;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    require_rank(p, 1, "concat");
    offsets.push_back(out.size());
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  const std::size_t total = out.size();
  return make_result(OpKind::kConcat, {total}, std::move(out), parts,
                     [offsets, parts](const Tensor& g, const std::vector<bool>& need) {
                       std::vector<Tensor> out(parts.size());
                       for (std::size_t i = 0; i < parts.size(); ++i) {
                         if (need[i]) out[i] = slice(g, offsets[i], parts[i].numel());
                       }
                       return out;
                     });
}

Tensor mean_over_index_sets(const Tensor& v, IndexSets sets) {
  std::vector<double> out(sets->size());
  auto x = v.data();
  for (std::size_t k = 0; k < sets->size(); ++k) {
    const auto& set = (*sets)[k];
    if (set.empty()) throw ShapeError("mean_over_index_sets: empty index set");
    double acc = 0.0;
    for (auto i : set) {
      if (i >= x.size()) throw ShapeError("mean_over_index_sets: index out of range");
      acc += x[i];
    }
    out[k] = acc / static_cast<double>(set.size());
  }
  const std::size_t total = v.numel();
  Shape in_shape = v.shape();
  return make_result(OpKind::kGroupMean, {sets->size()}, std::move(out), {v},
                     [sets, total, in_shape](const Tensor& g, const std::vector<bool>&) {
                       return std::vector<Tensor>{reshape(spread_over_index_sets(g, sets, total), in_shape)};
                     });
}

Tensor spread_over_index_sets(const Tensor& g, IndexSets sets, std::size_t total) {
  if (g.numel() != sets->size()) throw ShapeError("spread_over_index_sets: gradient length mismatch");
  std::vector<double> out(total, 0.0);
  auto s = g.data();
  for (std::size_t k = 0; k < sets->size(); ++k) {
    const auto& set = (*sets)[k];
    const double share = s[k] / static_cast<double>(set.size());
    for (auto i : set) out.at(i) += share;
  }
  return make_result(OpKind::kGroupSpread, {total}, std::move(out), {g},
                     [sets](const Tensor& gg, const std::vector<bool>&) {
                       return std::vector<Tensor>{mean_over_index_sets(gg, sets)};
                     });
}

Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_rank(x, 2, "dense");
  require_rank(w, 2, "dense");
  if (b.rank() != 1 || b.dim(0) != w.dim(0)) throw ShapeError("dense: bias length mismatch");
  return add(matmul(x, transpose(w)), col_broadcast(b, x.dim(0)));
}

Tensor batchnorm2d_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta, const Tensor& running_mean,
                        const Tensor& running_var, double eps) {
  require_rank(x, 4, "batchnorm2d");
  const std::size_t c = x.dim(1);
  for (const auto* t : {&gamma, &beta, &running_mean, &running_var}) {
    if (t->rank() != 1 || t->dim(0) != c) throw ShapeError("batchnorm2d: parameter length mismatch");
  }
  std::vector<double> inv_std(c), mean(c);
  for (std::size_t i = 0; i < c; ++i) {
    inv_std[i] = 1.0 / std::sqrt(running_var.at(i) + eps);
    mean[i] = running_mean.at(i);
  }
  Tensor inv_std_t({c}, std::move(inv_std));
  Tensor mean_t({c}, std::move(mean));
  Tensor a = mul(gamma, inv_std_t);
  Tensor shift = sub(beta, mul(mean_t, a));
  return add(mul(x, channel_broadcast(a, x.shape())), channel_broadcast(shift, x.shape()));
}

BatchNormTrainResult batchnorm2d_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_rank(x, 4, "batchnorm2d");
  const std::size_t c = x.dim(1);
  const double count = static_cast<double>(x.numel() / c);
  Tensor mean = scale(channel_sum(x), 1.0 / count);
  Tensor centered = sub(x, channel_broadcast(mean, x.shape()));
  Tensor var = scale(channel_sum(mul(centered, centered)), 1.0 / count);
  Tensor std_dev = sqrt(add(var, Tensor::full({c}, eps)));
  Tensor a = div(gamma, std_dev);
  Tensor y = add(mul(centered, channel_broadcast(a, x.shape())), channel_broadcast(beta, x.shape()));
  BatchNormTrainResult result;
  result.output = y;
  result.batch_mean.assign(mean.data().begin(), mean.data().end());
  result.batch_var.assign(var.data().begin(), var.data().end());
  return result;
}

}  // namespace psal
