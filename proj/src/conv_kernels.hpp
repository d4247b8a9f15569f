#pragma once

#include <cstddef>

namespace psal::detail {

struct ConvDims {
  std::size_t n, c, h, w;   // input
  std::size_t o, kh, kw;    // kernel
  std::size_t stride, pad;
  std::size_t ho, wo;       // output

  std::size_t patch() const { return c * kh * kw; }
  std::size_t positions() const { return ho * wo; }
};

ConvDims make_conv_dims(std::size_t n, std::size_t c, std::size_t h, std::size_t w, std::size_t o,
                        std::size_t kh, std::size_t kw, std::size_t stride, std::size_t pad);

void conv_forward(const ConvDims& d, const double* x, const double* w, double* y);
void conv_input_grad(const ConvDims& d, const double* g, const double* w, double* dx);
void conv_weight_grad(const ConvDims& d, const double* x, const double* g, double* dw);

}  // namespace psal::detail
