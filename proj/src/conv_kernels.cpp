#include "conv_kernels.hpp"

#include <Eigen/Core>
#include <vector>

#include "psal/error.hpp"

namespace psal::detail {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMatrix = Eigen::Map<RowMatrix>;
using ConstMapMatrix = Eigen::Map<const RowMatrix>;

// col is [c*kh*kw, ho*wo] for a single sample.
void im2col(const ConvDims& d, const double* x, double* col) {
  const std::size_t positions = d.positions();
  for (std::size_t c = 0; c < d.c; ++c) {
    for (std::size_t i = 0; i < d.kh; ++i) {
      for (std::size_t j = 0; j < d.kw; ++j) {
        double* row = col + ((c * d.kh + i) * d.kw + j) * positions;
        for (std::size_t oy = 0; oy < d.ho; ++oy) {
          const long iy = static_cast<long>(oy * d.stride + i) - static_cast<long>(d.pad);
          double* out = row + oy * d.wo;
          if (iy < 0 || iy >= static_cast<long>(d.h)) {
            std::fill(out, out + d.wo, 0.0);
            continue;
          }
          const double* src = x + (c * d.h + static_cast<std::size_t>(iy)) * d.w;
          for (std::size_t ox = 0; ox < d.wo; ++ox) {
            const long ix = static_cast<long>(ox * d.stride + j) - static_cast<long>(d.pad);
            out[ox] = (ix < 0 || ix >= static_cast<long>(d.w)) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

void col2im_add(const ConvDims& d, const double* col, double* x) {
  const std::size_t positions = d.positions();
  for (std::size_t c = 0; c < d.c; ++c) {
    for (std::size_t i = 0; i < d.kh; ++i) {
      for (std::size_t j = 0; j < d.kw; ++j) {
        const double* row = col + ((c * d.kh + i) * d.kw + j) * positions;
        for (std::size_t oy = 0; oy < d.ho; ++oy) {
          const long iy = static_cast<long>(oy * d.stride + i) - static_cast<long>(d.pad);
          if (iy < 0 || iy >= static_cast<long>(d.h)) continue;
          double* dst = x + (c * d.h + static_cast<std::size_t>(iy)) * d.w;
          const double* in = row + oy * d.wo;
          for (std::size_t ox = 0; ox < d.wo; ++ox) {
            const long ix = static_cast<long>(ox * d.stride + j) - static_cast<long>(d.pad);
            if (ix >= 0 && ix < static_cast<long>(d.w)) dst[ix] += in[ox];
          }
        }
      }
    }
  }
}

}  // namespace

ConvDims make_conv_dims(std::size_t n, std::size_t c, std::size_t h, std::size_t w, std::size_t o,
                        std::size_t kh, std::size_t kw, std::size_t stride, std::size_t pad) {
  if (stride == 0) throw ShapeError("conv2d stride must be positive");
  if (h + 2 * pad < kh || w + 2 * pad < kw) throw ShapeError("conv2d kernel larger than padded input");
  ConvDims d{n, c, h, w, o, kh, kw, stride, pad, 0, 0};
  d.ho = (h + 2 * pad - kh) / stride + 1;
  d.wo = (w + 2 * pad - kw) / stride + 1;
  return d;
}

void conv_forward(const ConvDims& d, const double* x, const double* w, double* y) {
  std::vector<double> col(d.patch() * d.positions());
  ConstMapMatrix wm(w, d.o, d.patch());
  for (std::size_t n = 0; n < d.n; ++n) {
    im2col(d, x + n * d.c * d.h * d.w, col.data());
    ConstMapMatrix cm(col.data(), d.patch(), d.positions());
    MapMatrix ym(y + n * d.o * d.positions(), d.o, d.positions());
    ym.noalias() = wm * cm;
  }
}

void conv_input_grad(const ConvDims& d, const double* g, const double* w, double* dx) {
  std::vector<double> col(d.patch() * d.positions());
  ConstMapMatrix wm(w, d.o, d.patch());
  std::fill(dx, dx + d.n * d.c * d.h * d.w, 0.0);
  for (std::size_t n = 0; n < d.n; ++n) {
    ConstMapMatrix gm(g + n * d.o * d.positions(), d.o, d.positions());
    MapMatrix cm(col.data(), d.patch(), d.positions());
    cm.noalias() = wm.transpose() * gm;
    col2im_add(d, col.data(), dx + n * d.c * d.h * d.w);
  }
}

void conv_weight_grad(const ConvDims& d, const double* x, const double* g, double* dw) {
  std::vector<double> col(d.patch() * d.positions());
  MapMatrix wm(dw, d.o, d.patch());
  wm.setZero();
  for (std::size_t n = 0; n < d.n; ++n) {
    im2col(d, x + n * d.c * d.h * d.w, col.data());
    ConstMapMatrix cm(col.data(), d.patch(), d.positions());
    ConstMapMatrix gm(g + n * d.o * d.positions(), d.o, d.positions());
    wm.noalias() += gm * cm.transpose();
  }
}

}  // namespace psal::detail
