#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "smsr/gemm.hpp"
#include "smsr/tensor.hpp"

namespace smsr {

/// Counts multiply-accumulate operations issued by the convolution kernels.
struct MacCounter {
  std::uint64_t macs = 0;
  void add(std::uint64_t n) { macs += n; }
};

inline int conv_out_size(int in, int kernel, int stride, int pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

/// Convolution weights plus geometry. An empty bias means no bias.
template <class T>
struct ConvSpec {
  Tensor<T> weight;  // (c_out, c_in, k_h, k_w)
  Tensor<T> bias;    // (1, c_out, 1, 1) or empty
  int stride = 1;
  int pad = 0;

  [[nodiscard]] int c_out() const { return weight.n(); }
  [[nodiscard]] int c_in() const { return weight.c(); }
  [[nodiscard]] int k_h() const { return weight.h(); }
  [[nodiscard]] int k_w() const { return weight.w(); }
  [[nodiscard]] bool has_bias() const { return !bias.empty(); }
};

namespace detail {

// Lowers one sample (channels x height x width) into a (|channels|*kh*kw, ho*wo) column matrix.
// `channels` selects input planes; empty selects all of them.
template <class T>
void im2col(const T* input, int channels_total, int height, int width, std::span<const int> channels,
            int kh, int kw, int stride, int pad, T* cols) {
  const int ho = conv_out_size(height, kh, stride, pad);
  const int wo = conv_out_size(width, kw, stride, pad);
  const int nch = channels.empty() ? channels_total : static_cast<int>(channels.size());
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  T* dst = cols;
  for (int ci = 0; ci < nch; ++ci) {
    const int c = channels.empty() ? ci : channels[ci];
    const T* src = input + c * plane;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= height) {
            std::fill_n(dst, wo, T(0));
            dst += wo;
            continue;
          }
          const T* row = src + static_cast<std::size_t>(iy) * width;
          // valid ox satisfy 0 <= ox*stride - pad + kx < width
          const int off = kx - pad;
          int lo = off < 0 ? (-off + stride - 1) / stride : 0;
          int hi = width - off <= 0 ? 0 : (width - off + stride - 1) / stride;
          lo = std::min(lo, wo);
          hi = std::clamp(hi, lo, wo);
          std::fill(dst, dst + lo, T(0));
          if (stride == 1) {
            std::copy_n(row + lo + off, hi - lo, dst + lo);
          } else {
            for (int ox = lo; ox < hi; ++ox) dst[ox] = row[ox * stride + off];
          }
          std::fill(dst + hi, dst + wo, T(0));
          dst += wo;
        }
      }
    }
  }
}

// Adjoint of im2col over all channels: accumulates columns back into the input gradient.
template <class T>
void col2im(const T* cols, int channels, int height, int width, int kh, int kw, int stride, int pad,
            T* input_grad) {
  const int ho = conv_out_size(height, kh, stride, pad);
  const int wo = conv_out_size(width, kw, stride, pad);
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  const T* src = cols;
  for (int c = 0; c < channels; ++c) {
    T* dst = input_grad + c * plane;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= height) {
            src += wo;
            continue;
          }
          T* row = dst + static_cast<std::size_t>(iy) * width;
          const int off = kx - pad;
          int lo = off < 0 ? (-off + stride - 1) / stride : 0;
          int hi = width - off <= 0 ? 0 : (width - off + stride - 1) / stride;
          lo = std::min(lo, wo);
          hi = std::clamp(hi, lo, wo);
          if (stride == 1) {
            T* r = row + off;
            for (int ox = lo; ox < hi; ++ox) r[ox] += src[ox];
          } else {
            for (int ox = lo; ox < hi; ++ox) row[ox * stride + off] += src[ox];
          }
          src += wo;
        }
      }
    }
  }
}

inline bool is_pointwise(int kh, int kw, int stride, int pad) {
  return kh == 1 && kw == 1 && stride == 1 && pad == 0;
}

}  // namespace detail

/// Dense cross-correlation with zero padding, lowered to im2col + GEMM per sample.
template <class T>
Tensor<T> conv2d_dense(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>* bias, int stride,
                       int pad, MacCounter* counter = nullptr) {
  if (input.c() != weight.c()) {
    throw ShapeError("conv2d: input " + to_string(input.shape()) + " does not match kernel " +
                     to_string(weight.shape()));
  }
  if (stride <= 0 || pad < 0) throw ShapeError("conv2d: stride must be positive and padding non-negative");
  if (bias != nullptr && !bias->empty() && bias->size() != static_cast<std::size_t>(weight.n())) {
    throw ShapeError("conv2d: bias " + to_string(bias->shape()) + " does not match kernel " +
                     to_string(weight.shape()));
  }
  const int kh = weight.h();
  const int kw = weight.w();
  const int ho = conv_out_size(input.h(), kh, stride, pad);
  const int wo = conv_out_size(input.w(), kw, stride, pad);
  if (ho < 0 || wo < 0) throw ShapeError("conv2d: kernel larger than padded input " + to_string(input.shape()));
  const int cout = weight.n();
  const int krows = weight.c() * kh * kw;
  const int npix = ho * wo;
  Tensor<T> out(input.n(), cout, ho, wo);
  const int batch = input.n();
  const std::size_t ncols = static_cast<std::size_t>(batch) * npix;
  if (detail::is_pointwise(kh, kw, stride, pad) && batch == 1) {
    gemm(false, false, cout, npix, krows, T(1), weight.data(), krows, input.data(), npix, T(0), out.data(), npix);
  } else {
    // columns for the whole batch side by side: (krows, batch*npix)
    std::vector<T> cols(static_cast<std::size_t>(krows) * ncols);
    std::vector<T> tmp(static_cast<std::size_t>(krows) * npix);
    for (int n = 0; n < batch; ++n) {
      detail::im2col<T>(input.plane(n, 0), input.c(), input.h(), input.w(), {}, kh, kw, stride, pad, tmp.data());
      for (int r = 0; r < krows; ++r) {
        std::copy_n(tmp.data() + static_cast<std::size_t>(r) * npix, npix,
                    cols.data() + r * ncols + static_cast<std::size_t>(n) * npix);
      }
    }
    std::vector<T> res(static_cast<std::size_t>(cout) * ncols);
    gemm(false, false, cout, static_cast<int>(ncols), krows, T(1), weight.data(), krows, cols.data(),
         static_cast<int>(ncols), T(0), res.data(), static_cast<int>(ncols));
    for (int n = 0; n < batch; ++n) {
      for (int o = 0; o < cout; ++o) {
        std::copy_n(res.data() + o * ncols + static_cast<std::size_t>(n) * npix, npix, out.plane(n, o));
      }
    }
  }
  if (bias != nullptr && !bias->empty()) {
    for (int n = 0; n < batch; ++n) {
      for (int o = 0; o < cout; ++o) {
        T* p = out.plane(n, o);
        const T bv = (*bias)[o];
        for (int i = 0; i < npix; ++i) p[i] += bv;
      }
    }
  }
  if (counter != nullptr) {
    counter->add(static_cast<std::uint64_t>(input.n()) * cout * krows * npix);
  }
  return out;
}

template <class T>
Tensor<T> conv2d_dense(const Tensor<T>& input, const ConvSpec<T>& spec, MacCounter* counter = nullptr) {
  return conv2d_dense(input, spec.weight, spec.has_bias() ? &spec.bias : nullptr, spec.stride, spec.pad,
                      counter);
}

/// Gradients of conv2d_dense given the output gradient. Any of the outputs may be null.
template <class T>
void conv2d_backward(const Tensor<T>& input, const Tensor<T>& weight, int stride, int pad,
                     const Tensor<T>& grad_out, Tensor<T>* grad_input, Tensor<T>* grad_weight,
                     Tensor<T>* grad_bias) {
  const int kh = weight.h();
  const int kw = weight.w();
  const int cout = weight.n();
  const int krows = weight.c() * kh * kw;
  const int npix = grad_out.h() * grad_out.w();
  const int batch = input.n();
  const std::size_t ncols = static_cast<std::size_t>(batch) * npix;
  // gather dy as (cout, batch*npix)
  std::vector<T> dy(static_cast<std::size_t>(cout) * ncols);
  for (int n = 0; n < batch; ++n) {
    for (int o = 0; o < cout; ++o) {
      std::copy_n(grad_out.plane(n, o), npix, dy.data() + o * ncols + static_cast<std::size_t>(n) * npix);
    }
  }
  std::vector<T> cols(static_cast<std::size_t>(krows) * ncols);
  std::vector<T> tmp(static_cast<std::size_t>(krows) * npix);
  if (grad_weight != nullptr) {
    for (int n = 0; n < batch; ++n) {
      detail::im2col<T>(input.plane(n, 0), input.c(), input.h(), input.w(), {}, kh, kw, stride, pad, tmp.data());
      for (int r = 0; r < krows; ++r) {
        std::copy_n(tmp.data() + static_cast<std::size_t>(r) * npix, npix,
                    cols.data() + r * ncols + static_cast<std::size_t>(n) * npix);
      }
    }
    gemm(false, true, cout, krows, static_cast<int>(ncols), T(1), dy.data(), static_cast<int>(ncols), cols.data(),
         static_cast<int>(ncols), T(1), grad_weight->data(), krows);
  }
  if (grad_input != nullptr) {
    gemm(true, false, krows, static_cast<int>(ncols), cout, T(1), weight.data(), krows, dy.data(),
         static_cast<int>(ncols), T(0), cols.data(), static_cast<int>(ncols));
    const bool pointwise = detail::is_pointwise(kh, kw, stride, pad);
    for (int n = 0; n < batch; ++n) {
      for (int r = 0; r < krows; ++r) {
        std::copy_n(cols.data() + r * ncols + static_cast<std::size_t>(n) * npix, npix,
                    tmp.data() + static_cast<std::size_t>(r) * npix);
      }
      if (pointwise) {
        T* gi = grad_input->plane(n, 0);
        for (std::size_t i = 0; i < tmp.size(); ++i) gi[i] += tmp[i];
      } else {
        detail::col2im<T>(tmp.data(), input.c(), input.h(), input.w(), kh, kw, stride, pad, grad_input->plane(n, 0));
      }
    }
  }
  if (grad_bias != nullptr) {
    for (int o = 0; o < cout; ++o) {
      const T* p = dy.data() + o * ncols;
      T s = 0;
      for (std::size_t i = 0; i < ncols; ++i) s += p[i];
      (*grad_bias)[o] += s;
    }
  }
}

}  // namespace smsr
