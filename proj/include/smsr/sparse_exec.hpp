#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "smsr/autodiff.hpp"
#include "smsr/conv.hpp"
#include "smsr/gemm.hpp"
#include "smsr/masks.hpp"
#include "smsr/tensor.hpp"

namespace smsr {

namespace ad {

/// Training-time sparse mask convolution. The shared-weight convolution runs densely on the
/// dense part F*m_in and the sparse part F*(1-m_in), and the results are gated:
///
///   out = A*m_out + A*(1-m_out)*m_spa + B*m_out*m_spa + B*(1-m_out)*m_spa
///       = A*(m_out + (1-m_out)*m_spa) + B*m_spa
///
/// with A = conv(F*m_in) + bias and B = conv(F*(1-m_in)). The bias is counted once, on the
/// dense-input branch. A null `m_in` means every input channel is dense (B vanishes).
template <class T>
Var<T> masked_conv_train(const Var<T>& feature, const Var<T>& weight, const Var<T>* bias, const Var<T>* m_in,
                         const Var<T>& m_out, const Var<T>& m_spa, MacCounter* counter = nullptr) {
  const Shape& fs = feature.shape();
  const int cout = weight.shape().n;
  if (m_in != nullptr && m_in->shape() != Shape{1, fs.c, 1, 1}) {
    throw ShapeError("masked_conv_train: input channel mask " + to_string(m_in->shape()) + " does not match feature " +
                     to_string(fs));
  }
  if (m_out.shape() != Shape{1, cout, 1, 1}) {
    throw ShapeError("masked_conv_train: output channel mask " + to_string(m_out.shape()) + " does not match kernel " +
                     to_string(weight.shape()));
  }
  if (m_spa.shape() != Shape{fs.n, 1, fs.h, fs.w}) {
    throw ShapeError("masked_conv_train: spatial mask " + to_string(m_spa.shape()) + " does not match feature " +
                     to_string(fs));
  }
  const int pad = weight.shape().h / 2;
  auto gate = add(m_out, mul(affine(m_out, T(-1), T(1)), m_spa));
  if (m_in == nullptr) {
    return mul(conv2d(feature, weight, bias, 1, pad, counter), gate);
  }
  auto dense_part = mul(feature, *m_in);
  auto sparse_part = mul(feature, affine(*m_in, T(-1), T(1)));
  auto a = conv2d(dense_part, weight, bias, 1, pad, counter);
  auto b = conv2d(sparse_part, weight, static_cast<const Var<T>*>(nullptr), 1, pad, counter);
  return add(mul(a, gate), mul(b, m_spa));
}

}  // namespace ad

/// Tape-free evaluation of the training formulation.
template <class T>
Tensor<T> masked_conv_train(const Tensor<T>& feature, const ConvSpec<T>& spec, const ChannelMask<T>& m_in,
                            const ChannelMask<T>& m_out, const SpatialMask<T>& m_spa) {
  Tape<T> tape;
  auto w = tape.constant(spec.weight);
  auto b = tape.constant(spec.has_bias() ? spec.bias : Tensor<T>());
  auto mi = tape.constant(m_in.values);
  return ad::masked_conv_train(tape.constant(feature), w, spec.has_bias() ? &b : nullptr, &mi,
                               tape.constant(m_out.values), tape.constant(m_spa.values))
      .value();
}

/// A kernel partitioned by input/output channel masks into dense->dense, dense->sparse,
/// sparse->dense and sparse->sparse sub-kernels, each (|out|, |in|, k, k).
template <class T>
struct KernelSplit {
  std::vector<int> dense_in, sparse_in, dense_out, sparse_out;
  Tensor<T> w_dd, w_ds, w_sd, w_ss;
  std::vector<T> bias_dense, bias_sparse;  // empty when the kernel has no bias
  int c_in = 0;
  int c_out = 0;
  int k = 0;
};

namespace detail {

template <class T>
std::vector<int> channels_where(const ChannelMask<T>& m, T value) {
  std::vector<int> out;
  for (int c = 0; c < m.channels(); ++c)
    if (m.values[c] == value) out.push_back(c);
  return out;
}

template <class T>
Tensor<T> gather_kernel(const Tensor<T>& w, std::span<const int> outs, std::span<const int> ins) {
  Tensor<T> sub(static_cast<int>(outs.size()), static_cast<int>(ins.size()), w.h(), w.w());
  const std::size_t kk = static_cast<std::size_t>(w.h()) * w.w();
  for (std::size_t o = 0; o < outs.size(); ++o)
    for (std::size_t i = 0; i < ins.size(); ++i)
      std::copy_n(w.plane(outs[o], ins[i]), kk, sub.plane(static_cast<int>(o), static_cast<int>(i)));
  return sub;
}

template <class T>
void scatter_kernel(const Tensor<T>& sub, std::span<const int> outs, std::span<const int> ins, Tensor<T>& w) {
  const std::size_t kk = static_cast<std::size_t>(w.h()) * w.w();
  for (std::size_t o = 0; o < outs.size(); ++o)
    for (std::size_t i = 0; i < ins.size(); ++i)
      std::copy_n(sub.plane(static_cast<int>(o), static_cast<int>(i)), kk, w.plane(outs[o], ins[i]));
}

}  // namespace detail

template <class T>
KernelSplit<T> split_kernel(const ConvSpec<T>& spec, const ChannelMask<T>& m_in, const ChannelMask<T>& m_out) {
  if (!is_binary(m_in.values) || !is_binary(m_out.values)) {
    throw std::invalid_argument("split_kernel: channel masks must be binary");
  }
  if (m_in.channels() != spec.c_in() || m_out.channels() != spec.c_out()) {
    throw ShapeError("split_kernel: masks (" + std::to_string(m_in.channels()) + ", " +
                     std::to_string(m_out.channels()) + ") do not match kernel " + to_string(spec.weight.shape()));
  }
  if (spec.k_h() != spec.k_w() || spec.k_h() % 2 == 0 || spec.stride != 1 || spec.pad != spec.k_h() / 2) {
    throw ShapeError("split_kernel: only odd square kernels with stride 1 and same padding are supported");
  }
  KernelSplit<T> s;
  s.dense_in = detail::channels_where(m_in, T(1));
  s.sparse_in = detail::channels_where(m_in, T(0));
  s.dense_out = detail::channels_where(m_out, T(1));
  s.sparse_out = detail::channels_where(m_out, T(0));
  s.w_dd = detail::gather_kernel<T>(spec.weight, s.dense_out, s.dense_in);
  s.w_ds = detail::gather_kernel<T>(spec.weight, s.sparse_out, s.dense_in);
  s.w_sd = detail::gather_kernel<T>(spec.weight, s.dense_out, s.sparse_in);
  s.w_ss = detail::gather_kernel<T>(spec.weight, s.sparse_out, s.sparse_in);
  if (spec.has_bias()) {
    for (int o : s.dense_out) s.bias_dense.push_back(spec.bias[o]);
    for (int o : s.sparse_out) s.bias_sparse.push_back(spec.bias[o]);
  }
  s.c_in = spec.c_in();
  s.c_out = spec.c_out();
  s.k = spec.k_h();
  return s;
}

/// Inverse of split_kernel for the weights.
template <class T>
Tensor<T> reassemble_kernel(const KernelSplit<T>& s) {
  Tensor<T> w(s.c_out, s.c_in, s.k, s.k);
  detail::scatter_kernel<T>(s.w_dd, s.dense_out, s.dense_in, w);
  detail::scatter_kernel<T>(s.w_ds, s.sparse_out, s.dense_in, w);
  detail::scatter_kernel<T>(s.w_sd, s.dense_out, s.sparse_in, w);
  detail::scatter_kernel<T>(s.w_ss, s.sparse_out, s.sparse_in, w);
  return w;
}

/// Row-major linear positions of the important pixels of one binary spatial mask plane.
struct ImportantIndexList {
  int height = 0;
  int width = 0;
  std::vector<int> positions;

  [[nodiscard]] std::size_t count() const { return positions.size(); }

  template <class T>
  static ImportantIndexList compile(const Tensor<T>& mask, int sample = 0) {
    if (mask.c() != 1) throw ShapeError("spatial mask must have one channel, got " + to_string(mask.shape()));
    ImportantIndexList idx{mask.h(), mask.w(), {}};
    const T* p = mask.plane(sample, 0);
    for (int i = 0; i < mask.h() * mask.w(); ++i) {
      if (p[i] != T(0) && p[i] != T(1)) throw std::invalid_argument("spatial mask must be binary");
      if (p[i] == T(1)) idx.positions.push_back(i);
    }
    return idx;
  }

  static ImportantIndexList all(int h, int w) {
    ImportantIndexList idx{h, w, std::vector<int>(static_cast<std::size_t>(h) * w)};
    for (int i = 0; i < h * w; ++i) idx.positions[i] = i;
    return idx;
  }
};

namespace detail {

// Column matrix (|channels| * k * k, |idx|) holding zero-padded k x k patches around each
// important pixel of one sample.
template <class T>
void gather_im2col(const T* sample, int height, int width, std::span<const int> channels, int k,
                   const ImportantIndexList& idx, T* cols) {
  const int pad = k / 2;
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  const std::size_t npos = idx.count();
  T* dst = cols;
  for (int c : channels) {
    const T* src = sample + c * plane;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const int dy = ky - pad;
        const int dx = kx - pad;
        for (std::size_t p = 0; p < npos; ++p) {
          const int pos = idx.positions[p];
          const int iy = pos / width + dy;
          const int ix = pos % width + dx;
          dst[p] = (iy >= 0 && iy < height && ix >= 0 && ix < width) ? src[iy * width + ix] : T(0);
        }
        dst += npos;
      }
    }
  }
}

}  // namespace detail

/// Convolution evaluated only at important pixels via gathered im2col and one GEMM.
/// Returns a compact (1, c_out, 1, |idx|) result, column p belonging to idx.positions[p].
template <class T>
Tensor<T> sparse_gather_conv(const Tensor<T>& input, const Tensor<T>& weight, const ImportantIndexList& idx,
                             MacCounter* counter = nullptr, int sample = 0) {
  if (input.c() != weight.c()) {
    throw ShapeError("sparse_gather_conv: input " + to_string(input.shape()) + " does not match kernel " +
                     to_string(weight.shape()));
  }
  if (idx.height != input.h() || idx.width != input.w()) {
    throw ShapeError("sparse_gather_conv: index list does not match input " + to_string(input.shape()));
  }
  const int npos = static_cast<int>(idx.count());
  const int krows = weight.c() * weight.h() * weight.w();
  Tensor<T> out(1, weight.n(), 1, npos);
  if (npos == 0 || weight.n() == 0) return out;
  std::vector<int> channels(input.c());
  for (int c = 0; c < input.c(); ++c) channels[c] = c;
  std::vector<T> cols(static_cast<std::size_t>(krows) * npos);
  detail::gather_im2col<T>(input.plane(sample, 0), input.h(), input.w(), channels, weight.h(), idx, cols.data());
  gemm(false, false, weight.n(), npos, krows, T(1), weight.data(), krows, cols.data(), npos, T(0), out.data(), npos);
  if (counter != nullptr) counter->add(static_cast<std::uint64_t>(weight.n()) * krows * npos);
  return out;
}

/// Expands a compact sparse result to a full (1, c, h, w) plane, zero outside idx.
template <class T>
Tensor<T> scatter(const Tensor<T>& compact, const ImportantIndexList& idx) {
  Tensor<T> out(1, compact.c(), idx.height, idx.width);
  for (int c = 0; c < compact.c(); ++c) {
    T* dst = out.plane(0, c);
    const T* src = compact.plane(0, c);
    for (std::size_t p = 0; p < idx.count(); ++p) dst[idx.positions[p]] = src[p];
  }
  return out;
}

/// Inference-time sparse mask convolution with split kernels:
///   dense-out  = D2D (full plane) + S2D (important pixels)
///   sparse-out = D2S + S2S        (important pixels only, zero elsewhere)
/// Sparse input channels must already be zero outside the important pixels.
/// `idx` holds one list per sample.
template <class T>
Tensor<T> sparse_mask_conv_infer(const Tensor<T>& feature, const KernelSplit<T>& split,
                                 std::span<const ImportantIndexList> idx, MacCounter* counter = nullptr) {
  if (feature.c() != split.c_in) {
    throw ShapeError("sparse_mask_conv_infer: feature " + to_string(feature.shape()) + " does not match kernel with " +
                     std::to_string(split.c_in) + " input channels");
  }
  if (idx.size() != static_cast<std::size_t>(feature.n())) {
    throw ShapeError("sparse_mask_conv_infer: need one index list per sample");
  }
  const int h = feature.h();
  const int w = feature.w();
  const int k = split.k;
  const int npix = h * w;
  const int n_din = static_cast<int>(split.dense_in.size());
  const int n_sin = static_cast<int>(split.sparse_in.size());
  const int n_dout = static_cast<int>(split.dense_out.size());
  const int n_sout = static_cast<int>(split.sparse_out.size());
  const int kk = k * k;
  Tensor<T> out(feature.n(), split.c_out, h, w);

  std::vector<T> dense_cols;
  std::vector<T> dense_res(static_cast<std::size_t>(n_dout) * npix);
  std::vector<T> gathered_dense;
  std::vector<T> gathered_sparse;
  std::vector<T> compact_dense;
  std::vector<T> compact_sparse;
  for (int n = 0; n < feature.n(); ++n) {
    const ImportantIndexList& ids = idx[n];
    if (ids.height != h || ids.width != w) throw ShapeError("sparse_mask_conv_infer: index list size mismatch");
    const int nimp = static_cast<int>(ids.count());
    const T* sample = feature.plane(n, 0);

    // D2D: plain im2col convolution over the dense input channels.
    if (n_dout > 0) {
      dense_cols.resize(static_cast<std::size_t>(n_din) * kk * npix);
      // an empty channel list means "all channels" to im2col
      if (n_din > 0) detail::im2col<T>(sample, feature.c(), h, w, split.dense_in, k, k, 1, k / 2, dense_cols.data());
      gemm(false, false, n_dout, npix, n_din * kk, T(1), split.w_dd.data(), n_din * kk, dense_cols.data(), npix,
           T(0), dense_res.data(), npix);
      if (counter) counter->add(static_cast<std::uint64_t>(n_dout) * n_din * kk * npix);
    }

    if (nimp > 0) {
      gathered_dense.resize(static_cast<std::size_t>(n_din) * kk * nimp);
      gathered_sparse.resize(static_cast<std::size_t>(n_sin) * kk * nimp);
      if (n_sout > 0 && n_din > 0)
        detail::gather_im2col<T>(sample, h, w, split.dense_in, k, ids, gathered_dense.data());
      if (n_sin > 0) detail::gather_im2col<T>(sample, h, w, split.sparse_in, k, ids, gathered_sparse.data());

      // S2D: sparse inputs feeding dense outputs, at important pixels.
      if (n_dout > 0) {
        compact_dense.resize(static_cast<std::size_t>(n_dout) * nimp);
        gemm(false, false, n_dout, nimp, n_sin * kk, T(1), split.w_sd.data(), n_sin * kk, gathered_sparse.data(),
             nimp, T(0), compact_dense.data(), nimp);
        if (counter) counter->add(static_cast<std::uint64_t>(n_dout) * n_sin * kk * nimp);
      }
      // D2S + S2S accumulate into the same compact buffer.
      if (n_sout > 0) {
        compact_sparse.resize(static_cast<std::size_t>(n_sout) * nimp);
        gemm(false, false, n_sout, nimp, n_din * kk, T(1), split.w_ds.data(), n_din * kk, gathered_dense.data(), nimp,
             T(0), compact_sparse.data(), nimp);
        gemm(false, false, n_sout, nimp, n_sin * kk, T(1), split.w_ss.data(), n_sin * kk, gathered_sparse.data(),
             nimp, T(1), compact_sparse.data(), nimp);
        if (counter) counter->add(static_cast<std::uint64_t>(n_sout) * (n_din + n_sin) * kk * nimp);
      }
    }

    for (int o = 0; o < n_dout; ++o) {
      T* dst = out.plane(n, split.dense_out[o]);
      const T* src = dense_res.data() + static_cast<std::size_t>(o) * npix;
      const T b = split.bias_dense.empty() ? T(0) : split.bias_dense[o];
      for (int i = 0; i < npix; ++i) dst[i] = src[i] + b;
      if (nimp > 0) {
        const T* extra = compact_dense.data() + static_cast<std::size_t>(o) * nimp;
        for (int p = 0; p < nimp; ++p) dst[ids.positions[p]] += extra[p];
      }
    }
    for (int o = 0; o < n_sout; ++o) {
      T* dst = out.plane(n, split.sparse_out[o]);
      if (nimp == 0) continue;
      const T* src = compact_sparse.data() + static_cast<std::size_t>(o) * nimp;
      const T b = split.bias_sparse.empty() ? T(0) : split.bias_sparse[o];
      for (int p = 0; p < nimp; ++p) dst[ids.positions[p]] = src[p] + b;
    }
  }
  return out;
}

template <class T>
Tensor<T> sparse_mask_conv_infer(const Tensor<T>& feature, const KernelSplit<T>& split, const ImportantIndexList& idx,
                                 MacCounter* counter = nullptr) {
  return sparse_mask_conv_infer(feature, split, std::span<const ImportantIndexList>(&idx, 1), counter);
}

}  // namespace smsr
