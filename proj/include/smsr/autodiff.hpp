#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "smsr/conv.hpp"
#include "smsr/image_ops.hpp"
#include "smsr/tensor.hpp"

namespace smsr {

/// A trainable tensor with its gradient and Adam moment buffers.
template <class T>
struct Parameter {
  Tensor<T> value;
  Tensor<T> grad;
  Tensor<T> adam_m;
  Tensor<T> adam_v;
  long step_count = 0;

  Parameter() = default;
  explicit Parameter(Tensor<T> v)
      : value(std::move(v)), grad(value.shape()), adam_m(value.shape()), adam_v(value.shape()) {}

  void zero_grad() { grad.fill(T(0)); }
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <class T>
class Tape;

/// Handle to a value recorded on a tape.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, int id) : tape_(tape), id_(id) {}

  [[nodiscard]] const Tensor<T>& value() const { return tape_->value(id_); }
  [[nodiscard]] const Shape& shape() const { return value().shape(); }
  [[nodiscard]] int id() const { return id_; }
  [[nodiscard]] Tape<T>* tape() const { return tape_; }
  [[nodiscard]] bool valid() const { return tape_ != nullptr && id_ >= 0; }

 private:
  Tape<T>* tape_ = nullptr;
  int id_ = -1;
};

/// Gives a backward closure access to the gradient buffers of its operands.
template <class T>
class GradSink {
 public:
  GradSink(Tape<T>& tape, const std::vector<int>& inputs) : tape_(tape), inputs_(inputs) {}
  /// Gradient buffer of operand k, or nullptr when that operand needs no gradient.
  Tensor<T>* operator[](std::size_t k) { return tape_.grad_buffer(inputs_[k]); }

 private:
  Tape<T>& tape_;
  const std::vector<int>& inputs_;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so operands always precede users.
template <class T>
class Tape {
 public:
  using Backward = std::function<void(const Tensor<T>& grad_out, GradSink<T>& sink)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) { return push(std::move(value), {}, nullptr, nullptr, false); }

  Var<T> param(Parameter<T>& p) { return push(p.value, {}, nullptr, &p, true); }

  /// Leaf that receives a gradient but is not bound to a Parameter (used by gradient checks).
  Var<T> variable(Tensor<T> value) { return push(std::move(value), {}, nullptr, nullptr, true); }

  Var<T> record(Tensor<T> value, std::vector<int> inputs, Backward backward) {
    bool needs = false;
    for (int id : inputs) needs = needs || nodes_.at(id).requires_grad;
    if (!needs) return push(std::move(value), {}, nullptr, nullptr, false);
    return push(std::move(value), std::move(inputs), std::move(backward), nullptr, true);
  }

  [[nodiscard]] const Tensor<T>& value(int id) const { return nodes_.at(id).value; }
  [[nodiscard]] bool requires_grad(int id) const { return nodes_.at(id).requires_grad; }
  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

  /// Gradient of the last backward pass for node `id`; empty if none reached it.
  [[nodiscard]] const Tensor<T>& grad(int id) const { return grads_.at(id); }

  Tensor<T>* grad_buffer(int id) {
    if (!nodes_[id].requires_grad) return nullptr;
    if (grads_[id].empty() && nodes_[id].value.size() > 0) grads_[id] = Tensor<T>(nodes_[id].value.shape());
    return &grads_[id];
  }

  /// Back-propagates from a scalar loss, visiting nodes in reverse recording order, then adds
  /// leaf gradients into their Parameters.
  void backward(const Var<T>& loss) {
    if (nodes_.empty() || loss.tape() != this || loss.id() < 0 ||
        static_cast<std::size_t>(loss.id()) >= nodes_.size()) {
      throw TapeError("backward: no loss node recorded on this tape");
    }
    if (nodes_[loss.id()].value.size() != 1) {
      throw TapeError("backward: loss must be a scalar, got " + to_string(nodes_[loss.id()].value.shape()));
    }
    grads_.assign(nodes_.size(), Tensor<T>());
    if (!nodes_[loss.id()].requires_grad) return;
    grads_[loss.id()] = Tensor<T>(nodes_[loss.id()].value.shape(), T(1));
    for (int id = loss.id(); id >= 0; --id) {
      Node& node = nodes_[id];
      if (!node.backward || grads_[id].empty()) continue;
      GradSink<T> sink(*this, node.inputs);
      node.backward(grads_[id], sink);
    }
    for (std::size_t id = 0; id < nodes_.size(); ++id) {
      Parameter<T>* p = nodes_[id].param;
      if (p == nullptr || grads_[id].empty()) continue;
      for (std::size_t i = 0; i < p->grad.size(); ++i) p->grad[i] += grads_[id][i];
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    std::vector<int> inputs;
    Backward backward;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
  };

  Var<T> push(Tensor<T> value, std::vector<int> inputs, Backward backward, Parameter<T>* param, bool rg) {
    nodes_.push_back(Node{std::move(value), std::move(inputs), std::move(backward), param, rg});
    grads_.emplace_back();
    return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
  }

  std::vector<Node> nodes_;
  std::vector<Tensor<T>> grads_;
};

namespace ad {

namespace detail {

template <class T>
Tape<T>& same_tape(const Var<T>& a, const Var<T>& b) {
  if (a.tape() != b.tape() || a.tape() == nullptr) throw TapeError("operands live on different tapes");
  return *a.tape();
}

struct Broadcast {
  Shape out;
  int sa[4];
  int sb[4];
};

inline Broadcast broadcast(const Shape& a, const Shape& b) {
  Broadcast r{};
  int stride_a = 1;
  int stride_b = 1;
  for (int d = 3; d >= 0; --d) {
    const int da = a.dim(d);
    const int db = b.dim(d);
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast " + to_string(a) + " with " + to_string(b));
    }
    const int od = da == 1 ? db : da;
    r.out.set_dim(d, od);
    r.sa[d] = (da == 1 && od != 1) ? 0 : stride_a;
    r.sb[d] = (db == 1 && od != 1) ? 0 : stride_b;
    stride_a *= da;
    stride_b *= db;
  }
  return r;
}

// Calls f(out_index, a_index, b_index) over the broadcast output.
template <class F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
  std::size_t o = 0;
  for (int n = 0; n < bc.out.n; ++n)
    for (int c = 0; c < bc.out.c; ++c)
      for (int h = 0; h < bc.out.h; ++h) {
        std::size_t ia = static_cast<std::size_t>(n) * bc.sa[0] + c * bc.sa[1] + h * bc.sa[2];
        std::size_t ib = static_cast<std::size_t>(n) * bc.sb[0] + c * bc.sb[1] + h * bc.sb[2];
        for (int w = 0; w < bc.out.w; ++w, ++o, ia += bc.sa[3], ib += bc.sb[3]) f(o, ia, ib);
      }
}

}  // namespace detail

/// a + b with NCHW broadcasting over size-1 dimensions.
template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  Tape<T>& t = detail::same_tape(a, b);
  const auto bc = detail::broadcast(a.shape(), b.shape());
  Tensor<T> out(bc.out);
  const T* pa = a.value().data();
  const T* pb = b.value().data();
  detail::for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = pa[ia] + pb[ib]; });
  return t.record(std::move(out), {a.id(), b.id()}, [bc](const Tensor<T>& g, GradSink<T>& sink) {
    Tensor<T>* ga = sink[0];
    Tensor<T>* gb = sink[1];
    detail::for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      if (ga) (*ga)[ia] += g[o];
      if (gb) (*gb)[ib] += g[o];
    });
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  Tape<T>& t = detail::same_tape(a, b);
  const auto bc = detail::broadcast(a.shape(), b.shape());
  Tensor<T> out(bc.out);
  const T* pa = a.value().data();
  const T* pb = b.value().data();
  detail::for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = pa[ia] - pb[ib]; });
  return t.record(std::move(out), {a.id(), b.id()}, [bc](const Tensor<T>& g, GradSink<T>& sink) {
    Tensor<T>* ga = sink[0];
    Tensor<T>* gb = sink[1];
    detail::for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      if (ga) (*ga)[ia] += g[o];
      if (gb) (*gb)[ib] -= g[o];
    });
  });
}

/// Elementwise product with broadcasting; this is how masks gate features.
template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  Tape<T>& t = detail::same_tape(a, b);
  const auto bc = detail::broadcast(a.shape(), b.shape());
  Tensor<T> out(bc.out);
  const Tensor<T>& va = a.value();
  const Tensor<T>& vb = b.value();
  detail::for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = va[ia] * vb[ib]; });
  const int ida = a.id();
  const int idb = b.id();
  return t.record(std::move(out), {ida, idb}, [bc, &t, ida, idb](const Tensor<T>& g, GradSink<T>& sink) {
    Tensor<T>* ga = sink[0];
    Tensor<T>* gb = sink[1];
    const Tensor<T>& va = t.value(ida);
    const Tensor<T>& vb = t.value(idb);
    detail::for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      if (ga) (*ga)[ia] += g[o] * vb[ib];
      if (gb) (*gb)[ib] += g[o] * va[ia];
    });
  });
}

/// scale * x + shift.
template <class T>
Var<T> affine(const Var<T>& x, T scale, T shift) {
  Tensor<T> out(x.shape());
  const Tensor<T>& v = x.value();
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = scale * v[i] + shift;
  return x.tape()->record(std::move(out), {x.id()}, [scale](const Tensor<T>& g, GradSink<T>& sink) {
    if (Tensor<T>* gx = sink[0]) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += scale * g[i];
    }
  });
}

/// max(0, x); the subgradient at exactly 0 is 0.
template <class T>
Var<T> relu(const Var<T>& x) {
  Tape<T>& t = *x.tape();
  const int id = x.id();
  return t.record(smsr::relu(x.value()), {id}, [&t, id](const Tensor<T>& g, GradSink<T>& sink) {
    if (Tensor<T>* gx = sink[0]) {
      const Tensor<T>& v = t.value(id);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (v[i] > T(0)) (*gx)[i] += g[i];
    }
  });
}

/// |x|; the subgradient at exactly 0 is 0.
template <class T>
Var<T> abs(const Var<T>& x) {
  Tape<T>& t = *x.tape();
  const int id = x.id();
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::abs(x.value()[i]);
  return t.record(std::move(out), {id}, [&t, id](const Tensor<T>& g, GradSink<T>& sink) {
    if (Tensor<T>* gx = sink[0]) {
      const Tensor<T>& v = t.value(id);
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (v[i] > T(0)) (*gx)[i] += g[i];
        else if (v[i] < T(0)) (*gx)[i] -= g[i];
      }
    }
  });
}

/// Mean over all elements, as a (1, 1, 1, 1) tensor.
template <class T>
Var<T> mean(const Var<T>& x) {
  const Tensor<T>& v = x.value();
  if (v.size() == 0) throw ShapeError("mean of an empty tensor");
  T s = 0;
  for (std::size_t i = 0; i < v.size(); ++i) s += v[i];
  const T inv = T(1) / static_cast<T>(v.size());
  return x.tape()->record(Tensor<T>(1, 1, 1, 1, s * inv), {x.id()}, [inv](const Tensor<T>& g, GradSink<T>& sink) {
    if (Tensor<T>* gx = sink[0]) {
      const T d = g[0] * inv;
      for (std::size_t i = 0; i < gx->size(); ++i) (*gx)[i] += d;
    }
  });
}

/// Convolution; `bias` may be null.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>* bias, int stride, int pad,
              MacCounter* counter = nullptr) {
  Tape<T>& t = detail::same_tape(x, weight);
  const Tensor<T>* bv = bias != nullptr ? &bias->value() : nullptr;
  Tensor<T> out = conv2d_dense(x.value(), weight.value(), bv, stride, pad, counter);
  std::vector<int> inputs{x.id(), weight.id()};
  if (bias != nullptr) inputs.push_back(bias->id());
  const int idx = x.id();
  const int idw = weight.id();
  const bool has_bias = bias != nullptr;
  return t.record(std::move(out), std::move(inputs),
                  [&t, idx, idw, stride, pad, has_bias](const Tensor<T>& g, GradSink<T>& sink) {
                    conv2d_backward(t.value(idx), t.value(idw), stride, pad, g, sink[0], sink[1],
                                    has_bias ? sink[2] : nullptr);
                  });
}

/// Concatenation along the channel axis.
template <class T>
Var<T> concat(std::span<const Var<T>> parts) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Tape<T>& t = *parts.front().tape();
  std::vector<Tensor<T>> values;
  std::vector<int> inputs;
  std::vector<int> channels;
  for (const auto& p : parts) {
    if (p.tape() != &t) throw TapeError("operands live on different tapes");
    values.push_back(p.value());
    inputs.push_back(p.id());
    channels.push_back(p.shape().c);
  }
  Tensor<T> out = concat_channels<T>(values);
  return t.record(std::move(out), std::move(inputs), [channels](const Tensor<T>& g, GradSink<T>& sink) {
    const std::size_t plane = static_cast<std::size_t>(g.h()) * g.w();
    int begin = 0;
    for (std::size_t k = 0; k < channels.size(); ++k) {
      if (Tensor<T>* gp = sink[k]) {
        for (int n = 0; n < g.n(); ++n) {
          const T* src = g.plane(n, begin);
          T* dst = gp->plane(n, 0);
          for (std::size_t i = 0; i < plane * channels[k]; ++i) dst[i] += src[i];
        }
      }
      begin += channels[k];
    }
  });
}

template <class T>
Var<T> concat(std::initializer_list<Var<T>> parts) {
  std::vector<Var<T>> v(parts);
  return concat<T>(std::span<const Var<T>>(v));
}

namespace detail {
// Strides for iterating "outer x axis x inner" over an NCHW tensor.
inline void axis_split(const Shape& s, int axis, std::size_t& outer, std::size_t& len, std::size_t& inner) {
  outer = 1;
  inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s.dim(d);
  len = s.dim(axis);
  for (int d = axis + 1; d < 4; ++d) inner *= s.dim(d);
}
}  // namespace detail

/// Softmax over one axis.
template <class T>
Var<T> softmax(const Var<T>& x, int axis) {
  Tape<T>& t = *x.tape();
  const Tensor<T>& v = x.value();
  std::size_t outer, len, inner;
  detail::axis_split(v.shape(), axis, outer, len, inner);
  Tensor<T> out(v.shape());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      T mx = v[base];
      for (std::size_t k = 1; k < len; ++k) mx = std::max(mx, v[base + k * inner]);
      T sum = 0;
      for (std::size_t k = 0; k < len; ++k) {
        const T e = std::exp(v[base + k * inner] - mx);
        out[base + k * inner] = e;
        sum += e;
      }
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= sum;
    }
  const int self = static_cast<int>(t.size());
  return t.record(std::move(out), {x.id()},
                  [&t, self, outer, len, inner](const Tensor<T>& g, GradSink<T>& sink) {
                    Tensor<T>* gx = sink[0];
                    if (!gx) return;
                    const Tensor<T>& y = t.value(self);
                    for (std::size_t o = 0; o < outer; ++o)
                      for (std::size_t i = 0; i < inner; ++i) {
                        const std::size_t base = o * len * inner + i;
                        T dot = 0;
                        for (std::size_t k = 0; k < len; ++k) dot += g[base + k * inner] * y[base + k * inner];
                        for (std::size_t k = 0; k < len; ++k) {
                          const std::size_t j = base + k * inner;
                          (*gx)[j] += y[j] * (g[j] - dot);
                        }
                      }
                  });
}

/// Elements [begin, end) along one axis.
template <class T>
Var<T> slice(const Var<T>& x, int axis, int begin, int end) {
  const Tensor<T>& v = x.value();
  if (begin < 0 || end > v.shape().dim(axis) || begin > end) {
    throw ShapeError("slice out of range for " + to_string(v.shape()));
  }
  std::size_t outer, len, inner;
  detail::axis_split(v.shape(), axis, outer, len, inner);
  Shape s = v.shape();
  s.set_dim(axis, end - begin);
  Tensor<T> out(s);
  const std::size_t span_len = static_cast<std::size_t>(end - begin) * inner;
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(v.data() + o * len * inner + begin * inner, span_len, out.data() + o * span_len);
  }
  return x.tape()->record(std::move(out), {x.id()},
                          [outer, len, inner, begin, span_len](const Tensor<T>& g, GradSink<T>& sink) {
                            if (Tensor<T>* gx = sink[0]) {
                              for (std::size_t o = 0; o < outer; ++o) {
                                T* dst = gx->data() + o * len * inner + begin * inner;
                                const T* src = g.data() + o * span_len;
                                for (std::size_t i = 0; i < span_len; ++i) dst[i] += src[i];
                              }
                            }
                          });
}

template <class T>
Var<T> reshape(const Var<T>& x, Shape s) {
  return x.tape()->record(x.value().reshaped(s), {x.id()}, [](const Tensor<T>& g, GradSink<T>& sink) {
    if (Tensor<T>* gx = sink[0]) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
    }
  });
}

template <class T>
Var<T> pixel_shuffle(const Var<T>& x, int r) {
  return x.tape()->record(smsr::pixel_shuffle(x.value(), r), {x.id()}, [r](const Tensor<T>& g, GradSink<T>& sink) {
    if (Tensor<T>* gx = sink[0]) {
      const Tensor<T> back = pixel_unshuffle(g, r);
      for (std::size_t i = 0; i < back.size(); ++i) (*gx)[i] += back[i];
    }
  });
}

/// Nearest-neighbour upsampling by `factor` to exactly (out_h, out_w); rows/cols beyond
/// factor * input repeat the last source pixel.
template <class T>
Var<T> upsample_nearest(const Var<T>& x, int factor, int out_h, int out_w) {
  const Tensor<T>& v = x.value();
  Tensor<T> out(v.n(), v.c(), out_h, out_w);
  std::vector<int> ys(out_h);
  std::vector<int> xs(out_w);
  for (int y = 0; y < out_h; ++y) ys[y] = std::min(y / factor, v.h() - 1);
  for (int xx = 0; xx < out_w; ++xx) xs[xx] = std::min(xx / factor, v.w() - 1);
  for (int n = 0; n < v.n(); ++n)
    for (int c = 0; c < v.c(); ++c)
      for (int y = 0; y < out_h; ++y)
        for (int xx = 0; xx < out_w; ++xx) out(n, c, y, xx) = v(n, c, ys[y], xs[xx]);
  return x.tape()->record(std::move(out), {x.id()}, [ys, xs](const Tensor<T>& g, GradSink<T>& sink) {
    if (Tensor<T>* gx = sink[0]) {
      for (int n = 0; n < g.n(); ++n)
        for (int c = 0; c < g.c(); ++c)
          for (std::size_t y = 0; y < ys.size(); ++y)
            for (std::size_t xx = 0; xx < xs.size(); ++xx)
              (*gx)(n, c, ys[y], xs[xx]) += g(n, c, static_cast<int>(y), static_cast<int>(xx));
    }
  });
}

}  // namespace ad

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update per parameter; gradients are zeroed afterwards.
template <class T>
void adam_step(std::span<Parameter<T>* const> params, const AdamConfig& cfg) {
  for (Parameter<T>* p : params) {
    p->step_count += 1;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(p->step_count));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(p->step_count));
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double g = p->grad[i];
      const double m = cfg.beta1 * p->adam_m[i] + (1.0 - cfg.beta1) * g;
      const double v = cfg.beta2 * p->adam_v[i] + (1.0 - cfg.beta2) * g * g;
      p->adam_m[i] = static_cast<T>(m);
      p->adam_v[i] = static_cast<T>(v);
      const double update = cfg.lr * (m / c1) / (std::sqrt(v / c2) + cfg.eps);
      p->value[i] = static_cast<T>(p->value[i] - update);
    }
    p->zero_grad();
  }
}

}  // namespace smsr
