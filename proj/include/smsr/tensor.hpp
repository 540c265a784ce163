#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace smsr {

/// Thrown when operand shapes do not satisfy an operation's contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  [[nodiscard]] std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  [[nodiscard]] int dim(int axis) const {
    switch (axis) {
      case 0: return n;
      case 1: return c;
      case 2: return h;
      case 3: return w;
      default: throw ShapeError("axis out of range: " + std::to_string(axis));
    }
  }
  void set_dim(int axis, int value) {
    switch (axis) {
      case 0: n = value; break;
      case 1: c = value; break;
      case 2: h = value; break;
      case 3: w = value; break;
      default: throw ShapeError("axis out of range: " + std::to_string(axis));
    }
  }
  friend bool operator==(const Shape&, const Shape&) = default;
};

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '(' << s.n << ", " << s.c << ", " << s.h << ", " << s.w << ')';
  return os.str();
}

/// Rank-4 NCHW tensor with contiguous row-major storage.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0)) : shape_(check(shape)), data_(shape.numel(), fill) {}
  Tensor(int n, int c, int h, int w, T fill = T(0)) : Tensor(Shape{n, c, h, w}, fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(check(shape)), data_(std::move(data)) {
    if (data_.size() != shape_.numel()) {
      throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                       to_string(shape_));
    }
  }

  [[nodiscard]] const Shape& shape() const { return shape_; }
  [[nodiscard]] int n() const { return shape_.n; }
  [[nodiscard]] int c() const { return shape_.c; }
  [[nodiscard]] int h() const { return shape_.h; }
  [[nodiscard]] int w() const { return shape_.w; }
  [[nodiscard]] std::size_t size() const { return data_.size(); }
  [[nodiscard]] bool empty() const { return data_.empty(); }

  [[nodiscard]] T* data() { return data_.data(); }
  [[nodiscard]] const T* data() const { return data_.data(); }
  [[nodiscard]] std::span<T> values() { return data_; }
  [[nodiscard]] std::span<const T> values() const { return data_; }
  [[nodiscard]] const std::vector<T>& vec() const { return data_; }

  [[nodiscard]] std::size_t offset(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  T& operator()(int n, int c, int h, int w) { return data_[offset(n, c, h, w)]; }
  const T& operator()(int n, int c, int h, int w) const { return data_[offset(n, c, h, w)]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  /// Pointer to the first element of plane (n, c).
  T* plane(int n, int c) { return data_.data() + offset(n, c, 0, 0); }
  const T* plane(int n, int c) const { return data_.data() + offset(n, c, 0, 0); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  [[nodiscard]] Tensor reshaped(Shape s) const {
    if (s.numel() != numel_of(shape_)) {
      throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(s));
    }
    return Tensor(s, data_);
  }

  template <class U>
  [[nodiscard]] Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static std::size_t numel_of(const Shape& s) { return s.numel(); }
  static Shape check(Shape s) {
    if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0) {
      throw ShapeError("negative dimension in shape " + to_string(s));
    }
    return s;
  }

  Shape shape_{};
  std::vector<T> data_;
};

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  return out;
}

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, a[i] > b[i] ? a[i] - b[i] : b[i] - a[i]);
  return m;
}

/// Copies channels [begin, end) of x.
template <class T>
Tensor<T> slice_channels(const Tensor<T>& x, int begin, int end) {
  if (begin < 0 || end > x.c() || begin > end) {
    throw ShapeError("channel slice [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") out of range for " + to_string(x.shape()));
  }
  Tensor<T> out(x.n(), end - begin, x.h(), x.w());
  const std::size_t plane = static_cast<std::size_t>(x.h()) * x.w();
  for (int n = 0; n < x.n(); ++n) {
    for (int c = begin; c < end; ++c) {
      std::copy_n(x.plane(n, c), plane, out.plane(n, c - begin));
    }
  }
  return out;
}

/// Concatenates along the channel axis.
template <class T>
Tensor<T> concat_channels(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& s0 = parts.front().shape();
  int channels = 0;
  for (const auto& p : parts) {
    if (p.n() != s0.n || p.h() != s0.h || p.w() != s0.w) {
      throw ShapeError("concat: " + to_string(p.shape()) + " incompatible with " + to_string(s0));
    }
    channels += p.c();
  }
  Tensor<T> out(s0.n, channels, s0.h, s0.w);
  const std::size_t plane = static_cast<std::size_t>(s0.h) * s0.w;
  for (int n = 0; n < s0.n; ++n) {
    int dst = 0;
    for (const auto& p : parts) {
      std::copy_n(p.plane(n, 0), plane * p.c(), out.plane(n, dst));
      dst += p.c();
    }
  }
  return out;
}

}  // namespace smsr
