#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace factorizer {

using Shape = std::vector<int64_t>;

class ShapeError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};
class ConfigError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};
class UsageError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};
class DomainError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};
class IoError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline int64_t numel_of(const Shape& shape) {
  int64_t n = 1;
  for (int64_t e : shape) n *= e;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

inline Shape row_major_strides(const Shape& shape) {
  Shape strides(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i)
    strides[i] = strides[i + 1] * shape[i + 1];
  return strides;
}

inline int normalize_axis(int axis, int rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank)
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  return axis;
}

/// Dense row-major N-dimensional array. Buffers are shared between tensors
/// and treated as immutable once a tensor is handed out; `mutable_data` is
/// only for filling freshly allocated storage.
template <typename T>
class Tensor {
 public:
  Tensor() : shape_{0}, data_(std::make_shared<std::vector<T>>()) {}

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<T>>(check_extents(shape_), T(0))) {}

  Tensor(Shape shape, std::vector<T> values)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<T>>(std::move(values))) {
    if (check_extents(shape_) != static_cast<int64_t>(data_->size()))
      throw ShapeError("data length " + std::to_string(data_->size()) +
                       " does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, T value) {
    Tensor t(std::move(shape));
    std::fill(t.data_->begin(), t.data_->end(), value);
    return t;
  }

  static Tensor ones(Shape shape) { return full(std::move(shape), T(1)); }

  static Tensor scalar(T value) { return Tensor({1}, {value}); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t numel() const { return static_cast<int64_t>(data_->size()); }
  int64_t extent(int axis) const { return shape_[normalize_axis(axis, rank())]; }

  std::span<const T> data() const { return {data_->data(), data_->size()}; }
  std::span<T> mutable_data() { return {data_->data(), data_->size()}; }
  const std::shared_ptr<std::vector<T>>& buffer() const { return data_; }

  T item() const {
    if (numel() != 1)
      throw UsageError("item() requires a single-element tensor, got " + shape_str(shape_));
    return (*data_)[0];
  }

  T at(std::initializer_list<int64_t> idx) const {
    return (*data_)[offset_of(idx)];
  }
  T& at(std::initializer_list<int64_t> idx) { return (*data_)[offset_of(idx)]; }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  /// Shares the underlying buffer; element count must be preserved.
  Tensor reshape(Shape new_shape) const {
    if (numel_of(new_shape) != numel())
      throw ShapeError("reshape from " + shape_str(shape_) + " to " + shape_str(new_shape) +
                       " changes element count");
    Tensor out;
    out.shape_ = std::move(new_shape);
    out.data_ = data_;
    return out;
  }

  Tensor clone() const {
    Tensor out;
    out.shape_ = shape_;
    out.data_ = std::make_shared<std::vector<T>>(*data_);
    return out;
  }

  Tensor permute(const std::vector<int>& axes) const {
    const int r = rank();
    if (static_cast<int>(axes.size()) != r)
      throw ShapeError("permute axes count != rank");
    std::vector<char> seen(r, 0);
    Shape out_shape(r);
    for (int i = 0; i < r; ++i) {
      int a = normalize_axis(axes[i], r);
      if (seen[a]++) throw ShapeError("permute axes repeat axis " + std::to_string(a));
      out_shape[i] = shape_[a];
    }
    Tensor out(out_shape);
    if (out.numel() == 0) return out;
    // Odometer walk over the output in row-major order, tracking the
    // corresponding input offset incrementally.
    Shape in_strides = row_major_strides(shape_);
    std::vector<int64_t> step(r), counters(r, 0);
    for (int i = 0; i < r; ++i) step[i] = in_strides[normalize_axis(axes[i], r)];
    const T* src = data_->data();
    T* dst = out.data_->data();
    const int64_t n = out.numel();
    int64_t in_off = 0;
    for (int64_t linear = 0; linear < n; ++linear) {
      dst[linear] = src[in_off];
      for (int d = r - 1; d >= 0; --d) {
        in_off += step[d];
        if (++counters[d] < out_shape[d]) break;
        in_off -= step[d] * out_shape[d];
        counters[d] = 0;
      }
    }
    return out;
  }

  Tensor transpose_last2() const {
    std::vector<int> axes(rank());
    for (int i = 0; i < rank(); ++i) axes[i] = i;
    if (rank() < 2) throw ShapeError("transpose_last2 requires rank >= 2");
    std::swap(axes[rank() - 1], axes[rank() - 2]);
    return permute(axes);
  }

  /// Circular shift along `axes`; elements pushed past the end re-enter at
  /// the front (positive shift moves content toward higher indices).
  Tensor roll(const std::vector<int>& axes, const std::vector<int64_t>& shifts) const {
    if (axes.size() != shifts.size()) throw ShapeError("roll axes/shifts size mismatch");
    std::vector<int64_t> shift_per_axis(rank(), 0);
    for (size_t i = 0; i < axes.size(); ++i) {
      int a = normalize_axis(axes[i], rank());
      int64_t e = shape_[a];
      int64_t s = shifts[i] % e;
      if (s < 0) s += e;
      shift_per_axis[a] = (shift_per_axis[a] + s) % e;
    }
    Tensor out(shape_);
    if (numel() == 0) return out;
    const int r = rank();
    Shape strides = row_major_strides(shape_);
    std::vector<int64_t> counters(r, 0);
    const T* src = data_->data();
    T* dst = out.data_->data();
    const int64_t n = numel();
    // Input offset for output index i is taken at (i - shift) mod extent.
    int64_t in_off = 0;
    for (int d = 0; d < r; ++d) {
      int64_t j = (0 - shift_per_axis[d] % shape_[d] + shape_[d]) % shape_[d];
      in_off += j * strides[d];
    }
    for (int64_t linear = 0; linear < n; ++linear) {
      dst[linear] = src[in_off];
      for (int d = r - 1; d >= 0; --d) {
        ++counters[d];
        int64_t j = (counters[d] - shift_per_axis[d] % shape_[d] + shape_[d]) % shape_[d];
        if (counters[d] < shape_[d]) {
          int64_t prev = (j - 1 + shape_[d]) % shape_[d];
          in_off += (j - prev) * strides[d];
          break;
        }
        counters[d] = 0;
        int64_t first = (0 - shift_per_axis[d] % shape_[d] + shape_[d]) % shape_[d];
        int64_t last = (shape_[d] - 1 - shift_per_axis[d] % shape_[d] + 2 * shape_[d]) % shape_[d];
        in_off += (first - last) * strides[d];
      }
    }
    return out;
  }

  Tensor slice(int axis, int64_t start, int64_t length) const {
    axis = normalize_axis(axis, rank());
    if (start < 0 || length < 0 || start + length > shape_[axis])
      throw ShapeError("slice [" + std::to_string(start) + ", " +
                       std::to_string(start + length) + ") out of bounds on axis " +
                       std::to_string(axis) + " of " + shape_str(shape_));
    Shape out_shape = shape_;
    out_shape[axis] = length;
    Tensor out(out_shape);
    const int64_t inner = row_major_strides(shape_)[axis];
    const int64_t outer = numel() / (inner * shape_[axis]);
    const T* src = data_->data();
    T* dst = out.data_->data();
    for (int64_t o = 0; o < outer; ++o) {
      const T* s = src + (o * shape_[axis] + start) * inner;
      T* d = dst + o * length * inner;
      std::memcpy(d, s, sizeof(T) * static_cast<size_t>(length * inner));
    }
    return out;
  }

  Tensor flip(int axis) const {
    axis = normalize_axis(axis, rank());
    Tensor out(shape_);
    const int64_t inner = row_major_strides(shape_)[axis];
    const int64_t e = shape_[axis];
    const int64_t outer = numel() / (inner * e);
    const T* src = data_->data();
    T* dst = out.data_->data();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t i = 0; i < e; ++i)
        std::memcpy(dst + (o * e + i) * inner, src + (o * e + (e - 1 - i)) * inner,
                    sizeof(T) * static_cast<size_t>(inner));
    return out;
  }

  static Tensor concat(std::span<const Tensor> parts, int axis) {
    if (parts.empty()) throw ShapeError("concat of zero tensors");
    const int r = parts[0].rank();
    axis = normalize_axis(axis, r);
    Shape out_shape = parts[0].shape();
    int64_t total = 0;
    for (const Tensor& p : parts) {
      if (p.rank() != r) throw ShapeError("concat rank mismatch");
      for (int d = 0; d < r; ++d)
        if (d != axis && p.shape()[d] != out_shape[d])
          throw ShapeError("concat shape mismatch on axis " + std::to_string(d) + ": " +
                           shape_str(p.shape()) + " vs " + shape_str(out_shape));
      total += p.shape()[axis];
    }
    out_shape[axis] = total;
    Tensor out(out_shape);
    const int64_t inner = row_major_strides(out_shape)[axis];
    const int64_t outer = out.numel() / (inner * total);
    T* dst = out.data_->data();
    int64_t offset = 0;
    for (const Tensor& p : parts) {
      const int64_t e = p.shape()[axis];
      const T* src = p.data_->data();
      for (int64_t o = 0; o < outer; ++o)
        std::memcpy(dst + (o * total + offset) * inner, src + o * e * inner,
                    sizeof(T) * static_cast<size_t>(e * inner));
      offset += e;
    }
    return out;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> values(data_->size());
    for (size_t i = 0; i < data_->size(); ++i) values[i] = static_cast<U>((*data_)[i]);
    return Tensor<U>(shape_, std::move(values));
  }

 private:
  static int64_t check_extents(const Shape& shape) {
    for (int64_t e : shape)
      if (e < 1) throw ShapeError("extents must be >= 1, got shape " + shape_str(shape));
    return numel_of(shape);
  }

  int64_t offset_of(std::initializer_list<int64_t> idx) const {
    if (static_cast<int>(idx.size()) != rank()) throw ShapeError("index rank mismatch");
    Shape strides = row_major_strides(shape_);
    int64_t off = 0;
    int d = 0;
    for (int64_t i : idx) {
      if (i < 0 || i >= shape_[d]) throw ShapeError("index out of bounds");
      off += i * strides[d++];
    }
    return off;
  }

  Shape shape_;
  std::shared_ptr<std::vector<T>> data_;
};

}  // namespace factorizer
