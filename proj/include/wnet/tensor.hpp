// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace wnet {

using Index = std::int64_t;
using Shape = std::vector<Index>;

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

/// Dense row-major array. The shape is fixed at construction; reshaping
/// produces a new tensor.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(static_cast<std::size_t>(numel(shape_)), fill) {
    validate();
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate();
    if (static_cast<Index>(data_.size()) != numel(shape_)) {
      throw ShapeError("tensor data size " + std::to_string(data_.size()) +
                       " does not match shape " + to_string(shape_));
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  Index size() const noexcept { return static_cast<Index>(data_.size()); }
  std::size_t rank() const noexcept { return shape_.size(); }
  Index dim(std::size_t i) const { return shape_.at(i); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](Index i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](Index i) const { return data_[static_cast<std::size_t>(i)]; }

  // NHWC accessors for rank-4 image tensors.
  T& at(Index n, Index h, Index w, Index c) { return data_[offset(n, h, w, c)]; }
  const T& at(Index n, Index h, Index w, Index c) const { return data_[offset(n, h, w, c)]; }

  T item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape_));
    return data_[0];
  }

  Tensor reshaped(Shape shape) const {
    if (numel(shape) != size()) {
      throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void validate() const {
    for (Index d : shape_) {
      if (d < 0) throw ShapeError("negative extent in shape " + to_string(shape_));
    }
  }

  std::size_t offset(Index n, Index h, Index w, Index c) const {
    return static_cast<std::size_t>(((n * shape_[1] + h) * shape_[2] + w) * shape_[3] + c);
  }

  Shape shape_;
  std::vector<T> data_;
};

/// Slice a batch range [begin, begin+count) along the leading axis.
template <class T>
Tensor<T> slice_batch(const Tensor<T>& t, Index begin, Index count) {
  if (t.rank() == 0 || begin < 0 || begin + count > t.dim(0)) {
    throw ShapeError("batch slice out of range for " + to_string(t.shape()));
  }
  const Index inner = t.dim(0) == 0 ? 0 : t.size() / t.dim(0);
  Shape s = t.shape();
  s[0] = count;
  std::vector<T> out(t.data() + begin * inner, t.data() + (begin + count) * inner);
  return Tensor<T>(std::move(s), std::move(out));
}

/// Stack equally shaped tensors along a new or existing leading axis.
template <class T>
Tensor<T> concat_batch(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_batch of empty list");
  Shape s = parts.front().shape();
  Index total = 0;
  for (const auto& p : parts) {
    if (p.rank() != s.size() ||
        !std::equal(p.shape().begin() + 1, p.shape().end(), s.begin() + 1)) {
      throw ShapeError("concat_batch shape mismatch: " + to_string(p.shape()));
    }
    total += p.dim(0);
  }
  s[0] = total;
  std::vector<T> out;
  out.reserve(static_cast<std::size_t>(numel(s)));
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  return Tensor<T>(std::move(s), std::move(out));
}

}  // namespace wnet
