#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "vigilnet/errors.hpp"

namespace vigilnet {

// Dense row-major tensor. Activations use channels-last layout
// [height, width, frames, channels], optionally with a leading batch axis.
template <typename T>
class TensorT {
 public:
  TensorT() = default;

  explicit TensorT(std::vector<int> shape)
      : shape_(std::move(shape)), data_(checked_size(shape_), T(0)) {}

  TensorT(std::vector<int> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<std::int64_t>(data_.size()) != checked_size(shape_)) {
      throw ShapeError("tensor data size " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  static TensorT full(std::vector<int> shape, T value) {
    TensorT t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int extent(int axis) const { return shape_[static_cast<std::size_t>(axis)]; }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& values() { return data_; }
  const std::vector<T>& values() const { return data_; }

  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const {
    return data_[static_cast<std::size_t>(i)];
  }

  // Same storage under a new shape; total size must match.
  TensorT reshaped(std::vector<int> new_shape) const {
    if (checked_size(new_shape) != size()) {
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " +
                       shape_str(new_shape));
    }
    return TensorT(std::move(new_shape), data_);
  }

  bool same_shape(const TensorT& other) const { return shape_ == other.shape_; }

  bool all_finite() const {
    for (const T& v : data_) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  template <typename U>
  TensorT<U> cast() const {
    std::vector<U> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) {
      out[i] = static_cast<U>(data_[i]);
    }
    return TensorT<U>(shape_, std::move(out));
  }

  static std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i) os << ",";
      os << shape[i];
    }
    os << "]";
    return os.str();
  }

  std::string shape_str() const { return shape_str(shape_); }

 private:
  static std::int64_t checked_size(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int e : shape) {
      if (e <= 0) {
        throw ShapeError("non-positive extent in shape " + shape_str(shape));
      }
      n *= e;
    }
    return n;
  }

  std::vector<int> shape_;
  std::vector<T> data_;
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

}  // namespace vigilnet
