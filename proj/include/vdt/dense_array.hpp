#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "vdt/error.hpp"

namespace vdt {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream oss;
  oss << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) oss << 'x';
    oss << shape[i];
  }
  oss << ']';
  return oss.str();
}

// Shape-carrying, row-major, dense real array. Every tensor in the library is
// one of these. A default-constructed array is "empty" (rank 0, no data) and is
// used to mark absent optional values such as the view token in baseline mode.
template <typename T>
class DenseArray {
 public:
  using value_type = T;

  DenseArray() = default;

  explicit DenseArray(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(shape_numel(shape_), fill);
  }

  DenseArray(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (shape_numel(shape_) != data_.size()) {
      throw DimensionError("numkernel", "shape " + shape_string(shape_) + " needs " +
                                            std::to_string(shape_numel(shape_)) + " values, got " +
                                            std::to_string(data_.size()));
    }
  }

  static DenseArray zeros(Shape shape) { return DenseArray(std::move(shape)); }

  static DenseArray matrix(std::size_t rows, std::size_t cols, std::initializer_list<T> values) {
    return DenseArray({rows, cols}, std::vector<T>(values));
  }

  bool empty() const noexcept { return data_.empty(); }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  const Shape& shape() const noexcept { return shape_; }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  // 2-D view helpers. A rank-1 array reads as a single row.
  std::size_t rows() const noexcept { return rank() == 1 ? 1 : (rank() == 0 ? 0 : shape_[0]); }
  std::size_t cols() const noexcept {
    return rank() == 0 ? 0 : (rank() == 1 ? shape_[0] : data_.size() / shape_[0]);
  }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }

  std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols(), cols()}; }
  std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols(), cols()}; }

  DenseArray reshaped(Shape shape) const { return DenseArray(std::move(shape), data_); }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  bool all_finite() const noexcept {
    for (T v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  // Throws NumericError naming `where` if any entry is NaN/Inf.
  void require_finite(const std::string& where) const {
    if (!all_finite()) {
      throw NumericError("numkernel", "non-finite value produced by " + where);
    }
  }

  template <typename U>
  DenseArray<U> cast() const {
    return DenseArray<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  friend bool operator==(const DenseArray& a, const DenseArray& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void validate_shape() const {
    for (std::size_t d : shape_) {
      if (d == 0) throw DimensionError("numkernel", "zero-sized dimension in " + shape_string(shape_));
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

// Exact bitwise comparison (distinguishes -0.0 and +0.0, treats equal NaN
// payloads as equal).
template <typename T>
bool bitwise_equal(const DenseArray<T>& a, const DenseArray<T>& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

}  // namespace vdt
