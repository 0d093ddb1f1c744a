#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nmd {

/// Raised on any dimension or layout disagreement between operands.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a value leaves the finite range (NaN/Inf).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Up to four positive extents. Images are NCHW.
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<int> dims);
  explicit Shape(std::span<const int> dims);

  int rank() const { return rank_; }
  int operator[](int axis) const { return dims_[static_cast<std::size_t>(axis)]; }
  std::size_t numel() const;

  // NCHW accessors; valid only for rank 4.
  int n() const { return dims_[0]; }
  int c() const { return dims_[1]; }
  int h() const { return dims_[2]; }
  int w() const { return dims_[3]; }

  std::span<const int> dims() const { return {dims_.data(), static_cast<std::size_t>(rank_)}; }
  std::string str() const;

  friend bool operator==(const Shape& a, const Shape& b) {
    return a.rank_ == b.rank_ && a.dims_ == b.dims_;
  }

 private:
  std::array<int, 4> dims_{0, 0, 0, 0};
  int rank_ = 0;
};

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::F32; }
template <>
constexpr DType dtype_of<double>() { return DType::F64; }

/// Dense row-major tensor. A default-constructed tensor is empty (rank 0).
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0}) : shape_(shape), data_(shape.numel(), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.numel()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_.str());
    }
  }

  const Shape& shape() const { return shape_; }
  int dim(int axis) const { return shape_[axis]; }
  int rank() const { return shape_.rank(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  T operator[](std::size_t i) const { return data_[i]; }

  std::size_t offset(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape_.c() + c) * shape_.h() + h) * shape_.w() + w;
  }
  T& at(int n, int c, int h, int w) { return data_[offset(n, c, h, w)]; }
  T at(int n, int c, int h, int w) const { return data_[offset(n, c, h, w)]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  /// Same data, new extents; total size must agree.
  Tensor reshaped(Shape shape) const { return Tensor(shape, data_); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

template <typename T>
bool Tensor<T>::all_finite() const {
  for (T v : data_) {
    if (!(v - v == T{0})) return false;
  }
  return true;
}

/// Throws ShapeError unless `a` and `b` have identical extents.
void require_same_shape(const Shape& a, const Shape& b, const char* what);
void require_rank(const Shape& s, int rank, const char* what);

/// Byte-for-byte equality, distinguishing -0 from +0 and comparing NaN payloads.
template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b);

}  // namespace nmd
