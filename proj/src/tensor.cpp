#include "nmd/tensor.hpp"

#include <cstring>

namespace nmd {

namespace {

void check_dims(std::span<const int> dims) {
  if (dims.empty() || dims.size() > 4) {
    throw ShapeError("tensor rank must be 1..4, got " + std::to_string(dims.size()));
  }
  for (int d : dims) {
    if (d <= 0) throw ShapeError("tensor extents must be positive");
  }
}

}  // namespace

Shape::Shape(std::initializer_list<int> dims) : Shape(std::span<const int>(dims.begin(), dims.size())) {}

Shape::Shape(std::span<const int> dims) {
  check_dims(dims);
  rank_ = static_cast<int>(dims.size());
  std::copy(dims.begin(), dims.end(), dims_.begin());
}

std::size_t Shape::numel() const {
  if (rank_ == 0) return 0;
  std::size_t n = 1;
  for (int i = 0; i < rank_; ++i) n *= static_cast<std::size_t>(dims_[i]);
  return n;
}

std::string Shape::str() const {
  std::string s = "[";
  for (int i = 0; i < rank_; ++i) {
    if (i) s += "x";
    s += std::to_string(dims_[i]);
  }
  return s + "]";
}

void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (!(a == b)) {
    throw ShapeError(std::string(what) + ": shape mismatch " + a.str() + " vs " + b.str());
  }
}

void require_rank(const Shape& s, int rank, const char* what) {
  if (s.rank() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                     s.str());
  }
}

template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (!(a.shape() == b.shape())) return false;
  return std::memcmp(a.ptr(), b.ptr(), a.size() * sizeof(T)) == 0;
}

template bool bitwise_equal(const Tensor<float>&, const Tensor<float>&);
template bool bitwise_equal(const Tensor<double>&, const Tensor<double>&);

}  // namespace nmd
