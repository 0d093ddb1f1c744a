#pragma once

#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <variant>

#include "nmd/tensor.hpp"

namespace nmd {

/// Malformed or truncated NMT1 stream.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NMT1 layout: "NMT1", dtype byte (0=f32, 1=f64), rank byte (1..4), two zero
// bytes, rank little-endian u32 extents, then the little-endian payload.

template <typename T>
void write_nmt(std::ostream& os, const Tensor<T>& t);
template <typename T>
void save_nmt(const std::filesystem::path& path, const Tensor<T>& t);

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

AnyTensor read_nmt_any(std::istream& is);
AnyTensor load_nmt_any(const std::filesystem::path& path);

/// Reads either dtype and converts to T.
template <typename T>
Tensor<T> read_nmt(std::istream& is);
template <typename T>
Tensor<T> load_nmt(const std::filesystem::path& path);

}  // namespace nmd
