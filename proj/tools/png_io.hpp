#pragma once

#include <filesystem>

#include "nmd/tensor.hpp"

namespace nmd {

/// 8-bit PNG as 1 x C x H x W in [0,1]; C is 1 for grayscale, 3 otherwise (alpha dropped).
Tensor<float> read_png(const std::filesystem::path& path);
/// Clips to [0,1], scales by 255 and rounds half to even. C must be 1 or 3.
void write_png(const std::filesystem::path& path, const Tensor<float>& image);

}  // namespace nmd
