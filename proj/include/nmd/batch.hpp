#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "nmd/noise_model.hpp"

namespace nmd {

/// Samples stacked along N. `noisy` is empty when the dataset has no noisy inputs.
template <typename T>
struct Batch {
  Tensor<T> noisy;
  Tensor<T> clean;
  Tensor<T> residual;
  Tensor<T> cond;
  std::vector<int> sources;
  std::vector<int> profile_ids;
  std::vector<int> indices;

  int size() const { return static_cast<int>(indices.size()); }
};

/// One of the eight flips/rotations of a 1 x C x H x W tensor; k = 0 is the identity.
/// Odd rotations (k & 1) need H == W.
template <typename T>
Tensor<T> dihedral(const Tensor<T>& x, int k);

/// Stacks the listed samples. `transforms` (if non-empty) gives a dihedral index per sample.
template <typename T>
Batch<T> make_batch(const Dataset<T>& data, std::span<const int> indices, std::span<const int> transforms = {});

/// Batch for training step `step`: indices drawn with replacement from a stream keyed
/// by (seed, step); with `augment`, a random dihedral transform per sample.
template <typename T>
Batch<T> sample_batch(const Dataset<T>& data, int batch, std::uint64_t seed, std::uint64_t step, bool augment);

}  // namespace nmd
