#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "nmd/autodiff.hpp"

namespace nmd {

/// Named tensors plus a step counter and a config echo. On disk: a directory
/// holding manifest.txt and one NMT1 file per tensor.
template <typename T>
struct Checkpoint {
  std::uint64_t step = 0;
  std::map<std::string, std::string> config;
  std::vector<std::pair<std::string, Tensor<T>>> tensors;

  const Tensor<T>* find(const std::string& name) const;
  void add_params(const ParamSet<T>& params, const std::string& prefix = "");
  /// Copies stored values into `params`. Every parameter must be present with a matching shape.
  void restore_params(ParamSet<T>& params, const std::string& prefix = "") const;
};

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const Checkpoint<T>& ckpt);
/// Throws std::runtime_error (or FormatError for bad tensor files) on a malformed checkpoint.
template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& dir);

}  // namespace nmd
