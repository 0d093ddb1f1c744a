#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "nmd/rng.hpp"
#include "nmd/tensor.hpp"

namespace nmd {

/// Read/shot noise parameters of one sensor, in normalized intensity units.
/// Per-pixel variance is sigma_r^2 + sigma_s * y.
struct CameraProfile {
  int id = 0;
  double sigma_r = 0.0;
  double sigma_s = 0.0;

  double variance(double y) const { return sigma_r * sigma_r + sigma_s * y; }
  /// Throws std::invalid_argument on negative or non-finite parameters.
  void validate() const;
};

/// Parses "sr=0.02,ss=0.01[,id=3]". Unspecified id defaults to `default_id`.
CameraProfile parse_profile(const std::string& spec, int default_id);

/// Draws `count` profiles with log-uniform sigma_r in [0.005, 0.05] and
/// sigma_s in [0.001, 0.02].
std::vector<CameraProfile> random_profiles(int count, std::uint64_t seed);

/// Per-pixel condition channels: [sigma_r, sigma_s, one-hot(id, K)].
/// Empty (0 channels) in blind mode.
template <typename T>
struct ConditionMaps {
  Tensor<T> maps;

  bool blind() const { return maps.empty(); }
  int channels() const { return maps.empty() ? 0 : maps.shape().c(); }
};

template <typename T>
ConditionMaps<T> build_condition(const CameraProfile& profile, int num_cameras, int height, int width,
                                 bool blind);

/// s = y + n with n ~ N(0, sigma_r^2 + sigma_s * y), one counter-based draw per
/// element keyed on (seed, linear index). Not clipped.
template <typename T>
Tensor<T> sample_noise(const Tensor<T>& clean, const CameraProfile& profile, std::uint64_t seed);

/// N x 1 x 2H x 2W mosaic -> N x 4 x H x W with channels R, G, G, B taken from
/// each 2x2 tile (top-left, top-right, bottom-left, bottom-right).
template <typename T>
Tensor<T> pack_bayer(const Tensor<T>& mosaic);
template <typename T>
Tensor<T> unpack_bayer(const Tensor<T>& packed);

/// Sign-preserving x^(1/2.2).
template <typename T>
Tensor<T> apply_gamma(const Tensor<T>& linear);

enum class Layout { Rgb, Bayer };
std::string to_string(Layout l);
Layout parse_layout(const std::string& s);

/// Procedural clean image in [0,1]: gradient, rectangles, a sinusoid and
/// smooth value-noise texture. Returns 1 x channels x height x width.
Tensor<double> render_scene(int channels, int height, int width, RngStream& rng);

template <typename T>
struct PairedSample {
  Tensor<T> clean;     // y
  Tensor<T> noisy;     // s; empty when the dataset carries no noisy inputs
  Tensor<T> residual;  // v = s - y
  ConditionMaps<T> cond;
  int profile_id = 0;
  int source_tag = 0;
  int index = 0;
};

/// Builds one paired sample; `clean` is 1 x C x H x W in [0,1].
template <typename T>
PairedSample<T> make_sample(const Tensor<T>& clean, const CameraProfile& profile, int num_cameras,
                            std::uint64_t seed, bool srgb);

struct SynthOptions {
  int count = 64;
  int patch = 32;
  Layout layout = Layout::Rgb;
  std::vector<CameraProfile> profiles;
  int sources = 1;
  std::uint64_t seed = 0;
  bool srgb = false;
  std::filesystem::path out_dir;
};

/// Writes y/s/v/c NMT1 files per sample plus manifest.txt and profiles.txt.
/// Profiles are assigned round-robin; source tag is profile position mod sources.
void synth_dataset(const SynthOptions& opts);

/// In-memory dataset; sample order follows the manifest.
template <typename T>
struct Dataset {
  std::vector<PairedSample<T>> samples;
  std::vector<CameraProfile> profiles;
  Layout layout = Layout::Rgb;

  int num_cameras() const { return static_cast<int>(profiles.size()); }
  bool has_noisy() const;
  const CameraProfile& profile(int id) const;
};

/// Loads a directory written by synth_dataset. Missing s_*.nmt files are
/// tolerated (noisy left empty); missing y or v files are errors.
template <typename T>
Dataset<T> load_dataset(const std::filesystem::path& dir);

}  // namespace nmd
