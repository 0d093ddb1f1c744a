#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "nmd/autodiff.hpp"
#include "nmd/ops.hpp"

namespace nmd {

using KeyValues = std::map<std::string, std::string>;

/// Network geometry. Encoder level l (1..depth) runs at 1/2^l resolution with
/// min(base_channels * 2^(l-1), latent_channels) channels. Level 0 is an optional
/// stride-1 layer with base_channels, built only when it is a skip source.
struct NetConfig {
  int image_channels = 3;
  int num_cameras = 2;
  bool blind = false;
  int patch = 32;
  int base_channels = 16;
  int depth = 4;
  int latent_channels = 128;
  /// Encoder levels whose outputs are concatenated into the decoder at the same resolution.
  std::vector<int> skips = {0, 3};
  int num_sources = 1;
  /// Train-time dropout rate in the two deepest decoder layers.
  double dropout = 0.1;
  /// Concatenate a uniform noise tensor to the latent instead of relying on dropout alone.
  bool explicit_z = false;
  int z_channels = 8;
  int disc_channels = 4;
  /// false: the Reg path predicts the clean image directly.
  bool residual_learning = true;
  /// false: the discriminator judges images (denoised vs clean) instead of residuals.
  bool residual_discriminator = true;

  int cond_channels() const { return blind ? 0 : 2 + num_cameras; }
  int level_channels(int level) const;
  int latent_size() const { return patch >> depth; }
  bool has_skip(int level) const;
  void validate() const;

  /// Geometry of the full-size network: 64px patches, 2x2x1024 latent, 11 encoder/decoder convs.
  static NetConfig full_scale();
};

KeyValues to_key_values(const NetConfig& cfg);
/// Reads the keys written by to_key_values; missing keys keep their defaults.
NetConfig net_config_from(const KeyValues& kv);

struct ForwardOptions {
  bool train = false;
  /// Keys dropout masks and explicit z draws.
  std::uint64_t noise_key = 0;
};

template <typename T>
struct RegOutputs {
  Var<T> residual;  // predicted v
  Var<T> latent;
  Var<T> denoised;  // s - residual (or the direct prediction without residual learning)
};

template <typename T>
struct RecOutputs {
  Var<T> residual;  // reconstructed v
  Var<T> latent;
};

/// Backbone, Reg encoder, one Rec encoder per noise source, and a single
/// decoder shared by every path.
template <typename T>
class Generator {
 public:
  explicit Generator(NetConfig cfg);

  /// He-normal kernels, zero biases, zero final decoder conv.
  void init(std::uint64_t seed);

  const NetConfig& config() const { return cfg_; }
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }

  Var<T> backbone_forward(Tape<T>& tape, Var<T> noisy, Var<T> cond);
  RegOutputs<T> reg_forward(Tape<T>& tape, Var<T> noisy, Var<T> cond, Var<T> features,
                            const ForwardOptions& opts = {});
  RecOutputs<T> rec_forward(Tape<T>& tape, Var<T> residual, Var<T> clean, Var<T> cond, int source,
                            const ForwardOptions& opts = {});
  /// backbone + reg_forward.
  RegOutputs<T> denoise(Tape<T>& tape, Var<T> noisy, Var<T> cond, const ForwardOptions& opts = {});

  /// The decoder parameters each path reads. Identical storage for every path.
  std::vector<const Parameter<T>*> decoder_for_reg() const;
  std::vector<const Parameter<T>*> decoder_for_rec(int source) const;
  /// Parameter-name prefix of the Rec encoder for `source`.
  static std::string rec_prefix(int source);

  /// Builds a forward with U-Net shortcuts removed (witness for skip tests).
  void set_skips_enabled(bool on) { skips_enabled_ = on; }

 private:
  struct EncoderOut {
    std::vector<Var<T>> levels;  // index l holds level l; index 0 is the input unless level 0 is a skip
    Var<T> latent;
  };

  EncoderOut encode(Tape<T>& tape, const std::string& prefix, Var<T> input);
  Var<T> decode(Tape<T>& tape, const EncoderOut& enc, const ForwardOptions& opts, std::uint64_t path);
  Var<T> conv(Tape<T>& tape, const std::string& name, Var<T> x, int stride);
  void check_image(Var<T> x, int channels, const char* what) const;
  Var<T> with_cond(std::initializer_list<Var<T>> xs, Var<T> cond);

  NetConfig cfg_;
  ParamSet<T> params_;
  bool skips_enabled_ = true;
};

template <typename T>
struct DiscOutputs {
  Var<T> logits;    // N x 1 x H/8 x W/8
  Var<T> features;  // penultimate layer
};

/// Patch discriminator over [candidate, noisy, cond].
template <typename T>
class Discriminator {
 public:
  explicit Discriminator(NetConfig cfg);
  void init(std::uint64_t seed);

  const NetConfig& config() const { return cfg_; }
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }

  /// With `frozen`, parameters enter the tape as constants.
  DiscOutputs<T> forward(Tape<T>& tape, Var<T> candidate, Var<T> noisy, Var<T> cond, bool frozen = false);

 private:
  NetConfig cfg_;
  ParamSet<T> params_;
};

/// He-normal init (std sqrt(2/fan_in)) of every ".w" parameter with a
/// counter-based stream per parameter; biases zero.
template <typename T>
void he_init(ParamSet<T>& params, std::uint64_t seed);

}  // namespace nmd
