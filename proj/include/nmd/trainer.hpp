#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "nmd/batch.hpp"
#include "nmd/checkpoint.hpp"
#include "nmd/gradcheck.hpp"
#include "nmd/losses.hpp"
#include "nmd/metrics.hpp"
#include "nmd/model.hpp"

namespace nmd {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam with moments stored per parameter name.
template <typename T>
class Adam {
 public:
  using Mask = std::function<bool(const Parameter<T>&)>;

  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  /// Updates every parameter accepted by `mask` (all when empty). Returns false and
  /// leaves parameters and state untouched if any selected gradient is non-finite.
  bool step(ParamSet<T>& params, double lr, const Mask& mask = {});

  std::uint64_t t() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

  void save(Checkpoint<T>& ckpt, const std::string& prefix) const;
  void load(const Checkpoint<T>& ckpt, const std::string& prefix);

 private:
  struct Moments {
    Tensor<T> m;
    Tensor<T> v;
  };
  AdamConfig cfg_;
  std::uint64_t t_ = 0;
  std::map<std::string, Moments> state_;
};

enum class TrainMode { Full, RecOnly, RegFinetune };
std::string to_string(TrainMode m);
TrainMode parse_train_mode(const std::string& s);

struct TrainConfig {
  int batch = 16;
  double lr = 1e-3;
  int halve_after = 2000;
  int steps = 3000;
  std::uint64_t seed = 0;
  bool augment = true;
  /// Ablations.
  bool no_rec = false;
  bool no_residual = false;
  bool standard_discriminator = false;
  /// Skip discriminator updates.
  bool freeze_discriminator = false;
  TrainMode mode = TrainMode::Full;
  /// Parameter names or name prefixes held fixed in reg_finetune mode.
  std::vector<std::string> freeze;
  int log_every = 1;
  /// 0 writes only the final checkpoint.
  int checkpoint_every = 0;
  LossWeights weights;
  /// "ae": lambda_cg = 0.5 lambda_ae; "content": 0.5 lambda_c; "none": lambda_cg as given.
  std::string cg_tie = "ae";

  void validate() const;
  /// lr0 up to and including `halve_after`, lr0 / 2 afterwards.
  double lr_at(std::uint64_t step) const { return step <= static_cast<std::uint64_t>(halve_after) ? lr : lr / 2; }
  /// Copies the ablation switches into the network geometry.
  void apply_to(NetConfig& net) const;
};

/// Flat key/value view of a network, training and loss configuration.
KeyValues to_key_values(const NetConfig& net, const TrainConfig& train);
/// Applies `kv` on top of the given configs. Unknown keys and malformed values throw ConfigError
/// and leave both configs unchanged.
void apply_key_values(const KeyValues& kv, NetConfig& net, TrainConfig& train);

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Which generator terms to assemble; All is the exact sum of RegOnly and RecOnly.
enum class TermSet { All, RegOnly, RecOnly };

/// Generator objective on an already computed Reg forward, with the discriminator frozen.
template <typename T>
Var<T> generator_loss(Tape<T>& tape, Generator<T>& gen, Discriminator<T>& disc, const Batch<T>& batch,
                      const RegOutputs<T>& reg, const TrainConfig& cfg, const ForwardOptions& fwd, LossReport& report,
                      TermSet terms = TermSet::All);

template <typename T>
class Trainer {
 public:
  Trainer(NetConfig net, TrainConfig cfg);

  Generator<T>& generator() { return gen_; }
  Discriminator<T>& discriminator() { return disc_; }
  const NetConfig& net_config() const { return gen_.config(); }
  const TrainConfig& config() const { return cfg_; }
  std::uint64_t step_count() const { return step_; }

  /// One optimization step on the batch drawn for the next step index.
  LossReport step(const Dataset<T>& data);
  LossReport step_on(const Batch<T>& batch);

  /// Runs `steps` steps appending to train_log.csv in `out_dir` and writing
  /// ckpt_%06d/ directories. Returns the reports.
  std::vector<LossReport> train(const Dataset<T>& data, const std::filesystem::path& out_dir,
                                const std::function<void(const LossReport&)>& on_step = {});

  Checkpoint<T> checkpoint() const;
  void save(const std::filesystem::path& dir) const;
  /// Rebuilds a trainer (model, optimizer state and step counter) from a checkpoint directory.
  static Trainer load(const std::filesystem::path& dir);
  /// Replaces model weights (not optimizer state) with those from a checkpoint.
  void load_weights(const Checkpoint<T>& ckpt);

  /// Changes the step budget, e.g. to extend a resumed run.
  void set_steps(int steps);

  /// Switches mode (and the reg_finetune freeze list) for subsequent steps.
  void set_mode(TrainMode mode, std::vector<std::string> freeze = {});

  /// Parameters a generator step may update in the current mode.
  bool updates(const Parameter<T>& p) const;
  /// Validates the freeze list against parameter names.
  void check_freeze_list() const;

 private:
  LossReport full_step(const Batch<T>& batch);
  LossReport rec_only_step(const Batch<T>& batch);
  std::uint64_t noise_key() const;

  TrainConfig cfg_;
  Generator<T> gen_;
  Discriminator<T> disc_;
  Adam<T> adam_g_;
  Adam<T> adam_d_;
  std::uint64_t step_ = 0;
};

/// Rec subnet pretraining on (v, y, c) only; the dataset may lack noisy inputs.
template <typename T>
std::vector<LossReport> pretrain_rec(Trainer<T>& trainer, const Dataset<T>& data, int steps);

/// Fine-tunes the Reg path on a small paired set; `freeze` names parameters (or prefixes) to keep fixed.
template <typename T>
std::vector<LossReport> finetune_reg(Trainer<T>& trainer, const Dataset<T>& data, int steps,
                                     const std::vector<std::string>& freeze);

struct AblationRow {
  std::string variant;
  std::vector<double> psnr;  // per seed
  std::vector<double> ssim;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;
};

struct AblationTable {
  std::vector<std::uint64_t> seeds;
  double noisy_psnr = 0.0;
  double noisy_ssim = 0.0;
  std::vector<AblationRow> rows;

  const AblationRow& row(const std::string& variant) const;
  /// Appends one seed's result to the row for `variant` (created on first use) and refreshes its means.
  void add(const std::string& variant, const MetricReport& report);
  std::string text() const;
  std::string csv() const;
};

/// The four ablation variants in table order.
std::vector<std::string> ablation_variants();
/// Applies a variant name to a training config.
void apply_variant(const std::string& variant, TrainConfig& cfg);

/// Trains one variant with one seed for cfg.steps steps and scores it on `test`.
MetricReport ablation_run(const Dataset<float>& train, const Dataset<float>& test, const NetConfig& net,
                          const TrainConfig& cfg, const std::string& variant, std::uint64_t seed);

/// Trains every variant for every seed and evaluates on `test`.
AblationTable ablation_suite(const Dataset<float>& train, const Dataset<float>& test, const NetConfig& net,
                             const TrainConfig& cfg, const std::vector<std::uint64_t>& seeds,
                             const std::function<void(const std::string&)>& progress = {});

/// Finite-difference check of generator + losses w.r.t. every generator parameter on a tiny
/// f64 network. Batch 1 leaves out the decorrelation terms, which need two samples.
GradcheckReport gradcheck_composed(int batch, double tolerance, std::uint64_t seed, std::size_t max_coords = 0);

}  // namespace nmd
