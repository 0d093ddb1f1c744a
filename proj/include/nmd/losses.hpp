#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nmd/ops.hpp"

namespace nmd {

struct LossWeights {
  double adversarial = 1.0;
  double content = 100.0;       // lambda_c
  double content_grad = 10.0;   // lambda_cg
  double feature = 10.0;        // lambda_pi
  double rec = 20.0;            // lambda_ae
  double latent = 0.16;         // lambda_l
  double decov = 0.9;           // lambda_d

  /// lambda_cg = 0.5 * lambda_ae, or 0.5 * lambda_c with `tie_to_content`.
  void tie_content_grad(bool tie_to_content);
  /// Throws std::invalid_argument on negative or non-finite weights.
  void validate() const;
  /// The Rec path contributes nothing when both of its weights are zero.
  bool rec_active() const { return rec != 0.0 || latent != 0.0; }
};

/// Unweighted term values of one generator step, the discriminator loss, and the weighted total.
struct LossReport {
  std::uint64_t step = 0;
  double d_loss = 0.0;
  double adv = 0.0;
  double content = 0.0;  // already includes lambda_c and lambda_cg
  double feature = 0.0;
  double rec = 0.0;
  double latent = 0.0;
  double decov = 0.0;  // summed over layers
  double total = 0.0;

  static std::string csv_header();
  std::string csv_row() const;
};

/// lambda_adv*adv + content + lambda_pi*feature + lambda_ae*rec + lambda_l*latent + lambda_d*decov.
double weighted_total(const LossReport& r, const LossWeights& w);

template <typename T>
Var<T> content_loss(Var<T> denoised, Var<T> clean, double lambda_c, double lambda_cg);
template <typename T>
Var<T> rec_loss(Var<T> v_hat, Var<T> v);
template <typename T>
Var<T> latent_loss(Var<T> latent_reg, Var<T> latent_rec);
/// Mean |fake - real|; `real` is detached.
template <typename T>
Var<T> feature_matching_loss(Var<T> fake, Var<T> real);
/// Decorrelation penalty of the batch flattened to N x D. Requires N >= 2.
template <typename T>
Var<T> decov_loss(Var<T> activations);

template <typename T>
struct AdversarialLosses {
  Var<T> d_loss;  // mean softplus(-real) + mean softplus(fake)
  Var<T> g_loss;  // mean softplus(-fake)
};
template <typename T>
AdversarialLosses<T> adversarial_losses(Var<T> logits_real, Var<T> logits_fake);
template <typename T>
Var<T> discriminator_loss(Var<T> logits_real, Var<T> logits_fake);
template <typename T>
Var<T> generator_adv_loss(Var<T> logits_fake);

/// Generator terms of one step. Invalid Vars are absent and contribute exactly zero.
template <typename T>
struct LossTerms {
  Var<T> adv;
  Var<T> content;
  Var<T> feature;
  Var<T> rec;
  Var<T> latent;
  std::vector<Var<T>> decov;
};

/// Weighted sum as a differentiable scalar; fills the term fields of `report`.
/// Throws NumericError naming the first non-finite term.
template <typename T>
Var<T> total_loss(const LossTerms<T>& terms, const LossWeights& w, LossReport& report);

}  // namespace nmd
