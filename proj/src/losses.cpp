#include "nmd/losses.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace nmd {

void LossWeights::tie_content_grad(bool tie_to_content) {
  content_grad = 0.5 * (tie_to_content ? content : rec);
}

void LossWeights::validate() const {
  const std::pair<const char*, double> all[] = {{"lambda_adv", adversarial},
                                                {"lambda_c", content}, {"lambda_cg", content_grad},
                                                {"lambda_pi", feature}, {"lambda_ae", rec},
                                                {"lambda_l", latent},   {"lambda_d", decov}};
  for (const auto& [name, v] : all) {
    if (!std::isfinite(v) || v < 0.0) {
      throw std::invalid_argument(std::string("loss weight ") + name + " must be finite and non-negative");
    }
  }
}

std::string LossReport::csv_header() { return "step,d_loss,adv,content,feature,rec,latent,decov,total"; }

std::string LossReport::csv_row() const {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%llu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", static_cast<unsigned long long>(step),
                d_loss, adv, content, feature, rec, latent, decov, total);
  return buf;
}

double weighted_total(const LossReport& r, const LossWeights& w) {
  return w.adversarial * r.adv + r.content + w.feature * r.feature + w.rec * r.rec + w.latent * r.latent + w.decov * r.decov;
}

template <typename T>
Var<T> content_loss(Var<T> denoised, Var<T> clean, double lambda_c, double lambda_cg) {
  require_same_shape(denoised.shape(), clean.shape(), "content_loss");
  Var<T> pixel = scale(mean(abs(sub(denoised, clean))), static_cast<T>(lambda_c));
  if (lambda_cg == 0.0) return pixel;
  Var<T> gx = mean(abs(sub(diff_x(denoised), diff_x(clean))));
  Var<T> gy = mean(abs(sub(diff_y(denoised), diff_y(clean))));
  return add(pixel, scale(add(gx, gy), static_cast<T>(lambda_cg)));
}

template <typename T>
Var<T> rec_loss(Var<T> v_hat, Var<T> v) {
  require_same_shape(v_hat.shape(), v.shape(), "rec_loss");
  return mean(square(sub(v_hat, v)));
}

template <typename T>
Var<T> latent_loss(Var<T> latent_reg, Var<T> latent_rec) {
  require_same_shape(latent_reg.shape(), latent_rec.shape(), "latent_loss");
  return mean(square(sub(latent_reg, latent_rec)));
}

template <typename T>
Var<T> feature_matching_loss(Var<T> fake, Var<T> real) {
  require_same_shape(fake.shape(), real.shape(), "feature_matching_loss");
  return mean(abs(sub(fake, detach(real))));
}

template <typename T>
Var<T> decov_loss(Var<T> activations) {
  return decov(activations);
}

template <typename T>
Var<T> discriminator_loss(Var<T> logits_real, Var<T> logits_fake) {
  require_same_shape(logits_real.shape(), logits_fake.shape(), "discriminator_loss");
  return add(mean(softplus(scale(logits_real, T{-1}))), mean(softplus(logits_fake)));
}

template <typename T>
Var<T> generator_adv_loss(Var<T> logits_fake) {
  return mean(softplus(scale(logits_fake, T{-1})));
}

template <typename T>
AdversarialLosses<T> adversarial_losses(Var<T> logits_real, Var<T> logits_fake) {
  return {discriminator_loss(logits_real, logits_fake), generator_adv_loss(logits_fake)};
}

template <typename T>
Var<T> total_loss(const LossTerms<T>& terms, const LossWeights& w, LossReport& report) {
  Var<T> total;
  Var<T> any;
  auto take = [&](const char* name, Var<T> term, double weight, double& slot) {
    slot = 0.0;
    if (!term.valid()) return;
    const double v = static_cast<double>(term.value()[0]);
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite loss term: ") + name);
    slot = v;
    any = term;
    if (weight == 0.0) return;
    Var<T> part = weight == 1.0 ? term : scale(term, static_cast<T>(weight));
    total = total.valid() ? add(total, part) : part;
  };
  take("adv", terms.adv, w.adversarial, report.adv);
  take("content", terms.content, 1.0, report.content);
  take("feature", terms.feature, w.feature, report.feature);
  take("rec", terms.rec, w.rec, report.rec);
  take("latent", terms.latent, w.latent, report.latent);
  double decov_sum = 0.0;
  for (const auto& d : terms.decov) {
    double v = 0.0;
    take("decov", d, w.decov, v);
    decov_sum += v;
  }
  report.decov = decov_sum;
  report.total = weighted_total(report, w);
  if (!std::isfinite(report.total)) throw NumericError("non-finite loss term: total");
  if (!any.valid()) throw std::invalid_argument("total_loss: no loss terms present");
  if (!total.valid()) total = scale(any, T{0});
  return total;
}

#define NMD_INSTANTIATE_LOSSES(T)                                                      \
  template Var<T> content_loss(Var<T>, Var<T>, double, double);                        \
  template Var<T> rec_loss(Var<T>, Var<T>);                                            \
  template Var<T> latent_loss(Var<T>, Var<T>);                                         \
  template Var<T> feature_matching_loss(Var<T>, Var<T>);                               \
  template Var<T> decov_loss(Var<T>);                                                  \
  template Var<T> discriminator_loss(Var<T>, Var<T>);                                  \
  template Var<T> generator_adv_loss(Var<T>);                                          \
  template AdversarialLosses<T> adversarial_losses(Var<T>, Var<T>);                    \
  template Var<T> total_loss(const LossTerms<T>&, const LossWeights&, LossReport&);

NMD_INSTANTIATE_LOSSES(float)
NMD_INSTANTIATE_LOSSES(double)

}  // namespace nmd
