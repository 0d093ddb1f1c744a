#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "nmd/model.hpp"
#include "nmd/noise_model.hpp"

namespace nmd {

/// 10 log10(peak^2 / MSE); +inf when the images are identical.
double psnr(const Tensor<double>& a, const Tensor<double>& b, double peak = 1.0);

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double peak = 1.0;
};

/// Mean SSIM over all valid window positions of each N x C plane, averaged over planes.
/// Accepts rank-4 tensors (or rank 3, read as C x H x W). Throws ShapeError if a plane
/// is smaller than the window.
double ssim(const Tensor<double>& a, const Tensor<double>& b, const SsimOptions& opts = {});

/// Normalized 1-D Gaussian taps.
std::vector<double> gaussian_window(int size, double sigma);

Tensor<double> clip01(const Tensor<double>& x);

struct ImageMetrics {
  int image = 0;
  int profile_id = 0;
  double psnr_noisy = 0.0;
  double psnr_denoised = 0.0;
  double ssim_noisy = 0.0;
  double ssim_denoised = 0.0;
};

struct MetricSummary {
  int count = 0;
  double psnr_noisy = 0.0;
  double psnr_denoised = 0.0;
  double ssim_noisy = 0.0;
  double ssim_denoised = 0.0;
};

struct MetricReport {
  Layout layout = Layout::Rgb;
  double peak = 1.0;
  std::vector<ImageMetrics> images;
  MetricSummary overall;
  std::map<int, MetricSummary> per_profile;

  /// Recomputes overall and per-profile means from `images`.
  void summarize();
  std::string table() const;
  std::string csv() const;
  /// Writes report.txt and report.csv.
  void write(const std::filesystem::path& dir) const;
};

/// Metrics of one image; all inputs are clipped to [0, 1] first.
ImageMetrics score_image(const Tensor<double>& clean, const Tensor<double>& noisy, const Tensor<double>& denoised);

/// Runs the generator in eval mode over every sample and scores noisy vs denoised.
/// Throws std::invalid_argument when the dataset lacks noisy inputs or clean references.
template <typename T>
MetricReport evaluate(Generator<T>& gen, const Dataset<T>& data, int batch = 16);

/// Denoised output (eval mode) for one stacked batch of noisy images.
template <typename T>
Tensor<T> run_denoiser(Generator<T>& gen, const Tensor<T>& noisy, const Tensor<T>& cond);

/// "inf" for infinities, fixed precision otherwise.
std::string format_db(double v);

}  // namespace nmd
