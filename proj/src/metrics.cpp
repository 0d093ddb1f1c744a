#include "nmd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "nmd/batch.hpp"

namespace nmd {

double psnr(const Tensor<double>& a, const Tensor<double>& b, double peak) {
  require_same_shape(a.shape(), b.shape(), "psnr");
  if (!(peak > 0.0)) throw std::invalid_argument("psnr: peak must be positive");
  double se = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> g(static_cast<std::size_t>(size));
  const double c = (size - 1) / 2.0;
  for (int i = 0; i < size; ++i) g[static_cast<std::size_t>(i)] = std::exp(-(i - c) * (i - c) / (2.0 * sigma * sigma));
  const double s = std::accumulate(g.begin(), g.end(), 0.0);
  for (auto& v : g) v /= s;
  return g;
}

namespace {

// Valid-mode separable filter of an h x w plane.
void filter_valid(const double* src, int h, int w, const std::vector<double>& g, std::vector<double>& tmp,
                  std::vector<double>& out) {
  const int k = static_cast<int>(g.size());
  const int ow = w - k + 1, oh = h - k + 1;
  tmp.assign(static_cast<std::size_t>(h * ow), 0.0);
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < ow; ++j) {
      double s = 0.0;
      for (int t = 0; t < k; ++t) s += g[static_cast<std::size_t>(t)] * src[i * w + j + t];
      tmp[static_cast<std::size_t>(i * ow + j)] = s;
    }
  }
  out.assign(static_cast<std::size_t>(oh * ow), 0.0);
  for (int i = 0; i < oh; ++i) {
    for (int j = 0; j < ow; ++j) {
      double s = 0.0;
      for (int t = 0; t < k; ++t) s += g[static_cast<std::size_t>(t)] * tmp[static_cast<std::size_t>((i + t) * ow + j)];
      out[static_cast<std::size_t>(i * ow + j)] = s;
    }
  }
}

}  // namespace

double ssim(const Tensor<double>& a, const Tensor<double>& b, const SsimOptions& opts) {
  require_same_shape(a.shape(), b.shape(), "ssim");
  const Shape& s = a.shape();
  int planes, h, w;
  if (s.rank() == 4) {
    planes = s.n() * s.c();
    h = s.h();
    w = s.w();
  } else if (s.rank() == 3) {
    planes = s[0];
    h = s[1];
    w = s[2];
  } else {
    throw ShapeError("ssim: expected a rank 3 or 4 tensor, got " + s.str());
  }
  if (h < opts.window || w < opts.window) {
    throw ShapeError("ssim: image " + s.str() + " is smaller than the " + std::to_string(opts.window) + "x" +
                     std::to_string(opts.window) + " window");
  }
  const auto g = gaussian_window(opts.window, opts.sigma);
  const double c1 = (opts.k1 * opts.peak) * (opts.k1 * opts.peak);
  const double c2 = (opts.k2 * opts.peak) * (opts.k2 * opts.peak);
  const std::size_t plane = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  std::vector<double> aa(plane), bb(plane), ab(plane), tmp, ma, mb, maa, mbb, mab;
  double total = 0.0;
  for (int p = 0; p < planes; ++p) {
    const double* pa = a.ptr() + p * plane;
    const double* pb = b.ptr() + p * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      aa[i] = pa[i] * pa[i];
      bb[i] = pb[i] * pb[i];
      ab[i] = pa[i] * pb[i];
    }
    filter_valid(pa, h, w, g, tmp, ma);
    filter_valid(pb, h, w, g, tmp, mb);
    filter_valid(aa.data(), h, w, g, tmp, maa);
    filter_valid(bb.data(), h, w, g, tmp, mbb);
    filter_valid(ab.data(), h, w, g, tmp, mab);
    double acc = 0.0;
    for (std::size_t i = 0; i < ma.size(); ++i) {
      const double mua = ma[i], mub = mb[i];
      const double va = maa[i] - mua * mua, vb = mbb[i] - mub * mub, cov = mab[i] - mua * mub;
      acc += ((2.0 * mua * mub + c1) * (2.0 * cov + c2)) / ((mua * mua + mub * mub + c1) * (va + vb + c2));
    }
    total += acc / static_cast<double>(ma.size());
  }
  return total / planes;
}

Tensor<double> clip01(const Tensor<double>& x) {
  Tensor<double> out = x;
  for (auto& v : out.data()) v = std::clamp(v, 0.0, 1.0);
  return out;
}

ImageMetrics score_image(const Tensor<double>& clean, const Tensor<double>& noisy, const Tensor<double>& denoised) {
  const auto y = clip01(clean), s = clip01(noisy), d = clip01(denoised);
  ImageMetrics m;
  m.psnr_noisy = psnr(s, y);
  m.psnr_denoised = psnr(d, y);
  m.ssim_noisy = ssim(s, y);
  m.ssim_denoised = ssim(d, y);
  return m;
}

void MetricReport::summarize() {
  auto fold = [](MetricSummary& sum, const ImageMetrics& m) {
    ++sum.count;
    sum.psnr_noisy += m.psnr_noisy;
    sum.psnr_denoised += m.psnr_denoised;
    sum.ssim_noisy += m.ssim_noisy;
    sum.ssim_denoised += m.ssim_denoised;
  };
  auto finish = [](MetricSummary& sum) {
    if (sum.count == 0) return;
    const double n = sum.count;
    sum.psnr_noisy /= n;
    sum.psnr_denoised /= n;
    sum.ssim_noisy /= n;
    sum.ssim_denoised /= n;
  };
  overall = {};
  per_profile.clear();
  for (const auto& m : images) {
    fold(overall, m);
    fold(per_profile[m.profile_id], m);
  }
  finish(overall);
  for (auto& [id, sum] : per_profile) finish(sum);
}

std::string format_db(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

std::string MetricReport::table() const {
  std::ostringstream os;
  os << "layout " << to_string(layout) << ", peak " << peak << ", " << images.size() << " images\n";
  char line[160];
  std::snprintf(line, sizeof line, "%-10s %6s %12s %12s %10s %10s\n", "profile", "count", "psnr_noisy",
                "psnr_denoised", "ssim_noisy", "ssim_den");
  os << line;
  auto row = [&](const std::string& label, const MetricSummary& s) {
    std::snprintf(line, sizeof line, "%-10s %6d %12s %12s %10.4f %10.4f\n", label.c_str(), s.count,
                  format_db(s.psnr_noisy).c_str(), format_db(s.psnr_denoised).c_str(), s.ssim_noisy, s.ssim_denoised);
    os << line;
  };
  for (const auto& [id, s] : per_profile) row(std::to_string(id), s);
  row("all", overall);
  return os.str();
}

std::string MetricReport::csv() const {
  std::ostringstream os;
  os << "# layout=" << to_string(layout) << " peak=" << peak << '\n';
  os << "image,profile_id,psnr_noisy,psnr_denoised,ssim_noisy,ssim_denoised\n";
  char line[200];
  for (const auto& m : images) {
    std::snprintf(line, sizeof line, "%d,%d,%s,%s,%.9f,%.9f\n", m.image, m.profile_id,
                  std::isinf(m.psnr_noisy) ? "inf" : std::to_string(m.psnr_noisy).c_str(),
                  std::isinf(m.psnr_denoised) ? "inf" : std::to_string(m.psnr_denoised).c_str(), m.ssim_noisy,
                  m.ssim_denoised);
    os << line;
  }
  return os.str();
}

void MetricReport::write(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "report.txt") << table();
  std::ofstream(dir / "report.csv") << csv();
}

template <typename T>
Tensor<T> run_denoiser(Generator<T>& gen, const Tensor<T>& noisy, const Tensor<T>& cond) {
  Tape<T> tape;
  Var<T> c = gen.config().blind ? Var<T>{} : tape.constant(cond);
  return gen.denoise(tape, tape.constant(noisy), c).denoised.value();
}

template <typename T>
MetricReport evaluate(Generator<T>& gen, const Dataset<T>& data, int batch) {
  if (data.samples.empty()) throw std::invalid_argument("evaluate: dataset is empty");
  if (!data.has_noisy()) throw std::invalid_argument("evaluate: dataset has no noisy inputs");
  MetricReport rep;
  rep.layout = data.layout;
  const int n = static_cast<int>(data.samples.size());
  for (int start = 0; start < n; start += batch) {
    std::vector<int> idx;
    for (int i = start; i < std::min(n, start + batch); ++i) idx.push_back(i);
    const Batch<T> b = make_batch(data, idx);
    const Tensor<T> den = run_denoiser(gen, b.noisy, b.cond);
    const std::size_t per = den.size() / idx.size();
    const Shape one{1, den.shape().c(), den.shape().h(), den.shape().w()};
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const auto& s = data.samples[static_cast<std::size_t>(idx[k])];
      if (s.clean.empty()) throw std::invalid_argument("evaluate: sample " + std::to_string(s.index) + " has no clean reference");
      Tensor<double> d(one);
      for (std::size_t i = 0; i < per; ++i) d[i] = static_cast<double>(den[k * per + i]);
      ImageMetrics m = score_image(s.clean.template cast<double>(), s.noisy.template cast<double>(), d);
      m.image = s.index;
      m.profile_id = s.profile_id;
      rep.images.push_back(m);
    }
  }
  rep.summarize();
  return rep;
}

template Tensor<float> run_denoiser(Generator<float>&, const Tensor<float>&, const Tensor<float>&);
template Tensor<double> run_denoiser(Generator<double>&, const Tensor<double>&, const Tensor<double>&);
template MetricReport evaluate(Generator<float>&, const Dataset<float>&, int);
template MetricReport evaluate(Generator<double>&, const Dataset<double>&, int);

}  // namespace nmd
