#include "nmd/noise_model.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "nmd/tensor_io.hpp"

namespace nmd {

void CameraProfile::validate() const {
  if (!std::isfinite(sigma_r) || !std::isfinite(sigma_s)) {
    throw std::invalid_argument("camera profile: noise parameters must be finite");
  }
  if (sigma_r < 0.0 || sigma_s < 0.0) {
    throw std::invalid_argument("camera profile: sigma_r and sigma_s must be nonnegative (got sr=" +
                                std::to_string(sigma_r) + ", ss=" + std::to_string(sigma_s) + ")");
  }
  if (id < 0) throw std::invalid_argument("camera profile: id must be nonnegative");
}

CameraProfile parse_profile(const std::string& spec, int default_id) {
  CameraProfile p;
  p.id = default_id;
  bool have_sr = false;
  bool have_ss = false;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("profile '" + spec + "': expected key=value");
    const std::string key = item.substr(0, eq);
    const std::string val = item.substr(eq + 1);
    std::size_t used = 0;
    double d = 0.0;
    try {
      d = std::stod(val, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != val.size() || val.empty()) {
      throw std::invalid_argument("profile '" + spec + "': '" + val + "' is not a number");
    }
    if (key == "sr") {
      p.sigma_r = d;
      have_sr = true;
    } else if (key == "ss") {
      p.sigma_s = d;
      have_ss = true;
    } else if (key == "id") {
      p.id = static_cast<int>(d);
    } else {
      throw std::invalid_argument("profile '" + spec + "': unknown key '" + key + "'");
    }
  }
  if (!have_sr || !have_ss) throw std::invalid_argument("profile '" + spec + "': needs both sr and ss");
  p.validate();
  return p;
}

std::vector<CameraProfile> random_profiles(int count, std::uint64_t seed) {
  RngStream rng(seed, 0x70f);
  std::vector<CameraProfile> out;
  auto log_uniform = [&](double lo, double hi) { return std::exp(rng.uniform(std::log(lo), std::log(hi))); };
  for (int i = 0; i < count; ++i) {
    CameraProfile p;
    p.id = i;
    p.sigma_r = log_uniform(0.005, 0.05);
    p.sigma_s = log_uniform(0.001, 0.02);
    out.push_back(p);
  }
  return out;
}

template <typename T>
ConditionMaps<T> build_condition(const CameraProfile& profile, int num_cameras, int height, int width,
                                 bool blind) {
  profile.validate();
  if (profile.id >= num_cameras) {
    throw std::invalid_argument("build_condition: camera id " + std::to_string(profile.id) +
                                " out of range for K=" + std::to_string(num_cameras));
  }
  ConditionMaps<T> c;
  if (blind) return c;
  c.maps = Tensor<T>(Shape{1, 2 + num_cameras, height, width});
  const std::size_t hw = static_cast<std::size_t>(height) * width;
  std::fill_n(c.maps.ptr(), hw, static_cast<T>(profile.sigma_r));
  std::fill_n(c.maps.ptr() + hw, hw, static_cast<T>(profile.sigma_s));
  std::fill_n(c.maps.ptr() + (2 + static_cast<std::size_t>(profile.id)) * hw, hw, T{1});
  return c;
}

template <typename T>
Tensor<T> sample_noise(const Tensor<T>& clean, const CameraProfile& profile, std::uint64_t seed) {
  profile.validate();
  const CounterRng rng(seed, 0x5eed);
  Tensor<T> noisy(clean.shape());
  for (std::size_t i = 0; i < clean.size(); ++i) {
    const double y = clean[i];
    if (!std::isfinite(y)) throw NumericError("sample_noise: non-finite clean intensity");
    if (y < 0.0 || y > 1.0) throw std::invalid_argument("sample_noise: clean intensity outside [0, 1]");
    const double sd = std::sqrt(profile.variance(y));
    noisy[i] = static_cast<T>(clean[i] + static_cast<T>(sd * rng.normal(i)));
  }
  return noisy;
}

template <typename T>
Tensor<T> pack_bayer(const Tensor<T>& mosaic) {
  require_rank(mosaic.shape(), 4, "pack_bayer");
  const Shape& s = mosaic.shape();
  if (s.c() != 1) throw ShapeError("pack_bayer: expected a single-channel mosaic, got " + s.str());
  if (s.h() % 2 || s.w() % 2) throw ShapeError("pack_bayer: mosaic dims must be even, got " + s.str());
  const int h = s.h() / 2;
  const int w = s.w() / 2;
  Tensor<T> out(Shape{s.n(), 4, h, w});
  for (int n = 0; n < s.n(); ++n) {
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        out.at(n, 0, i, j) = mosaic.at(n, 0, 2 * i, 2 * j);
        out.at(n, 1, i, j) = mosaic.at(n, 0, 2 * i, 2 * j + 1);
        out.at(n, 2, i, j) = mosaic.at(n, 0, 2 * i + 1, 2 * j);
        out.at(n, 3, i, j) = mosaic.at(n, 0, 2 * i + 1, 2 * j + 1);
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> unpack_bayer(const Tensor<T>& packed) {
  require_rank(packed.shape(), 4, "unpack_bayer");
  const Shape& s = packed.shape();
  if (s.c() != 4) throw ShapeError("unpack_bayer: expected 4 channels, got " + s.str());
  Tensor<T> out(Shape{s.n(), 1, 2 * s.h(), 2 * s.w()});
  for (int n = 0; n < s.n(); ++n) {
    for (int i = 0; i < s.h(); ++i) {
      for (int j = 0; j < s.w(); ++j) {
        out.at(n, 0, 2 * i, 2 * j) = packed.at(n, 0, i, j);
        out.at(n, 0, 2 * i, 2 * j + 1) = packed.at(n, 1, i, j);
        out.at(n, 0, 2 * i + 1, 2 * j) = packed.at(n, 2, i, j);
        out.at(n, 0, 2 * i + 1, 2 * j + 1) = packed.at(n, 3, i, j);
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> apply_gamma(const Tensor<T>& linear) {
  Tensor<T> out(linear.shape());
  for (std::size_t i = 0; i < linear.size(); ++i) {
    const T v = linear[i];
    const T m = static_cast<T>(std::pow(static_cast<double>(std::abs(v)), 1.0 / 2.2));
    out[i] = v < T{0} ? -m : m;
  }
  return out;
}

std::string to_string(Layout l) { return l == Layout::Rgb ? "rgb" : "bayer"; }

Layout parse_layout(const std::string& s) {
  if (s == "rgb") return Layout::Rgb;
  if (s == "bayer") return Layout::Bayer;
  throw std::invalid_argument("unknown layout '" + s + "' (expected rgb or bayer)");
}

Tensor<double> render_scene(int channels, int height, int width, RngStream& rng) {
  Tensor<double> img(Shape{1, channels, height, width});
  std::vector<double> c0(channels), c1(channels);
  for (int c = 0; c < channels; ++c) {
    c0[c] = rng.uniform(0.05, 0.95);
    c1[c] = rng.uniform(0.05, 0.95);
  }
  const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double dx = std::cos(angle) / width;
  const double dy = std::sin(angle) / height;
  for (int c = 0; c < channels; ++c) {
    for (int i = 0; i < height; ++i) {
      for (int j = 0; j < width; ++j) {
        const double t = std::clamp(0.5 + (j - width / 2.0) * dx + (i - height / 2.0) * dy, 0.0, 1.0);
        img.at(0, c, i, j) = (1.0 - t) * c0[c] + t * c1[c];
      }
    }
  }

  const int rects = 1 + rng.below(4);
  for (int r = 0; r < rects; ++r) {
    const int x0 = rng.below(width);
    const int y0 = rng.below(height);
    const int x1 = std::min(width, x0 + 2 + rng.below(std::max(1, width / 2)));
    const int y1 = std::min(height, y0 + 2 + rng.below(std::max(1, height / 2)));
    const double alpha = rng.uniform(0.5, 1.0);
    for (int c = 0; c < channels; ++c) {
      const double col = rng.uniform(0.0, 1.0);
      for (int i = y0; i < y1; ++i) {
        for (int j = x0; j < x1; ++j) img.at(0, c, i, j) = (1 - alpha) * img.at(0, c, i, j) + alpha * col;
      }
    }
  }

  const double fx = rng.uniform(0.0, 0.25);
  const double fy = rng.uniform(0.0, 0.25);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double amp = rng.uniform(0.0, 0.15);
  std::vector<double> weight(channels);
  for (auto& w : weight) w = rng.uniform(0.5, 1.0);

  // Value noise on a coarse lattice, bilinearly interpolated.
  const int cell = 4;
  const int gh = height / cell + 2;
  const int gw = width / cell + 2;
  std::vector<double> lattice(static_cast<std::size_t>(gh) * gw);
  for (auto& v : lattice) v = rng.uniform(-1.0, 1.0);
  const double tex = rng.uniform(0.0, 0.08);

  for (int i = 0; i < height; ++i) {
    for (int j = 0; j < width; ++j) {
      const double wave = amp * std::sin(2.0 * std::numbers::pi * (fx * j + fy * i) + phase);
      const double gi = static_cast<double>(i) / cell;
      const double gj = static_cast<double>(j) / cell;
      const int i0 = static_cast<int>(gi);
      const int j0 = static_cast<int>(gj);
      const double ti = gi - i0;
      const double tj = gj - j0;
      auto L = [&](int a, int b) { return lattice[static_cast<std::size_t>(a) * gw + b]; };
      const double noise = (1 - ti) * ((1 - tj) * L(i0, j0) + tj * L(i0, j0 + 1)) +
                           ti * ((1 - tj) * L(i0 + 1, j0) + tj * L(i0 + 1, j0 + 1));
      for (int c = 0; c < channels; ++c) {
        double& v = img.at(0, c, i, j);
        v = std::clamp(v + weight[c] * wave + tex * noise, 0.0, 1.0);
      }
    }
  }
  return img;
}

template <typename T>
PairedSample<T> make_sample(const Tensor<T>& clean, const CameraProfile& profile, int num_cameras,
                            std::uint64_t seed, bool srgb) {
  require_rank(clean.shape(), 4, "make_sample");
  PairedSample<T> s;
  s.profile_id = profile.id;
  Tensor<T> noisy = sample_noise(clean, profile, seed);
  if (srgb) {
    s.clean = apply_gamma(clean);
    s.noisy = apply_gamma(noisy);
  } else {
    s.clean = clean;
    s.noisy = std::move(noisy);
  }
  s.residual = Tensor<T>(s.clean.shape());
  for (std::size_t i = 0; i < s.clean.size(); ++i) s.residual[i] = s.noisy[i] - s.clean[i];
  s.cond = build_condition<T>(profile, num_cameras, clean.shape().h(), clean.shape().w(), false);
  return s;
}

namespace {

std::string numbered(const char* prefix, int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%06d.nmt", prefix, index);
  return buf;
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void synth_dataset(const SynthOptions& opts) {
  if (opts.profiles.empty()) throw std::invalid_argument("synth: at least one camera profile is required");
  if (opts.patch < 16 || (opts.patch & (opts.patch - 1)) != 0) {
    throw std::invalid_argument("synth: patch must be a power of two >= 16, got " + std::to_string(opts.patch));
  }
  if (opts.count < 1) throw std::invalid_argument("synth: count must be positive");
  if (opts.sources < 1) throw std::invalid_argument("synth: sources must be positive");
  const int k = static_cast<int>(opts.profiles.size());
  for (int i = 0; i < k; ++i) {
    opts.profiles[static_cast<std::size_t>(i)].validate();
    if (opts.profiles[static_cast<std::size_t>(i)].id != i) {
      throw std::invalid_argument("synth: profile ids must be 0..K-1 in order");
    }
  }

  std::error_code ec;
  std::filesystem::create_directories(opts.out_dir, ec);
  if (ec || !std::filesystem::is_directory(opts.out_dir)) {
    throw std::runtime_error("synth: cannot create directory " + opts.out_dir.string());
  }

  std::ostringstream manifest;
  for (int idx = 0; idx < opts.count; ++idx) {
    const int slot = idx % k;
    const CameraProfile& prof = opts.profiles[static_cast<std::size_t>(slot)];
    const int source = slot % opts.sources;
    RngStream scene_rng(CounterRng(opts.seed, 0x5ce0e).substream(static_cast<std::uint64_t>(idx)));
    Tensor<float> clean;
    if (opts.layout == Layout::Rgb) {
      clean = render_scene(3, opts.patch, opts.patch, scene_rng).cast<float>();
    } else {
      const Tensor<double> rgb = render_scene(3, 2 * opts.patch, 2 * opts.patch, scene_rng);
      Tensor<double> mosaic(Shape{1, 1, 2 * opts.patch, 2 * opts.patch});
      for (int i = 0; i < 2 * opts.patch; ++i) {
        for (int j = 0; j < 2 * opts.patch; ++j) {
          const int ch = (i % 2 == 0 && j % 2 == 0) ? 0 : (i % 2 == 1 && j % 2 == 1) ? 2 : 1;
          mosaic.at(0, 0, i, j) = rgb.at(0, ch, i, j);
        }
      }
      clean = pack_bayer(mosaic).cast<float>();
    }
    const std::uint64_t noise_seed = mix64(opts.seed ^ mix64(0x401c5 + static_cast<std::uint64_t>(idx)));
    PairedSample<float> s = make_sample(clean, prof, k, noise_seed, opts.srgb);
    const std::string fy = numbered("y", idx), fs = numbered("s", idx), fv = numbered("v", idx),
                      fc = numbered("c", idx);
    save_nmt(opts.out_dir / fy, s.clean);
    save_nmt(opts.out_dir / fs, s.noisy);
    save_nmt(opts.out_dir / fv, s.residual);
    save_nmt(opts.out_dir / fc, s.cond.maps);
    manifest << idx << '\t' << prof.id << '\t' << source << '\t' << fy << '\t' << fs << '\t' << fv << '\t' << fc
             << '\n';
  }

  std::ofstream mf(opts.out_dir / "manifest.txt", std::ios::trunc);
  mf << manifest.str();
  std::ofstream pf(opts.out_dir / "profiles.txt", std::ios::trunc);
  for (const auto& p : opts.profiles) pf << p.id << '\t' << fmt_double(p.sigma_r) << '\t' << fmt_double(p.sigma_s) << '\n';
  std::ofstream df(opts.out_dir / "dataset.txt", std::ios::trunc);
  df << "count = " << opts.count << "\npatch = " << opts.patch << "\nlayout = " << to_string(opts.layout)
     << "\nsrgb = " << (opts.srgb ? 1 : 0) << "\nsources = " << opts.sources << "\nseed = " << opts.seed << '\n';
  if (!mf || !pf || !df) throw std::runtime_error("synth: failed writing metadata in " + opts.out_dir.string());
}

template <typename T>
bool Dataset<T>::has_noisy() const {
  for (const auto& s : samples) {
    if (s.noisy.empty()) return false;
  }
  return !samples.empty();
}

template <typename T>
const CameraProfile& Dataset<T>::profile(int id) const {
  if (id < 0 || id >= num_cameras()) throw std::out_of_range("unknown camera profile id " + std::to_string(id));
  return profiles[static_cast<std::size_t>(id)];
}

template <typename T>
Dataset<T> load_dataset(const std::filesystem::path& dir) {
  Dataset<T> ds;
  std::ifstream pf(dir / "profiles.txt");
  if (!pf) throw std::runtime_error("dataset " + dir.string() + ": missing profiles.txt");
  CameraProfile p;
  while (pf >> p.id >> p.sigma_r >> p.sigma_s) ds.profiles.push_back(p);
  if (ds.profiles.empty()) throw std::runtime_error("dataset " + dir.string() + ": no camera profiles");

  if (std::ifstream df(dir / "dataset.txt"); df) {
    std::string line;
    while (std::getline(df, line)) {
      if (line.rfind("layout = ", 0) == 0) ds.layout = parse_layout(line.substr(9));
    }
  }

  std::ifstream mf(dir / "manifest.txt");
  if (!mf) throw std::runtime_error("dataset " + dir.string() + ": missing manifest.txt");
  std::string line;
  int lineno = 0;
  while (std::getline(mf, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ls(line);
    std::string col;
    while (std::getline(ls, col, '\t')) cols.push_back(col);
    if (cols.size() < 7) {
      throw std::runtime_error("manifest.txt:" + std::to_string(lineno) + ": expected 7 tab-separated fields");
    }
    PairedSample<T> s;
    s.index = std::stoi(cols[0]);
    s.profile_id = std::stoi(cols[1]);
    s.source_tag = std::stoi(cols[2]);
    ds.profile(s.profile_id);
    auto required = [&](const std::string& f) {
      if (!std::filesystem::exists(dir / f)) {
        throw std::runtime_error("dataset " + dir.string() + ": missing reference file " + f);
      }
      return load_nmt<T>(dir / f);
    };
    s.clean = required(cols[3]);
    if (std::filesystem::exists(dir / cols[4])) s.noisy = load_nmt<T>(dir / cols[4]);
    s.residual = required(cols[5]);
    s.cond.maps = required(cols[6]);
    require_same_shape(s.clean.shape(), s.residual.shape(), "dataset sample");
    ds.samples.push_back(std::move(s));
  }
  if (ds.samples.empty()) throw std::runtime_error("dataset " + dir.string() + ": manifest lists no samples");
  return ds;
}

template ConditionMaps<float> build_condition(const CameraProfile&, int, int, int, bool);
template ConditionMaps<double> build_condition(const CameraProfile&, int, int, int, bool);
template Tensor<float> sample_noise(const Tensor<float>&, const CameraProfile&, std::uint64_t);
template Tensor<double> sample_noise(const Tensor<double>&, const CameraProfile&, std::uint64_t);
template Tensor<float> pack_bayer(const Tensor<float>&);
template Tensor<double> pack_bayer(const Tensor<double>&);
template Tensor<float> unpack_bayer(const Tensor<float>&);
template Tensor<double> unpack_bayer(const Tensor<double>&);
template Tensor<float> apply_gamma(const Tensor<float>&);
template Tensor<double> apply_gamma(const Tensor<double>&);
template PairedSample<float> make_sample(const Tensor<float>&, const CameraProfile&, int, std::uint64_t, bool);
template PairedSample<double> make_sample(const Tensor<double>&, const CameraProfile&, int, std::uint64_t, bool);
template struct Dataset<float>;
template struct Dataset<double>;
template Dataset<float> load_dataset(const std::filesystem::path&);
template Dataset<double> load_dataset(const std::filesystem::path&);

}  // namespace nmd
