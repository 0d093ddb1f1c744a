#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "nmd/noise_model.hpp"
#include "nmd/tensor_io.hpp"

using namespace nmd;
namespace fs = std::filesystem;

namespace {

struct Moments {
  double mean = 0.0;
  double var = 0.0;
};

Moments residual_moments(const Tensor<double>& noisy, const Tensor<double>& clean) {
  const double n = static_cast<double>(noisy.size());
  double m = 0.0;
  for (std::size_t i = 0; i < noisy.size(); ++i) m += noisy[i] - clean[i];
  m /= n;
  double v = 0.0;
  for (std::size_t i = 0; i < noisy.size(); ++i) {
    const double d = noisy[i] - clean[i] - m;
    v += d * d;
  }
  return {m, v / (n - 1)};
}

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("nmd_test_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(SampleNoise, ZeroVarianceIsExactIdentity) {
  Tensor<float> y(Shape{1, 3, 8, 8}, 0.25f);
  y[5] = 1.0f;
  EXPECT_TRUE(bitwise_equal(sample_noise(y, CameraProfile{0, 0.0, 0.0}, 9), y));
}

TEST(SampleNoise, VarianceAndMeanAtHalfIntensity) {
  constexpr int kDraws = 1'000'000;
  Tensor<double> y(Shape{kDraws}, 0.5);
  const auto s = sample_noise(y, CameraProfile{0, 0.02, 0.01}, 2024);
  const auto m = residual_moments(s, y);
  const double expected = 0.02 * 0.02 + 0.01 * 0.5;
  EXPECT_NEAR(expected, 0.0054, 1e-15);
  EXPECT_NEAR(m.var, expected, 0.05 * expected);
  EXPECT_LE(std::abs(m.mean), 3.0 * std::sqrt(expected / kDraws));
}

TEST(SampleNoise, VarianceWithinChiSquareBandAcrossLevels) {
  constexpr int kDraws = 1'000'000;
  // Two-sided 99% band of the sample variance: z_{0.995} * sqrt(2 / (n - 1)).
  const double band = 2.5758 * std::sqrt(2.0 / (kDraws - 1));
  const auto profiles = random_profiles(3, 17);
  int seed = 0;
  for (const auto& p : profiles) {
    for (double level : {0.05, 0.4, 0.95}) {
      Tensor<double> y(Shape{kDraws}, level);
      const auto m = residual_moments(sample_noise(y, p, static_cast<std::uint64_t>(++seed)), y);
      const double target = p.variance(level);
      EXPECT_NEAR(m.var / target, 1.0, band) << "sr=" << p.sigma_r << " ss=" << p.sigma_s << " y=" << level;
    }
  }
}

TEST(SampleNoise, ReproducibleAndSeedSensitive) {
  Tensor<float> y(Shape{2, 3, 4, 4}, 0.6f);
  const CameraProfile p{0, 0.03, 0.01};
  EXPECT_TRUE(bitwise_equal(sample_noise(y, p, 5), sample_noise(y, p, 5)));
  EXPECT_FALSE(bitwise_equal(sample_noise(y, p, 5), sample_noise(y, p, 6)));
}

TEST(SampleNoise, BrighterPixelsAreNoisier) {
  constexpr int kDraws = 200'000;
  for (const auto& p : random_profiles(4, 3)) {
    Tensor<double> dark(Shape{kDraws}, 0.1);
    Tensor<double> bright(Shape{kDraws}, 0.9);
    const double vd = residual_moments(sample_noise(dark, p, 1), dark).var;
    const double vb = residual_moments(sample_noise(bright, p, 2), bright).var;
    EXPECT_GT(vb, vd);
    EXPECT_GE(p.variance(0.9), p.variance(0.1));
  }
}

TEST(SampleNoise, RejectsNonFiniteAndOutOfRange) {
  Tensor<double> y(Shape{3}, 0.5);
  y[1] = std::nan("");
  EXPECT_THROW(sample_noise(y, CameraProfile{0, 0.01, 0.01}, 1), NumericError);
  y[1] = 1.5;
  EXPECT_THROW(sample_noise(y, CameraProfile{0, 0.01, 0.01}, 1), std::invalid_argument);
  EXPECT_THROW(sample_noise(Tensor<double>(Shape{1}, 0.5), CameraProfile{0, -0.01, 0.0}, 1), std::invalid_argument);
}

TEST(Condition, BlindIsEmpty) {
  auto c = build_condition<float>(CameraProfile{0, 0.02, 0.01}, 2, 4, 4, true);
  EXPECT_TRUE(c.blind());
  EXPECT_EQ(c.channels(), 0);
}

TEST(Condition, ChannelsCarrySigmasAndOneHot) {
  auto c = build_condition<double>(CameraProfile{1, 0.02, 0.01}, 2, 3, 5, false);
  ASSERT_EQ(c.maps.shape(), (Shape{1, 4, 3, 5}));
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 5; ++j) {
      EXPECT_EQ(c.maps.at(0, 0, i, j), 0.02);
      EXPECT_EQ(c.maps.at(0, 1, i, j), 0.01);
      EXPECT_EQ(c.maps.at(0, 2, i, j), 0.0);
      EXPECT_EQ(c.maps.at(0, 3, i, j), 1.0);
    }
  }
  EXPECT_THROW(build_condition<double>(CameraProfile{2, 0.02, 0.01}, 2, 3, 3, false), std::invalid_argument);
}

TEST(Condition, OneHotSumsToOneForAnyId) {
  for (int k = 1; k <= 6; ++k) {
    for (int id = 0; id < k; ++id) {
      auto c = build_condition<float>(CameraProfile{id, 0.01, 0.002}, k, 2, 3, false);
      for (int i = 0; i < 2; ++i) {
        for (int j = 0; j < 3; ++j) {
          float s = 0;
          for (int ch = 2; ch < 2 + k; ++ch) s += c.maps.at(0, ch, i, j);
          EXPECT_EQ(s, 1.0f);
        }
      }
    }
  }
}

TEST(Bayer, PackOrderIsRGGB) {
  Tensor<float> m(Shape{1, 1, 2, 2}, {1.f, 2.f, 3.f, 4.f});
  auto p = pack_bayer(m);
  ASSERT_EQ(p.shape(), (Shape{1, 4, 1, 1}));
  EXPECT_EQ(p[0], 1.f);
  EXPECT_EQ(p[1], 2.f);
  EXPECT_EQ(p[2], 3.f);
  EXPECT_EQ(p[3], 4.f);
  EXPECT_THROW(pack_bayer(Tensor<float>(Shape{1, 1, 3, 2})), ShapeError);
}

TEST(Bayer, UnpackInvertsPackBitwise) {
  RngStream rng(4, 0);
  Tensor<double> m(Shape{2, 1, 6, 8});
  for (auto& v : m.data()) v = rng.normal();
  EXPECT_TRUE(bitwise_equal(unpack_bayer(pack_bayer(m)), m));
}

TEST(Bayer, ConstantMosaicGivesConstantChannels) {
  auto p = pack_bayer(Tensor<float>(Shape{1, 1, 4, 4}, 0.3f));
  for (float v : p.data()) EXPECT_EQ(v, 0.3f);
}

TEST(Profiles, ParseAndValidate) {
  auto p = parse_profile("sr=0.02,ss=0.01", 3);
  EXPECT_EQ(p.id, 3);
  EXPECT_DOUBLE_EQ(p.sigma_r, 0.02);
  EXPECT_THROW(parse_profile("sr=-1,ss=0", 0), std::invalid_argument);
  EXPECT_THROW(parse_profile("sr=0.1", 0), std::invalid_argument);
  EXPECT_THROW(parse_profile("sr=abc,ss=0", 0), std::invalid_argument);
  for (const auto& r : random_profiles(50, 1)) {
    EXPECT_GE(r.sigma_r, 0.005);
    EXPECT_LE(r.sigma_r, 0.05);
    EXPECT_GE(r.sigma_s, 0.001);
    EXPECT_LE(r.sigma_s, 0.02);
  }
}

TEST(Scene, StaysInUnitRangeAndIsDeterministic) {
  for (int i = 0; i < 10; ++i) {
    RngStream a(CounterRng(1).substream(static_cast<std::uint64_t>(i)));
    RngStream b(CounterRng(1).substream(static_cast<std::uint64_t>(i)));
    auto x = render_scene(3, 32, 32, a);
    EXPECT_TRUE(bitwise_equal(x, render_scene(3, 32, 32, b)));
    for (double v : x.data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Synth, RoundRobinProfilesAndExactResiduals) {
  const auto dir = scratch("synth_rr");
  SynthOptions o;
  o.count = 4;
  o.patch = 16;
  o.profiles = {CameraProfile{0, 0.02, 0.01}, CameraProfile{1, 0.01, 0.005}};
  o.seed = 3;
  o.out_dir = dir;
  synth_dataset(o);
  auto ds = load_dataset<float>(dir);
  ASSERT_EQ(ds.samples.size(), 4u);
  for (int i = 0; i < 4; ++i) {
    const auto& s = ds.samples[static_cast<std::size_t>(i)];
    EXPECT_EQ(s.profile_id, i % 2);
    ASSERT_EQ(s.noisy.shape(), (Shape{1, 3, 16, 16}));
    for (std::size_t j = 0; j < s.clean.size(); ++j) {
      const float d = s.noisy[j] - s.clean[j];
      const float r = s.residual[j];
      EXPECT_EQ(std::memcmp(&d, &r, sizeof d), 0);
    }
    EXPECT_EQ(s.cond.maps.shape(), (Shape{1, 4, 16, 16}));
  }
  std::ifstream mf(dir / "manifest.txt");
  std::string line;
  std::getline(mf, line);
  EXPECT_EQ(line, "0\t0\t0\ty_000000.nmt\ts_000000.nmt\tv_000000.nmt\tc_000000.nmt");
}

TEST(Synth, SrgbAppliesGammaAfterNoise) {
  const auto dir = scratch("synth_srgb");
  SynthOptions o;
  o.count = 1;
  o.patch = 16;
  o.profiles = {CameraProfile{0, 0.02, 0.01}};
  o.seed = 5;
  o.srgb = true;
  o.out_dir = dir;
  synth_dataset(o);
  auto ds = load_dataset<float>(dir);
  const auto& s = ds.samples[0];
  for (std::size_t j = 0; j < s.clean.size(); ++j) EXPECT_EQ(s.residual[j], s.noisy[j] - s.clean[j]);
  // Clean values are gamma-encoded: compare against re-rendering.
  RngStream rng(CounterRng(5, 0x5ce0e).substream(0));
  auto lin = render_scene(3, 16, 16, rng).cast<float>();
  EXPECT_TRUE(bitwise_equal(apply_gamma(lin), s.clean));
}

TEST(Synth, BayerLayoutPacksFourChannels) {
  const auto dir = scratch("synth_bayer");
  SynthOptions o;
  o.count = 2;
  o.patch = 16;
  o.layout = Layout::Bayer;
  o.profiles = {CameraProfile{0, 0.02, 0.01}};
  o.out_dir = dir;
  synth_dataset(o);
  auto ds = load_dataset<float>(dir);
  EXPECT_EQ(ds.layout, Layout::Bayer);
  EXPECT_EQ(ds.samples[0].clean.shape(), (Shape{1, 4, 16, 16}));
}

TEST(Synth, ValidatesInputs) {
  SynthOptions o;
  o.out_dir = scratch("synth_bad");
  o.patch = 16;
  EXPECT_THROW(synth_dataset(o), std::invalid_argument);
  o.profiles = {CameraProfile{0, 0.01, 0.01}};
  o.patch = 24;
  EXPECT_THROW(synth_dataset(o), std::invalid_argument);
  o.patch = 16;
  o.out_dir = "/proc/nmd_cannot_write_here";
  EXPECT_ANY_THROW(synth_dataset(o));
}

TEST(Synth, DatasetWithoutNoisyFilesStillLoads) {
  const auto dir = scratch("synth_nos");
  SynthOptions o;
  o.count = 3;
  o.patch = 16;
  o.profiles = {CameraProfile{0, 0.02, 0.01}};
  o.out_dir = dir;
  synth_dataset(o);
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().filename().string().starts_with("s_")) fs::remove(e.path());
  }
  auto ds = load_dataset<float>(dir);
  EXPECT_EQ(ds.samples.size(), 3u);
  EXPECT_FALSE(ds.has_noisy());
  fs::remove(dir / "y_000001.nmt");
  EXPECT_THROW(load_dataset<float>(dir), std::runtime_error);
}

// Least-squares oracle: E[v^2 | y] = sigma_r^2 + sigma_s * y, so an ordinary
// regression of squared residuals on clean intensity recovers both terms.
TEST(Synth, RegressionRecoversNoiseParameters) {
  const auto dir = scratch("synth_fit");
  SynthOptions o;
  o.count = 82;  // 82 * 3 * 64 * 64 ~ 1.0e6 pixels
  o.patch = 64;
  o.profiles = {CameraProfile{0, 0.04, 0.01}, CameraProfile{1, 0.03, 0.02}};
  o.seed = 11;
  o.out_dir = dir;
  synth_dataset(o);
  auto ds = load_dataset<double>(dir);
  for (const auto& prof : ds.profiles) {
    double n = 0, sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (const auto& s : ds.samples) {
      if (s.profile_id != prof.id) continue;
      for (std::size_t j = 0; j < s.clean.size(); ++j) {
        const double x = s.clean[j];
        const double r = s.residual[j] * s.residual[j];
        n += 1;
        sx += x;
        sy += r;
        sxx += x * x;
        sxy += x * r;
      }
    }
    const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    const double intercept = (sy - slope * sx) / n;
    EXPECT_NEAR(slope / prof.sigma_s, 1.0, 0.10) << "profile " << prof.id;
    EXPECT_NEAR(intercept / (prof.sigma_r * prof.sigma_r), 1.0, 0.10) << "profile " << prof.id;
  }
}
