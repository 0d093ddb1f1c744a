#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "nmd/trainer.hpp"

using namespace nmd;
namespace fs = std::filesystem;

namespace {

NetConfig small_net() {
  NetConfig c;
  c.patch = 16;
  c.depth = 3;
  c.base_channels = 4;
  c.latent_channels = 16;
  c.skips = {0, 3};
  c.disc_channels = 4;
  return c;
}

TrainConfig small_train(std::uint64_t seed = 3) {
  TrainConfig t;
  t.batch = 4;
  t.seed = seed;
  t.steps = 10;
  return t;
}

template <typename T>
std::vector<Tensor<T>> snapshot(const ParamSet<T>& ps, const std::string& prefix = "") {
  std::vector<Tensor<T>> out;
  for (const auto& p : ps) {
    if (p.name.rfind(prefix, 0) == 0) out.push_back(p.value);
  }
  return out;
}

template <typename T>
bool same(const std::vector<Tensor<T>>& a, const std::vector<Tensor<T>>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!bitwise_equal(a[i], b[i])) return false;
  }
  return true;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class TrainerTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root = fs::temp_directory_path() / "nmd_test_trainer";
    fs::remove_all(root);
    SynthOptions o;
    o.count = 24;
    o.patch = 16;
    o.seed = 5;
    o.profiles = {{0, 0.03, 0.01}, {1, 0.015, 0.004}};
    o.out_dir = root / "train";
    synth_dataset(o);
    o.count = 8;
    o.seed = 6;
    o.out_dir = root / "test";
    synth_dataset(o);
    o.sources = 2;
    o.seed = 7;
    o.out_dir = root / "multi";
    synth_dataset(o);
  }
  static void TearDownTestSuite() { fs::remove_all(root); }

  static Dataset<float> load(const char* name) { return load_dataset<float>(root / name); }
  static Dataset<double> load_d(const char* name) { return load_dataset<double>(root / name); }

  static fs::path root;
};

fs::path TrainerTest::root;

}  // namespace

TEST(Adam, FirstStepIsLearningRate) {
  ParamSet<double> ps;
  auto& p = ps.add("w", Shape{1});
  p.value[0] = 0.5;
  p.grad[0] = 1.0;
  Adam<double> adam;
  ASSERT_TRUE(adam.step(ps, 1e-3));
  EXPECT_NEAR(p.value[0] - 0.5, -1e-3 / (1.0 + 1e-8), 1e-15);
  EXPECT_EQ(adam.t(), 1u);
}

TEST(Adam, ZeroGradientIsFixedPoint) {
  ParamSet<double> ps;
  auto& p = ps.add("w", Shape{3});
  p.value.fill(0.25);
  Adam<double> adam;
  for (int i = 0; i < 5; ++i) ASSERT_TRUE(adam.step(ps, 0.1));
  for (double v : p.value.data()) EXPECT_EQ(v, 0.25);
}

TEST(Adam, MinimizesQuadratic) {
  ParamSet<double> ps;
  auto& p = ps.add("w", Shape{1});
  Adam<double> adam;
  for (int i = 0; i < 100; ++i) {
    p.grad[0] = 2.0 * (p.value[0] - 3.0);
    ASSERT_TRUE(adam.step(ps, 0.1));
  }
  EXPECT_LT(std::abs(p.value[0] - 3.0), 0.2);
}

TEST(Adam, RejectsNonFiniteGradients) {
  ParamSet<float> ps;
  auto& a = ps.add("a", Shape{2});
  auto& b = ps.add("b", Shape{2});
  a.grad.fill(1.0f);
  b.grad[1] = std::nanf("");
  Adam<float> adam;
  EXPECT_FALSE(adam.step(ps, 0.1));
  EXPECT_EQ(adam.t(), 0u);
  for (float v : a.value.data()) EXPECT_EQ(v, 0.0f);
  // Masking out the bad parameter lets the step through.
  EXPECT_TRUE(adam.step(ps, 0.1, [](const Parameter<float>& p) { return p.name == "a"; }));
  EXPECT_NE(a.value[0], 0.0f);
  EXPECT_EQ(b.value[0], 0.0f);
}

TEST(Schedule, HalvesExactlyOnce) {
  TrainConfig t;
  t.lr = 1e-3;
  t.halve_after = 2000;
  EXPECT_EQ(t.lr_at(1), 1e-3);
  EXPECT_EQ(t.lr_at(2000), 1e-3);
  EXPECT_EQ(t.lr_at(2001), 5e-4);
  EXPECT_EQ(t.lr_at(1000000), 5e-4);
}

TEST(Config, KeyValuesRoundTripAndErrors) {
  NetConfig net = small_net();
  TrainConfig t = small_train();
  t.no_rec = true;
  t.freeze = {"dec.", "backbone."};
  t.weights.rec = 4.0;
  t.weights.tie_content_grad(false);
  const KeyValues kv = to_key_values(net, t);
  NetConfig net2;
  TrainConfig t2;
  apply_key_values(kv, net2, t2);
  EXPECT_EQ(to_key_values(net2, t2), kv);
  EXPECT_EQ(t2.weights.content_grad, 2.0);

  EXPECT_THROW(apply_key_values({{"nonsense", "1"}}, net2, t2), ConfigError);
  EXPECT_THROW(apply_key_values({{"batch", "sixteen"}}, net2, t2), ConfigError);
  EXPECT_THROW(apply_key_values({{"lr", "-1"}}, net2, t2), ConfigError);
  EXPECT_THROW(apply_key_values({{"lambda_cg", "3"}}, net2, t2), ConfigError);
  EXPECT_NO_THROW(apply_key_values({{"lambda_cg", "3"}, {"cg_tie", "none"}}, net2, t2));
  EXPECT_EQ(t2.weights.content_grad, 3.0);
  NetConfig n3;
  TrainConfig t3;
  apply_key_values({{"cg_tie", "content"}}, n3, t3);
  EXPECT_EQ(t3.weights.content_grad, 50.0);
}

TEST_F(TrainerTest, FixedSeedRunsGiveIdenticalLogs) {
  const auto data = load("train");
  auto run = [&](const fs::path& out) {
    Trainer<float> tr(small_net(), small_train());
    tr.train(data, out);
    return read_file(out / "train_log.csv");
  };
  const std::string a = run(root / "run_a");
  const std::string b = run(root / "run_b");
  EXPECT_EQ(a, b);
  EXPECT_EQ(std::count(a.begin(), a.end(), '\n'), 11);
  EXPECT_TRUE(fs::exists(root / "run_a" / "ckpt_000010" / "manifest.txt"));

  TrainConfig other = small_train(4);
  Trainer<float> tr(small_net(), other);
  tr.train(data, root / "run_c");
  EXPECT_NE(read_file(root / "run_c" / "train_log.csv"), a);
}

TEST_F(TrainerTest, CheckpointResumeIsBitExact) {
  const auto data = load("train");
  Trainer<float> straight(small_net(), small_train());
  for (int i = 0; i < 4; ++i) straight.step(data);
  straight.save(root / "resume_ckpt");
  const LossReport expect = straight.step(data);

  Trainer<float> resumed = Trainer<float>::load(root / "resume_ckpt");
  EXPECT_EQ(resumed.step_count(), 4u);
  const LossReport got = resumed.step(data);
  EXPECT_EQ(got.csv_row(), expect.csv_row());
  EXPECT_TRUE(same(snapshot(resumed.generator().params()), snapshot(straight.generator().params())));
  EXPECT_TRUE(same(snapshot(resumed.discriminator().params()), snapshot(straight.discriminator().params())));
}

TEST_F(TrainerTest, ResumedTrainingMatchesUninterruptedRun) {
  const auto data = load("train");
  TrainConfig t = small_train();
  t.steps = 6;
  t.checkpoint_every = 3;
  Trainer<float> full(small_net(), t);
  full.train(data, root / "run_full");
  EXPECT_TRUE(fs::exists(root / "run_full" / "ckpt_000003"));
  EXPECT_TRUE(fs::exists(root / "run_full" / "ckpt_000006"));

  // Keep the first three log rows, as if the run had stopped after ckpt_000003.
  const fs::path dir = root / "run_resumed";
  fs::create_directories(dir);
  {
    std::istringstream in(read_file(root / "run_full" / "train_log.csv"));
    std::ofstream out(dir / "train_log.csv");
    std::string line;
    for (int i = 0; i < 4 && std::getline(in, line); ++i) out << line << '\n';
  }
  Trainer<float> resumed = Trainer<float>::load(root / "run_full" / "ckpt_000003");
  EXPECT_EQ(resumed.step_count(), 3u);
  EXPECT_EQ(resumed.train(data, dir).size(), 3u);
  EXPECT_EQ(read_file(dir / "train_log.csv"), read_file(root / "run_full" / "train_log.csv"));
  EXPECT_TRUE(same(snapshot(resumed.generator().params()), snapshot(full.generator().params())));
}

TEST_F(TrainerTest, DiscriminatorStepLeavesGeneratorAlone) {
  const auto data = load("train");
  Trainer<float> tr(small_net(), small_train());
  tr.set_mode(TrainMode::RegFinetune, {"backbone.", "enc_reg.", "dec."});
  const auto g0 = snapshot(tr.generator().params());
  const auto d0 = snapshot(tr.discriminator().params());
  tr.step(data);
  EXPECT_TRUE(same(g0, snapshot(tr.generator().params())));
  EXPECT_FALSE(same(d0, snapshot(tr.discriminator().params())));
}

TEST_F(TrainerTest, GeneratorStepLeavesDiscriminatorAlone) {
  const auto data = load("train");
  TrainConfig t = small_train();
  t.freeze_discriminator = true;
  Trainer<float> tr(small_net(), t);
  const auto g0 = snapshot(tr.generator().params());
  const auto d0 = snapshot(tr.discriminator().params());
  tr.step(data);
  EXPECT_TRUE(same(d0, snapshot(tr.discriminator().params())));
  EXPECT_FALSE(same(g0, snapshot(tr.generator().params())));
}

TEST_F(TrainerTest, NoRecSkipsRecPath) {
  const auto data = load("train");
  TrainConfig t = small_train();
  t.no_rec = true;
  Trainer<float> tr(small_net(), t);
  const auto rec0 = snapshot(tr.generator().params(), "enc_rec");
  for (int i = 0; i < 3; ++i) {
    const auto r = tr.step(data);
    EXPECT_EQ(r.rec, 0.0);
    EXPECT_EQ(r.latent, 0.0);
  }
  EXPECT_TRUE(same(rec0, snapshot(tr.generator().params(), "enc_rec")));
}

TEST_F(TrainerTest, RecEncoderGradientsVanishWithoutRecWeights) {
  const auto data = load_d("train");
  TrainConfig t = small_train();
  t.weights.rec = 0.0;
  t.weights.latent = 0.0;
  Generator<double> g(small_net());
  g.init(1);
  Discriminator<double> d(small_net());
  d.init(1);
  const int idx[] = {0, 1, 2, 3};
  const auto b = make_batch(data, idx);
  Tape<double> tape;
  auto s = tape.constant(b.noisy);
  auto c = tape.constant(b.cond);
  const ForwardOptions fwd{true, 1};
  auto reg = g.reg_forward(tape, s, c, g.backbone_forward(tape, s, c), fwd);
  LossReport rep;
  tape.backward(generator_loss(tape, g, d, b, reg, t, fwd, rep));
  g.params().zero_grad();
  tape.flush_param_grads();
  for (auto* p : g.params().group("enc_rec")) {
    for (double v : p->grad.data()) ASSERT_EQ(v, 0.0) << p->name;
  }
  for (auto* p : d.params().group("")) {
    for (double v : p->grad.data()) ASSERT_EQ(v, 0.0) << p->name;
  }
}

TEST_F(TrainerTest, DecoderGradientIsSumOfPathGradients) {
  const auto data = load_d("multi");
  NetConfig net = small_net();
  net.num_sources = 2;
  TrainConfig t = small_train();
  Trainer<double> tr(net, t);
  for (int i = 0; i < 3; ++i) tr.step(data);
  const int idx[] = {0, 1, 2, 3, 4, 5};
  const auto b = make_batch(data, idx);
  auto grads = [&](TermSet terms) {
    auto& g = tr.generator();
    Tape<double> tape;
    auto s = tape.constant(b.noisy);
    auto c = tape.constant(b.cond);
    const ForwardOptions fwd{true, 9};
    auto reg = g.reg_forward(tape, s, c, g.backbone_forward(tape, s, c), fwd);
    LossReport rep;
    tape.backward(generator_loss(tape, g, tr.discriminator(), b, reg, tr.config(), fwd, rep, terms));
    g.params().zero_grad();
    tape.flush_param_grads();
    std::vector<Tensor<double>> out;
    for (const auto* p : g.decoder_for_reg()) out.push_back(p->grad);
    return out;
  };
  const auto all = grads(TermSet::All);
  const auto reg_only = grads(TermSet::RegOnly);
  const auto rec_only = grads(TermSet::RecOnly);
  double worst = 0.0;
  bool rec_nonzero = false;
  for (std::size_t k = 0; k < all.size(); ++k) {
    for (std::size_t i = 0; i < all[k].size(); ++i) {
      const double sum = reg_only[k][i] + rec_only[k][i];
      worst = std::max(worst, std::abs(all[k][i] - sum) / std::max(1e-12, std::abs(all[k][i]) + std::abs(sum)));
      rec_nonzero |= rec_only[k][i] != 0.0;
    }
  }
  EXPECT_TRUE(rec_nonzero);
  EXPECT_LT(worst, 1e-6);
  for (int src = 0; src < 2; ++src) EXPECT_EQ(tr.generator().decoder_for_rec(src), tr.generator().decoder_for_reg());
}

TEST_F(TrainerTest, ContentOnlyOverfitIsMonotone) {
  const auto data = load_d("train");
  NetConfig net = small_net();
  net.dropout = 0.0;
  TrainConfig t = small_train();
  t.freeze_discriminator = true;
  t.lr = 1e-4;
  t.weights = {};
  t.weights.adversarial = t.weights.feature = t.weights.rec = t.weights.latent = t.weights.decov = 0.0;
  t.weights.content_grad = 0.0;
  Trainer<double> tr(net, t);
  const int idx[] = {0, 1, 2, 3};
  const auto b = make_batch(data, idx);
  double prev = std::numeric_limits<double>::infinity();
  double first = 0.0;
  for (int i = 0; i < 50; ++i) {
    const auto r = tr.step_on(b);
    if (i == 0) first = r.total;
    EXPECT_LE(r.total, prev) << "step " << i;
    prev = r.total;
  }
  EXPECT_LT(prev, first);
}

TEST_F(TrainerTest, NoResidualLosesIdentityAtStepZero) {
  const auto data = load("train");
  TrainConfig t = small_train();
  t.no_residual = true;
  Trainer<float> tr(small_net(), t);
  const int idx[] = {0, 1};
  const auto b = make_batch(data, idx);
  const auto out = run_denoiser(tr.generator(), b.noisy, b.cond);
  EXPECT_FALSE(bitwise_equal(out, b.noisy));

  Trainer<float> res(small_net(), small_train());
  EXPECT_TRUE(bitwise_equal(run_denoiser(res.generator(), b.noisy, b.cond), b.noisy));
}

TEST_F(TrainerTest, PretrainRecTouchesOnlyRecPath) {
  auto data = load("train");
  for (auto& s : data.samples) s.noisy = {};
  Trainer<float> tr(small_net(), small_train());
  const auto reg0 = snapshot(tr.generator().params(), "enc_reg");
  const auto bb0 = snapshot(tr.generator().params(), "backbone");
  const auto d0 = snapshot(tr.discriminator().params());
  const auto rec0 = snapshot(tr.generator().params(), "enc_rec");

  auto held = load("test");
  const int idx[] = {0, 1, 2, 3, 4, 5, 6, 7};
  const auto hb = make_batch(held, idx);
  auto held_rec_loss = [&] {
    Tape<float> tape;
    auto r = tr.generator().rec_forward(tape, tape.constant(hb.residual), tape.constant(hb.clean),
                                        tape.constant(hb.cond), 0);
    return rec_loss(r.residual, tape.constant(hb.residual)).value()[0];
  };
  const float before = held_rec_loss();
  const auto reports = pretrain_rec(tr, data, 60);
  ASSERT_EQ(reports.size(), 60u);
  EXPECT_EQ(reports.front().content, 0.0);
  EXPECT_LT(held_rec_loss(), before);
  EXPECT_TRUE(same(reg0, snapshot(tr.generator().params(), "enc_reg")));
  EXPECT_TRUE(same(bb0, snapshot(tr.generator().params(), "backbone")));
  EXPECT_TRUE(same(d0, snapshot(tr.discriminator().params())));
  EXPECT_FALSE(same(rec0, snapshot(tr.generator().params(), "enc_rec")));
  EXPECT_EQ(tr.config().mode, TrainMode::Full);
}

TEST_F(TrainerTest, FinetuneHonoursFreezeMask) {
  const auto data = load("train");
  Trainer<float> tr(small_net(), small_train());
  const auto dec0 = snapshot(tr.generator().params(), "dec.");
  const auto rec0 = snapshot(tr.generator().params(), "enc_rec");
  const auto reg0 = snapshot(tr.generator().params(), "enc_reg");
  finetune_reg(tr, data, 3, {"dec."});
  EXPECT_TRUE(same(dec0, snapshot(tr.generator().params(), "dec.")));
  EXPECT_TRUE(same(rec0, snapshot(tr.generator().params(), "enc_rec")));
  EXPECT_FALSE(same(reg0, snapshot(tr.generator().params(), "enc_reg")));

  EXPECT_THROW(finetune_reg(tr, data, 1, {"decoder_typo."}), ConfigError);
  Dataset<float> empty;
  EXPECT_THROW(finetune_reg(tr, empty, 1, {}), std::invalid_argument);
}

TEST_F(TrainerTest, MultiSourceRoutesEachSampleToItsEncoder) {
  const auto data = load("multi");
  NetConfig net = small_net();
  net.num_sources = 2;
  Trainer<float> tr(net, small_train());
  const auto rec0 = snapshot(tr.generator().params(), "enc_rec0.");
  const auto rec1 = snapshot(tr.generator().params(), "enc_rec1.");
  const int idx[] = {0, 2};  // both from source 0
  const auto b = make_batch(data, idx);
  ASSERT_EQ(b.sources, (std::vector<int>{0, 0}));
  tr.step_on(b);
  EXPECT_FALSE(same(rec0, snapshot(tr.generator().params(), "enc_rec0.")));
  EXPECT_TRUE(same(rec1, snapshot(tr.generator().params(), "enc_rec1.")));
  const int mixed[] = {1, 0, 3, 2};
  EXPECT_NO_THROW(tr.step_on(make_batch(data, mixed)));
}

TEST_F(TrainerTest, NonFiniteInputAbortsWithNamedTerm) {
  auto data = load("train");
  Trainer<float> tr(small_net(), small_train());
  const int idx[] = {0, 1};
  auto b = make_batch(data, idx);
  b.clean[5] = std::nanf("");
  try {
    tr.step_on(b);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("content"), std::string::npos) << e.what();
  }
}

TEST_F(TrainerTest, AblationTableShape) {
  const auto train = load("train");
  const auto test = load("test");
  TrainConfig t = small_train();
  t.steps = 2;
  const auto table = ablation_suite(train, test, small_net(), t, {1, 2});
  ASSERT_EQ(table.rows.size(), 4u);
  for (const auto& r : table.rows) {
    EXPECT_EQ(r.psnr.size(), 2u);
    EXPECT_EQ(r.ssim.size(), 2u);
  }
  EXPECT_EQ(table.rows[0].variant, "full");
  EXPECT_NE(table.text().find("no_rec+no_residual"), std::string::npos);
  const std::string csv = table.csv();
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
}

TEST(ComposedGradcheck, SingleSampleWithoutDecov) {
  auto rep = gradcheck_composed(1, 1e-3, 11);
  EXPECT_TRUE(rep.passed()) << rep.summary();
  EXPECT_GT(rep.checked, 500u);
}

TEST(ComposedGradcheck, PairWithDecov) {
  auto rep = gradcheck_composed(2, 1e-3, 12);
  EXPECT_TRUE(rep.passed()) << rep.summary();
}
