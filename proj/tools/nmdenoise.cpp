// nmdenoise: synthesize data, train, evaluate, denoise, gradcheck, ablate.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "nmd/config_file.hpp"
#include "nmd/tensor_io.hpp"
#include "nmd/trainer.hpp"
#include "png_io.hpp"

namespace fs = std::filesystem;
using namespace nmd;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kConfig = 2, kNumeric = 3, kGradcheck = 4 };

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
  std::string out;
  bool blind = false;
  std::optional<int> sources;
};

struct RunConfig {
  NetConfig net;
  TrainConfig train;
  std::string train_data;
  std::string test_data;

  KeyValues key_values() const {
    KeyValues kv = to_key_values(net, train);
    kv["train_data"] = train_data;
    kv["test_data"] = test_data;
    return kv;
  }
};

/// Defaults, then the config file, then `overrides` (command-line flags).
RunConfig resolve(const Globals& g, KeyValues overrides) {
  KeyValues kv;
  if (!g.config.empty()) kv = read_config_file(g.config);
  if (g.seed) overrides["seed"] = std::to_string(*g.seed);
  if (g.blind) overrides["blind"] = "1";
  if (g.sources) overrides["sources"] = std::to_string(*g.sources);
  for (auto& [k, v] : overrides) kv[k] = v;
  RunConfig rc;
  for (const char* key : {"train_data", "test_data"}) {
    if (auto it = kv.find(key); it != kv.end()) {
      (std::string(key) == "train_data" ? rc.train_data : rc.test_data) = it->second;
      kv.erase(it);
    }
  }
  apply_key_values(kv, rc.net, rc.train);
  return rc;
}

void fit_to_data(NetConfig& net, const Dataset<float>& data) {
  net.image_channels = data.layout == Layout::Bayer ? 4 : 3;
  net.num_cameras = data.num_cameras();
  int max_source = 0;
  for (const auto& s : data.samples) max_source = std::max(max_source, s.source_tag);
  if (max_source >= net.num_sources) {
    throw ConfigError("dataset has noise source " + std::to_string(max_source) + " but sources = " +
                      std::to_string(net.num_sources));
  }
}

Dataset<float> open_dataset(const std::string& path, const char* what) {
  if (path.empty()) throw ConfigError(std::string("no ") + what + " dataset given");
  if (!fs::is_directory(path)) throw ConfigError(std::string(what) + " dataset '" + path + "' not found");
  return load_dataset<float>(path);
}

fs::path out_dir(const Globals& g, const char* fallback) { return g.out.empty() ? fs::path(fallback) : fs::path(g.out); }

void print_metrics(const MetricReport& r) { std::cout << r.table(); }

// ---- synth -----------------------------------------------------------------

struct SynthArgs {
  int count = 64;
  int patch = 32;
  std::vector<std::string> profiles;
  int random_profiles = 0;
  std::string layout = "rgb";
  bool srgb = false;
};

int cmd_synth(const Globals& g, const SynthArgs& a) {
  SynthOptions o;
  o.count = a.count;
  o.patch = a.patch;
  o.seed = g.seed.value_or(0);
  o.layout = parse_layout(a.layout);
  o.srgb = a.srgb;
  o.sources = g.sources.value_or(1);
  o.out_dir = out_dir(g, "data");
  for (std::size_t i = 0; i < a.profiles.size(); ++i) {
    o.profiles.push_back(parse_profile(a.profiles[i], static_cast<int>(i)));
  }
  if (a.random_profiles > 0) {
    if (!o.profiles.empty()) throw ConfigError("--profile and --random-profiles are exclusive");
    o.profiles = random_profiles(a.random_profiles, o.seed);
  }
  if (o.profiles.empty()) o.profiles.push_back(parse_profile("sr=0.02,ss=0.01", 0));
  synth_dataset(o);
  std::cout << "wrote " << o.count << " samples to " << o.out_dir.string() << '\n';
  return kOk;
}

// ---- train -----------------------------------------------------------------

struct TrainArgs {
  std::string data;
  std::string test;
  std::optional<int> steps;
  std::string mode;
  std::vector<std::string> freeze;
  std::string init;
  std::string resume;
};

int cmd_train(const Globals& g, const TrainArgs& a) {
  KeyValues over;
  if (!a.data.empty()) over["train_data"] = a.data;
  if (!a.test.empty()) over["test_data"] = a.test;
  if (a.steps) over["steps"] = std::to_string(*a.steps);
  if (!a.mode.empty()) over["mode"] = a.mode;
  if (!a.freeze.empty()) {
    std::string f;
    for (const auto& s : a.freeze) f += (f.empty() ? "" : ",") + s;
    over["freeze"] = f;
  }
  RunConfig rc = resolve(g, over);
  const Dataset<float> data = open_dataset(rc.train_data, "training");
  fit_to_data(rc.net, data);
  const fs::path out = out_dir(g, "run");

  std::optional<Trainer<float>> tr;
  if (!a.resume.empty()) {
    tr.emplace(Trainer<float>::load(a.resume));
    if (a.steps) tr->set_steps(*a.steps);
    rc.net = tr->net_config();
    rc.train = tr->config();
  } else {
    tr.emplace(rc.net, rc.train);
    if (!a.init.empty()) tr->load_weights(load_checkpoint<float>(a.init));
  }
  write_config_file(out / "config.txt", rc.key_values());

  const std::uint64_t every = std::max<std::uint64_t>(1, static_cast<std::uint64_t>(rc.train.steps) / 20);
  tr->train(data, out, [&](const LossReport& r) {
    if (r.step % every == 0) {
      std::fprintf(stderr, "step %llu  d %.4f  total %.4f  content %.4f\n", static_cast<unsigned long long>(r.step),
                   r.d_loss, r.total, r.content);
    }
  });
  if (!rc.test_data.empty()) {
    const MetricReport rep = evaluate(tr->generator(), open_dataset(rc.test_data, "test"));
    rep.write(out);
    print_metrics(rep);
  }
  return kOk;
}

// ---- eval ------------------------------------------------------------------

struct EvalArgs {
  std::string ckpt;
  std::string data;
  int batch = 16;
};

int cmd_eval(const Globals& g, const EvalArgs& a) {
  if (!fs::is_directory(a.ckpt)) throw ConfigError("checkpoint '" + a.ckpt + "' not found");
  Trainer<float> tr = Trainer<float>::load(a.ckpt);
  const MetricReport rep = evaluate(tr.generator(), open_dataset(a.data, "evaluation"), a.batch);
  const fs::path out = out_dir(g, "eval");
  rep.write(out);
  KeyValues kv = to_key_values(tr.net_config(), tr.config());
  kv["checkpoint"] = a.ckpt;
  kv["test_data"] = a.data;
  write_config_file(out / "config.txt", kv);
  print_metrics(rep);
  return kOk;
}

// ---- denoise ---------------------------------------------------------------

struct DenoiseArgs {
  std::string ckpt;
  std::string input;
  std::string output;
  std::string profile;
};

Tensor<float> pad_to_multiple(const Tensor<float>& x, int m) {
  const Shape& s = x.shape();
  const int h = (s.h() + m - 1) / m * m, w = (s.w() + m - 1) / m * m;
  if (h == s.h() && w == s.w()) return x;
  Tensor<float> out(Shape{s.n(), s.c(), h, w});
  for (int n = 0; n < s.n(); ++n) {
    for (int c = 0; c < s.c(); ++c) {
      for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) out.at(n, c, i, j) = x.at(n, c, std::min(i, s.h() - 1), std::min(j, s.w() - 1));
      }
    }
  }
  return out;
}

Tensor<float> crop(const Tensor<float>& x, int h, int w) {
  const Shape& s = x.shape();
  if (s.h() == h && s.w() == w) return x;
  Tensor<float> out(Shape{s.n(), s.c(), h, w});
  for (int n = 0; n < s.n(); ++n) {
    for (int c = 0; c < s.c(); ++c) {
      for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) out.at(n, c, i, j) = x.at(n, c, i, j);
      }
    }
  }
  return out;
}

bool has_ext(const fs::path& p, const char* ext) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
  return e == ext;
}

int cmd_denoise(const Globals& g, const DenoiseArgs& a) {
  if (!fs::is_directory(a.ckpt)) throw ConfigError("checkpoint '" + a.ckpt + "' not found");
  if (!fs::exists(a.input)) throw ConfigError("input '" + a.input + "' not found");
  Trainer<float> tr = Trainer<float>::load(a.ckpt);
  const NetConfig& net = tr.net_config();
  const bool bayer = net.image_channels == 4;

  Tensor<float> img = has_ext(a.input, ".png") ? read_png(a.input) : load_nmt<float>(a.input);
  if (img.shape().rank() == 3) img = img.reshaped(Shape{1, img.shape()[0], img.shape()[1], img.shape()[2]});
  if (img.shape().rank() != 4 || img.shape().n() != 1) throw ShapeError("denoise: expected one image, got " + img.shape().str());
  const bool mosaic = bayer && img.shape().c() == 1;
  if (mosaic) img = pack_bayer(img);
  if (img.shape().c() != net.image_channels) {
    throw ShapeError("denoise: image has " + std::to_string(img.shape().c()) + " channels, checkpoint expects " +
                     std::to_string(net.image_channels));
  }

  const int h = img.shape().h(), w = img.shape().w();
  const Tensor<float> padded = pad_to_multiple(img, 1 << net.depth);
  Tensor<float> cond;
  if (!net.blind) {
    if (a.profile.empty()) throw ConfigError("non-blind checkpoint: --profile sr=..,ss=..[,id=..] is required");
    const CameraProfile prof = parse_profile(a.profile, 0);
    if (prof.id < 0 || prof.id >= net.num_cameras) {
      throw ConfigError("profile id " + std::to_string(prof.id) + " outside 0.." + std::to_string(net.num_cameras - 1));
    }
    cond = build_condition<float>(prof, net.num_cameras, padded.shape().h(), padded.shape().w(), false).maps;
  }
  Tensor<float> out = crop(run_denoiser(tr.generator(), padded, cond), h, w);
  if (bayer) out = unpack_bayer(out);

  fs::path stem = a.output.empty() ? out_dir(g, ".") / (fs::path(a.input).stem().string() + "_denoised") : fs::path(a.output);
  if (has_ext(stem, ".png") || has_ext(stem, ".nmt")) stem.replace_extension();
  if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
  save_nmt(stem.string() + ".nmt", out);
  write_png(stem.string() + ".png", out);
  std::cout << "wrote " << stem.string() << ".png and .nmt\n";
  return kOk;
}

// ---- gradcheck -------------------------------------------------------------

struct GradcheckArgs {
  double tolerance = 1e-5;
  double composed_tolerance = 1e-3;
};

int cmd_gradcheck(const Globals& g, const GradcheckArgs& a) {
  const std::uint64_t seed = g.seed.value_or(7);
  std::vector<GradcheckReport> reports = check_primitives(a.tolerance, seed);
  reports.push_back(gradcheck_composed(1, a.composed_tolerance, seed));
  reports.push_back(gradcheck_composed(2, a.composed_tolerance, seed + 1));
  int failed = 0;
  std::ostringstream text;
  for (const auto& r : reports) {
    text << r.summary() << '\n';
    failed += r.passed() ? 0 : 1;
  }
  text << (failed ? std::to_string(failed) + " of " + std::to_string(reports.size()) + " checks failed\n"
                  : "all " + std::to_string(reports.size()) + " checks passed\n");
  std::cout << text.str();
  if (!g.out.empty()) {
    fs::create_directories(g.out);
    std::ofstream(fs::path(g.out) / "gradcheck.txt") << text.str();
  }
  return failed ? kGradcheck : kOk;
}

// ---- ablate ----------------------------------------------------------------

struct AblateArgs {
  std::string data;
  std::string test;
  int seeds = 3;
  std::optional<int> steps;
};

int cmd_ablate(const Globals& g, const AblateArgs& a) {
  KeyValues over;
  if (!a.data.empty()) over["train_data"] = a.data;
  if (!a.test.empty()) over["test_data"] = a.test;
  if (a.steps) over["steps"] = std::to_string(*a.steps);
  RunConfig rc = resolve(g, over);
  if (a.seeds < 1) throw ConfigError("--seeds must be positive");
  const Dataset<float> train = open_dataset(rc.train_data, "training");
  const Dataset<float> test = open_dataset(rc.test_data, "test");
  fit_to_data(rc.net, train);
  std::vector<std::uint64_t> seeds;
  for (int i = 0; i < a.seeds; ++i) seeds.push_back(rc.train.seed + static_cast<std::uint64_t>(i));

  const fs::path out = out_dir(g, "ablation");
  write_config_file(out / "config.txt", rc.key_values());
  const AblationTable table = ablation_suite(train, test, rc.net, rc.train, seeds,
                                             [](const std::string& m) { std::fprintf(stderr, "%s\n", m.c_str()); });
  std::ofstream(out / "ablation.txt") << table.text();
  std::ofstream(out / "ablation.csv") << table.csv();
  std::cout << table.text();
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Residual-manifold image denoiser: data synthesis, training and evaluation"};
  app.fallthrough();
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "key = value config file (flags override it)");
  app.add_option("--seed", g.seed, "Seed for data synthesis, initialization and batching");
  app.add_flag("--deterministic", g.deterministic, "Bit-reproducible execution (always on; single-threaded)");
  app.add_option("--out", g.out, "Output directory");
  app.add_flag("--blind", g.blind, "Train without condition maps");
  app.add_option("--sources", g.sources, "Number of noise sources (Rec encoders)")->check(CLI::PositiveNumber);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Write a synthetic paired dataset");
  synth->add_option("--count", sa.count, "Number of patches")->check(CLI::PositiveNumber);
  synth->add_option("--patch", sa.patch, "Patch size (packed size for bayer)")->check(CLI::PositiveNumber);
  synth->add_option("--profile", sa.profiles, "Camera profile sr=..,ss=..[,id=..] (repeatable)");
  synth->add_option("--random-profiles", sa.random_profiles, "Draw this many random profiles");
  synth->add_option("--layout", sa.layout, "rgb or bayer");
  synth->add_flag("--srgb", sa.srgb, "Apply display gamma to clean and noisy images");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a denoiser");
  train->add_option("--data", ta.data, "Training dataset directory (train_data)");
  train->add_option("--test", ta.test, "Held-out dataset evaluated after training (test_data)");
  train->add_option("--steps", ta.steps, "Training steps");
  train->add_option("--mode", ta.mode, "full, rec_only or reg_finetune");
  train->add_option("--freeze", ta.freeze, "Parameter prefixes held fixed in reg_finetune")->delimiter(',');
  train->add_option("--init", ta.init, "Start from the weights of this checkpoint");
  auto* resume = train->add_option("--resume", ta.resume, "Continue a run from this checkpoint");
  resume->excludes(train->get_option("--init"));

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Score a checkpoint on a dataset");
  eval->add_option("--ckpt", ea.ckpt, "Checkpoint directory")->required();
  eval->add_option("--data", ea.data, "Dataset directory")->required();
  eval->add_option("--batch", ea.batch, "Images per forward pass")->check(CLI::PositiveNumber);

  DenoiseArgs da;
  auto* denoise = app.add_subcommand("denoise", "Denoise one NMT1 or PNG image");
  denoise->add_option("--ckpt", da.ckpt, "Checkpoint directory")->required();
  denoise->add_option("--input", da.input, "Noisy image (.nmt or .png)")->required();
  denoise->add_option("--output", da.output, "Output path stem; .png and .nmt are written");
  denoise->add_option("--profile", da.profile, "Camera profile of the input sr=..,ss=..[,id=..]");

  GradcheckArgs ga;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every primitive and the full loss");
  gradcheck->add_option("--tolerance", ga.tolerance, "Relative tolerance for primitives");
  gradcheck->add_option("--composed-tolerance", ga.composed_tolerance, "Relative tolerance for generator+losses");

  AblateArgs aa;
  auto* ablate = app.add_subcommand("ablate", "Train and score the four ablation variants");
  ablate->add_option("--data", aa.data, "Training dataset directory (train_data)");
  ablate->add_option("--test", aa.test, "Test dataset directory (test_data)");
  ablate->add_option("--seeds", aa.seeds, "Number of seeds, starting at --seed");
  ablate->add_option("--steps", aa.steps, "Training steps per run");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (*synth) return cmd_synth(g, sa);
    if (*train) return cmd_train(g, ta);
    if (*eval) return cmd_eval(g, ea);
    if (*denoise) return cmd_denoise(g, da);
    if (*gradcheck) return cmd_gradcheck(g, ga);
    if (*ablate) return cmd_ablate(g, aa);
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfig;
  } catch (const std::out_of_range& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kFailure;
}
