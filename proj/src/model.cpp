#include "nmd/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "nmd/rng.hpp"

namespace nmd {

int NetConfig::level_channels(int level) const {
  if (level == 0) return base_channels;
  long c = static_cast<long>(base_channels) << (level - 1);
  return static_cast<int>(std::min<long>(c, latent_channels));
}

bool NetConfig::has_skip(int level) const {
  return std::find(skips.begin(), skips.end(), level) != skips.end();
}

void NetConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("net config: " + m); };
  if (image_channels < 1) fail("image_channels must be positive");
  if (num_cameras < 1) fail("num_cameras must be positive");
  if (depth < 1 || depth > 8) fail("depth must be in 1..8");
  if (patch < 2 || (patch >> depth) < 2 || (patch % (1 << depth)) != 0) {
    fail("patch / 2^depth must be an integer >= 2 (patch " + std::to_string(patch) + ", depth " +
         std::to_string(depth) + ")");
  }
  if (base_channels < 1 || latent_channels < 1 || disc_channels < 1) fail("channel counts must be positive");
  if (skips.size() > 2) fail("at most two skip connections");
  for (int s : skips) {
    if (s < 0 || s > depth) fail("skip level " + std::to_string(s) + " outside 0..depth");
  }
  if (skips.size() == 2 && skips[0] == skips[1]) fail("skip levels must be distinct");
  if (num_sources < 1) fail("num_sources must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0, 1)");
  if (explicit_z && z_channels < 1) fail("z_channels must be positive with explicit_z");
}

NetConfig NetConfig::full_scale() {
  NetConfig c;
  c.patch = 64;
  c.depth = 5;
  c.base_channels = 64;
  c.latent_channels = 1024;
  return c;
}

KeyValues to_key_values(const NetConfig& cfg) {
  std::ostringstream skips;
  for (std::size_t i = 0; i < cfg.skips.size(); ++i) skips << (i ? "," : "") << cfg.skips[i];
  std::ostringstream dropout;
  dropout.precision(17);
  dropout << cfg.dropout;
  return {
      {"image_channels", std::to_string(cfg.image_channels)},
      {"num_cameras", std::to_string(cfg.num_cameras)},
      {"blind", cfg.blind ? "1" : "0"},
      {"patch", std::to_string(cfg.patch)},
      {"base_channels", std::to_string(cfg.base_channels)},
      {"depth", std::to_string(cfg.depth)},
      {"latent_channels", std::to_string(cfg.latent_channels)},
      {"skips", skips.str()},
      {"sources", std::to_string(cfg.num_sources)},
      {"dropout", dropout.str()},
      {"explicit_z", cfg.explicit_z ? "1" : "0"},
      {"z_channels", std::to_string(cfg.z_channels)},
      {"disc_channels", std::to_string(cfg.disc_channels)},
      {"residual_learning", cfg.residual_learning ? "1" : "0"},
      {"residual_discriminator", cfg.residual_discriminator ? "1" : "0"},
  };
}

NetConfig net_config_from(const KeyValues& kv) {
  NetConfig c;
  auto get = [&](const char* k) -> const std::string* {
    auto it = kv.find(k);
    return it == kv.end() ? nullptr : &it->second;
  };
  auto as_int = [&](const char* k, int& dst) {
    if (auto* v = get(k)) dst = std::stoi(*v);
  };
  auto as_bool = [&](const char* k, bool& dst) {
    if (auto* v = get(k)) dst = (*v == "1" || *v == "true");
  };
  as_int("image_channels", c.image_channels);
  as_int("num_cameras", c.num_cameras);
  as_bool("blind", c.blind);
  as_int("patch", c.patch);
  as_int("base_channels", c.base_channels);
  as_int("depth", c.depth);
  as_int("latent_channels", c.latent_channels);
  if (auto* v = get("skips")) {
    c.skips.clear();
    std::stringstream ss(*v);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (!item.empty()) c.skips.push_back(std::stoi(item));
    }
  }
  as_int("sources", c.num_sources);
  if (auto* v = get("dropout")) c.dropout = std::stod(*v);
  as_bool("explicit_z", c.explicit_z);
  as_int("z_channels", c.z_channels);
  as_int("disc_channels", c.disc_channels);
  as_bool("residual_learning", c.residual_learning);
  as_bool("residual_discriminator", c.residual_discriminator);
  return c;
}

template <typename T>
void he_init(ParamSet<T>& params, std::uint64_t seed) {
  const CounterRng root(seed, 0x1417);
  std::uint64_t index = 0;
  for (auto& p : params) {
    ++index;
    if (!std::string_view(p.name).ends_with(".w")) {
      p.value.fill(T{0});
      continue;
    }
    const auto& s = p.value.shape();
    const double fan_in = static_cast<double>(s.numel() / static_cast<std::size_t>(s[0]));
    const double sd = std::sqrt(2.0 / fan_in);
    const CounterRng rng = root.substream(index);
    for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] = static_cast<T>(sd * rng.normal(i));
  }
}

namespace {

template <typename T>
void add_conv(ParamSet<T>& ps, const std::string& name, int out, int in, int k) {
  ps.add(name + ".w", Shape{out, in, k, k});
  ps.add(name + ".b", Shape{out});
}

}  // namespace

template <typename T>
Generator<T>::Generator(NetConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const int cs = cfg_.image_channels;
  const int cc = cfg_.cond_channels();
  const int b = cfg_.base_channels;

  add_conv(params_, "backbone.in", b, cs + cc, 3);
  for (int i = 1; i <= 3; ++i) {
    add_conv(params_, "backbone.block" + std::to_string(i) + ".conv1", b, b, 3);
    add_conv(params_, "backbone.block" + std::to_string(i) + ".conv2", b, b, 3);
  }

  auto add_encoder = [&](const std::string& prefix, int in) {
    if (cfg_.has_skip(0)) add_conv(params_, prefix + "in", cfg_.level_channels(0), in, 3);
    for (int l = 1; l <= cfg_.depth; ++l) {
      add_conv(params_, prefix + "down" + std::to_string(l), cfg_.level_channels(l), in, 3);
      in = cfg_.level_channels(l);
    }
    add_conv(params_, prefix + "latent", cfg_.latent_channels, in, 3);
  };
  add_encoder("enc_reg.", cs + cc + b);
  for (int src = 0; src < cfg_.num_sources; ++src) add_encoder(rec_prefix(src), 2 * cs + cc);

  int h_ch = cfg_.latent_channels + (cfg_.explicit_z ? cfg_.z_channels : 0);
  for (int l = cfg_.depth; l >= 1; --l) {
    int in = h_ch + (cfg_.has_skip(l) ? cfg_.level_channels(l) : 0);
    if (l == 1 && cfg_.has_skip(0)) in += cfg_.level_channels(0);
    const int out = l > 1 ? cfg_.level_channels(l - 1) : cs;
    add_conv(params_, "dec.up" + std::to_string(l), out, in, 3);
    h_ch = out;
  }
}

template <typename T>
std::string Generator<T>::rec_prefix(int source) {
  return "enc_rec" + std::to_string(source) + ".";
}

template <typename T>
void Generator<T>::init(std::uint64_t seed) {
  he_init(params_, seed);
  params_.get("dec.up1.w").value.fill(T{0});
}

template <typename T>
Var<T> Generator<T>::conv(Tape<T>& tape, const std::string& name, Var<T> x, int stride) {
  auto y = conv2d(x, tape.param(params_.get(name + ".w")), stride, Padding::Same);
  return add_bias(y, tape.param(params_.get(name + ".b")));
}

template <typename T>
void Generator<T>::check_image(Var<T> x, int channels, const char* what) const {
  const Shape& s = x.shape();
  if (s.rank() != 4 || s.c() != channels || s.h() % (1 << cfg_.depth) != 0 ||
      s.w() % (1 << cfg_.depth) != 0 || (s.h() >> cfg_.depth) < 1) {
    throw ShapeError(std::string("generator: ") + what + " has shape " + s.str() + ", expected N x " +
                     std::to_string(channels) + " x H x W with H, W divisible by 2^" + std::to_string(cfg_.depth));
  }
}

template <typename T>
Var<T> Generator<T>::with_cond(std::initializer_list<Var<T>> xs, Var<T> cond) {
  std::vector<Var<T>> parts(xs);
  if (cfg_.blind) {
    if (cond.valid() && !cond.value().empty()) {
      throw ShapeError("generator: blind network received condition maps");
    }
  } else {
    if (!cond.valid()) throw ShapeError("generator: non-blind network requires condition maps");
    const Shape& cs = cond.shape();
    const Shape& s0 = parts.front().shape();
    if (cs.rank() != 4 || cs.c() != cfg_.cond_channels() || cs.n() != s0.n() || cs.h() != s0.h() ||
        cs.w() != s0.w()) {
      throw ShapeError("generator: condition maps " + cs.str() + " do not match input " + s0.str() + " with " +
                       std::to_string(cfg_.cond_channels()) + " condition channels");
    }
    parts.insert(parts.begin() + 1, cond);
  }
  return concat_channels(std::span<const Var<T>>(parts));
}

template <typename T>
Var<T> Generator<T>::backbone_forward(Tape<T>& tape, Var<T> noisy, Var<T> cond) {
  check_image(noisy, cfg_.image_channels, "noisy input");
  Var<T> x = conv(tape, "backbone.in", with_cond({noisy}, cond), 1);
  for (int i = 1; i <= 3; ++i) {
    const std::string p = "backbone.block" + std::to_string(i);
    Var<T> h = relu(conv(tape, p + ".conv1", x, 1));
    x = add(x, conv(tape, p + ".conv2", h, 1));
  }
  return x;
}

template <typename T>
typename Generator<T>::EncoderOut Generator<T>::encode(Tape<T>& tape, const std::string& prefix, Var<T> input) {
  EncoderOut out;
  out.levels.resize(static_cast<std::size_t>(cfg_.depth) + 1);
  out.levels[0] = input;
  if (cfg_.has_skip(0)) out.levels[0] = relu(conv(tape, prefix + "in", input, 1));
  Var<T> x = input;
  for (int l = 1; l <= cfg_.depth; ++l) {
    x = relu(conv(tape, prefix + "down" + std::to_string(l), x, 2));
    out.levels[static_cast<std::size_t>(l)] = x;
  }
  out.latent = conv(tape, prefix + "latent", x, 1);
  return out;
}

template <typename T>
Var<T> Generator<T>::decode(Tape<T>& tape, const EncoderOut& enc, const ForwardOptions& opts, std::uint64_t path) {
  const CounterRng noise = CounterRng(opts.noise_key, 0xd0).substream(path);
  Var<T> h = enc.latent;
  if (cfg_.explicit_z) {
    const Shape& ls = h.shape();
    Tensor<T> z(Shape{ls.n(), cfg_.z_channels, ls.h(), ls.w()});
    if (opts.train) {
      const CounterRng zr = noise.substream(0x2);
      for (std::size_t i = 0; i < z.size(); ++i) z[i] = static_cast<T>(2.0 * zr.uniform(i) - 1.0);
    }
    h = concat_channels({h, tape.constant(std::move(z), "z")});
  }
  for (int l = cfg_.depth; l >= 1; --l) {
    auto join = [&](Var<T> x, int level) {
      if (!cfg_.has_skip(level)) return x;
      Var<T> e = enc.levels[static_cast<std::size_t>(level)];
      if (!skips_enabled_) e = tape.constant(Tensor<T>(e.shape()), "skip_off");
      return concat_channels({x, e});
    };
    h = up2(join(h, l));
    if (l == 1) h = join(h, 0);
    h = conv(tape, "dec.up" + std::to_string(l), h, 1);
    if (l == 1) break;
    h = relu(h);
    const bool deep = l >= cfg_.depth - 1;
    if (opts.train && deep && cfg_.dropout > 0.0) {
      const CounterRng dr = noise.substream(0x100 + static_cast<std::uint64_t>(l));
      Tensor<T> mask(h.shape());
      const T keep = static_cast<T>(1.0 / (1.0 - cfg_.dropout));
      for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = dr.uniform(i) < cfg_.dropout ? T{0} : keep;
      h = mul(h, tape.constant(std::move(mask), "dropout"));
    }
  }
  return h;
}

template <typename T>
RegOutputs<T> Generator<T>::reg_forward(Tape<T>& tape, Var<T> noisy, Var<T> cond, Var<T> features,
                                        const ForwardOptions& opts) {
  check_image(noisy, cfg_.image_channels, "noisy input");
  const Shape& fs = features.shape();
  if (fs.rank() != 4 || fs.c() != cfg_.base_channels || fs.h() != noisy.shape().h() ||
      fs.w() != noisy.shape().w()) {
    throw ShapeError("generator: backbone features " + fs.str() + " incompatible with input " + noisy.shape().str());
  }
  EncoderOut enc = encode(tape, "enc_reg.", with_cond({noisy, features}, cond));
  Var<T> out = decode(tape, enc, opts, 0);
  RegOutputs<T> r;
  r.latent = enc.latent;
  if (cfg_.residual_learning) {
    r.residual = out;
    r.denoised = sub(noisy, out);
  } else {
    r.denoised = out;
    r.residual = sub(noisy, out);
  }
  return r;
}

template <typename T>
RecOutputs<T> Generator<T>::rec_forward(Tape<T>& tape, Var<T> residual, Var<T> clean, Var<T> cond, int source,
                                        const ForwardOptions& opts) {
  if (source < 0 || source >= cfg_.num_sources) {
    throw std::out_of_range("generator: noise source " + std::to_string(source) + " outside 0.." +
                            std::to_string(cfg_.num_sources - 1));
  }
  check_image(residual, cfg_.image_channels, "residual input");
  require_same_shape(residual.shape(), clean.shape(), "rec_forward");
  EncoderOut enc = encode(tape, rec_prefix(source), with_cond({residual, clean}, cond));
  RecOutputs<T> r;
  r.latent = enc.latent;
  r.residual = decode(tape, enc, opts, 1 + static_cast<std::uint64_t>(source));
  return r;
}

template <typename T>
RegOutputs<T> Generator<T>::denoise(Tape<T>& tape, Var<T> noisy, Var<T> cond, const ForwardOptions& opts) {
  return reg_forward(tape, noisy, cond, backbone_forward(tape, noisy, cond), opts);
}

template <typename T>
std::vector<const Parameter<T>*> Generator<T>::decoder_for_reg() const {
  return params_.group("dec.");
}

template <typename T>
std::vector<const Parameter<T>*> Generator<T>::decoder_for_rec(int source) const {
  if (source < 0 || source >= cfg_.num_sources) throw std::out_of_range("decoder_for_rec: bad source");
  return params_.group("dec.");
}

template <typename T>
Discriminator<T>::Discriminator(NetConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  if (cfg_.patch % 8 != 0) throw std::invalid_argument("discriminator: patch must be divisible by 8");
  const int d = cfg_.disc_channels;
  const int in = 2 * cfg_.image_channels + cfg_.cond_channels();
  add_conv(params_, "disc.conv1", d, in, 3);
  add_conv(params_, "disc.conv2", 2 * d, d, 3);
  add_conv(params_, "disc.conv3", 4 * d, 2 * d, 3);
  add_conv(params_, "disc.conv4", 4 * d, 4 * d, 3);
  add_conv(params_, "disc.head", 1, 4 * d, 1);
}

template <typename T>
void Discriminator<T>::init(std::uint64_t seed) {
  he_init(params_, seed ^ 0xd15c);
}

template <typename T>
DiscOutputs<T> Discriminator<T>::forward(Tape<T>& tape, Var<T> candidate, Var<T> noisy, Var<T> cond, bool frozen) {
  require_same_shape(candidate.shape(), noisy.shape(), "discriminator input");
  const Shape& s = noisy.shape();
  if (s.rank() != 4 || s.c() != cfg_.image_channels || s.h() % 8 || s.w() % 8) {
    throw ShapeError("discriminator: input " + s.str() + " must be N x " + std::to_string(cfg_.image_channels) +
                     " x H x W with H, W divisible by 8");
  }
  std::vector<Var<T>> parts{candidate, noisy};
  if (!cfg_.blind) {
    if (!cond.valid() || cond.shape().c() != cfg_.cond_channels()) {
      throw ShapeError("discriminator: expected " + std::to_string(cfg_.cond_channels()) + " condition channels");
    }
    parts.push_back(cond);
  }
  auto bind = [&](const std::string& n) { return frozen ? tape.frozen(params_.get(n)) : tape.param(params_.get(n)); };
  auto layer = [&](const std::string& n, Var<T> x, int stride) {
    return add_bias(conv2d(x, bind(n + ".w"), stride, Padding::Same), bind(n + ".b"));
  };
  const T slope = T(0.2);
  Var<T> x = concat_channels(std::span<const Var<T>>(parts));
  x = leaky_relu(layer("disc.conv1", x, 2), slope);
  x = leaky_relu(layer("disc.conv2", x, 2), slope);
  x = leaky_relu(layer("disc.conv3", x, 2), slope);
  Var<T> feat = leaky_relu(layer("disc.conv4", x, 1), slope);
  return {layer("disc.head", feat, 1), feat};
}

template class Generator<float>;
template class Generator<double>;
template class Discriminator<float>;
template class Discriminator<double>;
template void he_init(ParamSet<float>&, std::uint64_t);
template void he_init(ParamSet<double>&, std::uint64_t);

}  // namespace nmd
