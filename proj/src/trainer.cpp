#include "nmd/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "nmd/rng.hpp"

namespace nmd {

// ---- Adam ----------------------------------------------------------------

template <typename T>
bool Adam<T>::step(ParamSet<T>& params, double lr, const Mask& mask) {
  for (const auto& p : params) {
    if (mask && !mask(p)) continue;
    if (!p.grad.all_finite()) return false;
  }
  ++t_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (auto& p : params) {
    if (mask && !mask(p)) continue;
    auto it = state_.find(p.name);
    if (it == state_.end()) {
      it = state_.emplace(p.name, Moments{Tensor<T>(p.value.shape()), Tensor<T>(p.value.shape())}).first;
    }
    T* m = it->second.m.ptr();
    T* v = it->second.v.ptr();
    T* w = p.value.ptr();
    const T* g = p.grad.ptr();
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      const double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * gi;
      const double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double mhat = mi / bc1, vhat = vi / bc2;
      w[i] = static_cast<T>(static_cast<double>(w[i]) - lr * mhat / (std::sqrt(vhat) + cfg_.eps));
    }
  }
  return true;
}

template <typename T>
void Adam<T>::save(Checkpoint<T>& ckpt, const std::string& prefix) const {
  ckpt.config[prefix + "t"] = std::to_string(t_);
  for (const auto& [name, mom] : state_) {
    ckpt.tensors.emplace_back(prefix + "m/" + name, mom.m);
    ckpt.tensors.emplace_back(prefix + "v/" + name, mom.v);
  }
}

template <typename T>
void Adam<T>::load(const Checkpoint<T>& ckpt, const std::string& prefix) {
  state_.clear();
  auto it = ckpt.config.find(prefix + "t");
  t_ = it == ckpt.config.end() ? 0 : std::stoull(it->second);
  const std::string mp = prefix + "m/";
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.rfind(mp, 0) != 0) continue;
    const std::string pname = name.substr(mp.size());
    const Tensor<T>* v = ckpt.find(prefix + "v/" + pname);
    if (!v) throw std::runtime_error("checkpoint: optimizer state for " + pname + " lacks second moments");
    state_[pname] = Moments{t, *v};
  }
}

// ---- configuration ---------------------------------------------------------

std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::Full:
      return "full";
    case TrainMode::RecOnly:
      return "rec_only";
    case TrainMode::RegFinetune:
      return "reg_finetune";
  }
  return "full";
}

TrainMode parse_train_mode(const std::string& s) {
  if (s == "full") return TrainMode::Full;
  if (s == "rec_only") return TrainMode::RecOnly;
  if (s == "reg_finetune") return TrainMode::RegFinetune;
  throw ConfigError("unknown training mode '" + s + "' (expected full, rec_only or reg_finetune)");
}

void TrainConfig::validate() const {
  if (batch < 2) throw ConfigError("batch must be at least 2");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be positive");
  if (halve_after < 0) throw ConfigError("halve_after must be non-negative");
  if (steps < 0) throw ConfigError("steps must be non-negative");
  if (log_every < 1) throw ConfigError("log_every must be positive");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be non-negative");
  if (cg_tie != "ae" && cg_tie != "content" && cg_tie != "none") {
    throw ConfigError("cg_tie must be ae, content or none");
  }
  try {
    weights.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

void TrainConfig::apply_to(NetConfig& net) const {
  if (no_residual) net.residual_learning = false;
  if (standard_discriminator) net.residual_discriminator = false;
}

namespace {

// Shortest text that parses back to the same double.
std::string fmt_double(double v) {
  char buf[40];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string join(const std::vector<std::string>& xs) {
  std::string out;
  for (const auto& x : xs) out += (out.empty() ? "" : ",") + x;
  return out;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

template <typename I>
I parse_integer(const std::string& key, const std::string& v) {
  I out{};
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) {
    throw ConfigError("config key '" + key + "': expected an integer, got '" + v + "'");
  }
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
  }
}

bool parse_flag(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw ConfigError("config key '" + key + "': expected a boolean, got '" + v + "'");
}

}  // namespace

KeyValues to_key_values(const NetConfig& net, const TrainConfig& t) {
  KeyValues kv = to_key_values(net);
  kv["batch"] = std::to_string(t.batch);
  kv["lr"] = fmt_double(t.lr);
  kv["halve_after"] = std::to_string(t.halve_after);
  kv["steps"] = std::to_string(t.steps);
  kv["seed"] = std::to_string(t.seed);
  kv["augment"] = t.augment ? "1" : "0";
  kv["no_rec"] = t.no_rec ? "1" : "0";
  kv["no_residual"] = t.no_residual ? "1" : "0";
  kv["standard_discriminator"] = t.standard_discriminator ? "1" : "0";
  kv["freeze_discriminator"] = t.freeze_discriminator ? "1" : "0";
  kv["mode"] = to_string(t.mode);
  kv["freeze"] = join(t.freeze);
  kv["log_every"] = std::to_string(t.log_every);
  kv["checkpoint_every"] = std::to_string(t.checkpoint_every);
  kv["cg_tie"] = t.cg_tie;
  kv["lambda_adv"] = fmt_double(t.weights.adversarial);
  kv["lambda_c"] = fmt_double(t.weights.content);
  kv["lambda_cg"] = fmt_double(t.weights.content_grad);
  kv["lambda_pi"] = fmt_double(t.weights.feature);
  kv["lambda_ae"] = fmt_double(t.weights.rec);
  kv["lambda_l"] = fmt_double(t.weights.latent);
  kv["lambda_d"] = fmt_double(t.weights.decov);
  return kv;
}

void apply_key_values(const KeyValues& kv, NetConfig& net_out, TrainConfig& t_out) {
  NetConfig net = net_out;
  TrainConfig t = t_out;
  bool explicit_cg = false;
  for (const auto& [k, v] : kv) {
    auto as_int = [&] { return parse_integer<int>(k, v); };
    auto as_flag = [&] { return parse_flag(k, v); };
    auto as_real = [&] { return parse_real(k, v); };
    if (k == "image_channels") net.image_channels = as_int();
    else if (k == "num_cameras") net.num_cameras = as_int();
    else if (k == "blind") net.blind = as_flag();
    else if (k == "patch") net.patch = as_int();
    else if (k == "base_channels") net.base_channels = as_int();
    else if (k == "depth") net.depth = as_int();
    else if (k == "latent_channels") net.latent_channels = as_int();
    else if (k == "skips") {
      net.skips.clear();
      for (const auto& s : split_list(v)) net.skips.push_back(parse_integer<int>(k, s));
    } else if (k == "sources") net.num_sources = as_int();
    else if (k == "dropout") net.dropout = as_real();
    else if (k == "explicit_z") net.explicit_z = as_flag();
    else if (k == "z_channels") net.z_channels = as_int();
    else if (k == "disc_channels") net.disc_channels = as_int();
    else if (k == "residual_learning") net.residual_learning = as_flag();
    else if (k == "residual_discriminator") net.residual_discriminator = as_flag();
    else if (k == "batch") t.batch = as_int();
    else if (k == "lr") t.lr = as_real();
    else if (k == "halve_after") t.halve_after = as_int();
    else if (k == "steps") t.steps = as_int();
    else if (k == "seed") t.seed = parse_integer<std::uint64_t>(k, v);
    else if (k == "augment") t.augment = as_flag();
    else if (k == "no_rec") t.no_rec = as_flag();
    else if (k == "no_residual") t.no_residual = as_flag();
    else if (k == "standard_discriminator") t.standard_discriminator = as_flag();
    else if (k == "freeze_discriminator") t.freeze_discriminator = as_flag();
    else if (k == "mode") t.mode = parse_train_mode(v);
    else if (k == "freeze") t.freeze = split_list(v);
    else if (k == "log_every") t.log_every = as_int();
    else if (k == "checkpoint_every") t.checkpoint_every = as_int();
    else if (k == "cg_tie") t.cg_tie = v;
    else if (k == "lambda_adv") t.weights.adversarial = as_real();
    else if (k == "lambda_c") t.weights.content = as_real();
    else if (k == "lambda_cg") {
      t.weights.content_grad = as_real();
      explicit_cg = true;
    } else if (k == "lambda_pi") t.weights.feature = as_real();
    else if (k == "lambda_ae") t.weights.rec = as_real();
    else if (k == "lambda_l") t.weights.latent = as_real();
    else if (k == "lambda_d") t.weights.decov = as_real();
    else throw ConfigError("unknown config key '" + k + "'");
  }
  if (t.cg_tie == "ae" || t.cg_tie == "content") {
    const double before = t.weights.content_grad;
    t.weights.tie_content_grad(t.cg_tie == "content");
    if (explicit_cg && before != t.weights.content_grad) {
      throw ConfigError("lambda_cg = " + fmt_double(before) + " conflicts with cg_tie = " + t.cg_tie +
                        " (set cg_tie = none to choose lambda_cg freely)");
    }
  }
  try {
    net.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  t.validate();
  net_out = std::move(net);
  t_out = std::move(t);
}

// ---- generator objective ------------------------------------------------

namespace {

// Batch positions grouped by noise source (stable), and the group boundaries.
struct SourceGroups {
  std::vector<int> order;
  std::vector<std::pair<int, std::vector<int>>> groups;
  bool identity = true;
};

SourceGroups group_sources(const std::vector<int>& sources, int num_sources) {
  SourceGroups g;
  for (int src = 0; src < num_sources; ++src) {
    std::vector<int> members;
    for (int i = 0; i < static_cast<int>(sources.size()); ++i) {
      if (sources[static_cast<std::size_t>(i)] == src) members.push_back(i);
    }
    if (members.empty()) continue;
    g.order.insert(g.order.end(), members.begin(), members.end());
    g.groups.emplace_back(src, std::move(members));
  }
  if (g.order.size() != sources.size()) {
    throw std::out_of_range("batch contains a noise source outside 0.." + std::to_string(num_sources - 1));
  }
  for (int i = 0; i < static_cast<int>(g.order.size()); ++i) g.identity &= g.order[static_cast<std::size_t>(i)] == i;
  return g;
}

template <typename T>
struct RecPass {
  Var<T> residual;
  Var<T> latent;
  Var<T> target;  // v in the same order
  std::vector<int> order;
  bool identity = true;
};

template <typename T>
RecPass<T> run_rec(Tape<T>& tape, Generator<T>& gen, const Batch<T>& b, const ForwardOptions& fwd) {
  const auto g = group_sources(b.sources, gen.config().num_sources);
  Var<T> v = tape.constant(b.residual);
  Var<T> y = tape.constant(b.clean);
  Var<T> c = gen.config().blind ? Var<T>{} : tape.constant(b.cond);
  RecPass<T> out;
  out.order = g.order;
  out.identity = g.identity;
  if (g.groups.size() == 1) {
    auto r = gen.rec_forward(tape, v, y, c, g.groups[0].first, fwd);
    out.residual = r.residual;
    out.latent = r.latent;
    out.target = v;
    return out;
  }
  std::vector<Var<T>> res, lat;
  for (const auto& [src, members] : g.groups) {
    std::span<const int> idx(members);
    auto r = gen.rec_forward(tape, select_batch(v, idx), select_batch(y, idx), c.valid() ? select_batch(c, idx) : c,
                             src, fwd);
    res.push_back(r.residual);
    lat.push_back(r.latent);
  }
  out.residual = concat_batch(std::span<const Var<T>>(res));
  out.latent = concat_batch(std::span<const Var<T>>(lat));
  out.target = select_batch(v, std::span<const int>(g.order));
  return out;
}

}  // namespace

template <typename T>
Var<T> generator_loss(Tape<T>& tape, Generator<T>& gen, Discriminator<T>& disc, const Batch<T>& b,
                      const RegOutputs<T>& reg, const TrainConfig& cfg, const ForwardOptions& fwd, LossReport& report,
                      TermSet terms) {
  const LossWeights& w = cfg.weights;
  const NetConfig& net = gen.config();
  const int n = b.size();
  LossTerms<T> lt;
  if (terms != TermSet::RecOnly) {
    Var<T> s = tape.constant(b.noisy);
    Var<T> c = net.blind ? Var<T>{} : tape.constant(b.cond);
    const bool res_d = net.residual_discriminator;
    Var<T> fake = res_d ? reg.residual : reg.denoised;
    if (w.adversarial != 0.0 || w.feature != 0.0) {
      auto df = disc.forward(tape, fake, s, c, true);
      if (w.adversarial != 0.0) lt.adv = generator_adv_loss(df.logits);
      if (w.feature != 0.0) {
        auto dr = disc.forward(tape, tape.constant(res_d ? b.residual : b.clean), s, c, true);
        lt.feature = feature_matching_loss(df.features, dr.features);
      }
    }
    lt.content = content_loss(reg.denoised, tape.constant(b.clean), w.content, w.content_grad);
    if (n >= 2 && w.decov != 0.0) lt.decov.push_back(decov_loss(reg.latent));
  }
  if (terms != TermSet::RegOnly && !cfg.no_rec && w.rec_active()) {
    auto rec = run_rec(tape, gen, b, fwd);
    lt.rec = rec_loss(rec.residual, rec.target);
    Var<T> reg_latent = rec.identity ? reg.latent : select_batch(reg.latent, std::span<const int>(rec.order));
    lt.latent = latent_loss(reg_latent, rec.latent);
    if (n >= 2 && w.decov != 0.0) lt.decov.push_back(decov_loss(rec.latent));
  }
  return total_loss(lt, w, report);
}

// ---- trainer ---------------------------------------------------------------

namespace {

NetConfig applied(NetConfig net, const TrainConfig& cfg) {
  cfg.validate();
  cfg.apply_to(net);
  return net;
}

bool has_prefix(const std::string& name, const std::string& prefix) { return name.rfind(prefix, 0) == 0; }

}  // namespace

template <typename T>
Trainer<T>::Trainer(NetConfig net, TrainConfig cfg)
    : cfg_(std::move(cfg)), gen_(applied(net, cfg_)), disc_(applied(net, cfg_)) {
  gen_.init(cfg_.seed);
  disc_.init(cfg_.seed);
  check_freeze_list();
}

template <typename T>
void Trainer<T>::set_steps(int steps) {
  TrainConfig c = cfg_;
  c.steps = steps;
  c.validate();
  cfg_ = c;
}

template <typename T>
void Trainer<T>::set_mode(TrainMode mode, std::vector<std::string> freeze) {
  cfg_.mode = mode;
  cfg_.freeze = std::move(freeze);
  check_freeze_list();
}

template <typename T>
void Trainer<T>::check_freeze_list() const {
  for (const auto& f : cfg_.freeze) {
    bool hit = false;
    for (const auto& p : gen_.params()) hit |= has_prefix(p.name, f);
    if (f.empty() || !hit) throw ConfigError("freeze list names unknown parameter '" + f + "'");
  }
}

template <typename T>
bool Trainer<T>::updates(const Parameter<T>& p) const {
  switch (cfg_.mode) {
    case TrainMode::Full:
      return true;
    case TrainMode::RecOnly:
      return has_prefix(p.name, "enc_rec") || has_prefix(p.name, "dec.");
    case TrainMode::RegFinetune:
      if (has_prefix(p.name, "enc_rec")) return false;
      for (const auto& f : cfg_.freeze) {
        if (has_prefix(p.name, f)) return false;
      }
      return true;
  }
  return true;
}

template <typename T>
std::uint64_t Trainer<T>::noise_key() const {
  return mix64(cfg_.seed ^ mix64(0x6e6f15e + step_));
}

template <typename T>
LossReport Trainer<T>::step(const Dataset<T>& data) {
  const bool augment = cfg_.augment && data.layout == Layout::Rgb;
  return step_on(sample_batch(data, cfg_.batch, cfg_.seed, step_, augment));
}

template <typename T>
LossReport Trainer<T>::step_on(const Batch<T>& b) {
  if (!gen_.config().blind && b.cond.shape().c() != gen_.config().cond_channels()) {
    throw ConfigError("dataset condition maps have " + std::to_string(b.cond.shape().c()) +
                      " channels but the network expects " + std::to_string(gen_.config().cond_channels()) +
                      " (num_cameras = " + std::to_string(gen_.config().num_cameras) + ")");
  }
  LossReport r = cfg_.mode == TrainMode::RecOnly ? rec_only_step(b) : full_step(b);
  ++step_;
  return r;
}

template <typename T>
LossReport Trainer<T>::full_step(const Batch<T>& b) {
  if (b.noisy.empty()) throw std::invalid_argument("training the Reg path needs noisy inputs");
  const std::uint64_t t = step_ + 1;
  const double lr = cfg_.lr_at(t);
  const ForwardOptions fwd{true, noise_key()};
  const NetConfig& net = gen_.config();
  LossReport rep;
  rep.step = t;

  Tape<T> gt;
  Var<T> s = gt.constant(b.noisy);
  Var<T> c = net.blind ? Var<T>{} : gt.constant(b.cond);
  RegOutputs<T> reg = gen_.reg_forward(gt, s, c, gen_.backbone_forward(gt, s, c), fwd);

  if (!cfg_.freeze_discriminator) {
    Tape<T> dt;
    Var<T> ds = dt.constant(b.noisy);
    Var<T> dc = net.blind ? Var<T>{} : dt.constant(b.cond);
    const bool res_d = net.residual_discriminator;
    auto real = disc_.forward(dt, dt.constant(res_d ? b.residual : b.clean), ds, dc);
    auto fake = disc_.forward(dt, dt.constant(res_d ? reg.residual.value() : reg.denoised.value()), ds, dc);
    Var<T> dl = discriminator_loss(real.logits, fake.logits);
    rep.d_loss = static_cast<double>(dl.value()[0]);
    if (!std::isfinite(rep.d_loss)) throw NumericError("non-finite loss term: d_loss");
    dt.backward(dl);
    disc_.params().zero_grad();
    dt.flush_param_grads();
    if (!adam_d_.step(disc_.params(), lr)) throw NumericError("non-finite discriminator gradient; step rejected");
  }

  Var<T> total = generator_loss(gt, gen_, disc_, b, reg, cfg_, fwd, rep);
  gt.backward(total);
  gen_.params().zero_grad();
  gt.flush_param_grads();
  if (!adam_g_.step(gen_.params(), lr, [this](const Parameter<T>& p) { return updates(p); })) {
    throw NumericError("non-finite generator gradient; step rejected");
  }
  return rep;
}

template <typename T>
LossReport Trainer<T>::rec_only_step(const Batch<T>& b) {
  const std::uint64_t t = step_ + 1;
  const ForwardOptions fwd{true, noise_key()};
  LossReport rep;
  rep.step = t;
  Tape<T> tape;
  auto rec = run_rec(tape, gen_, b, fwd);
  LossTerms<T> lt;
  lt.rec = rec_loss(rec.residual, rec.target);
  if (b.size() >= 2 && cfg_.weights.decov != 0.0) lt.decov.push_back(decov_loss(rec.latent));
  Var<T> total = total_loss(lt, cfg_.weights, rep);
  tape.backward(total);
  gen_.params().zero_grad();
  tape.flush_param_grads();
  if (!adam_g_.step(gen_.params(), cfg_.lr_at(t), [this](const Parameter<T>& p) { return updates(p); })) {
    throw NumericError("non-finite generator gradient; step rejected");
  }
  return rep;
}

template <typename T>
std::vector<LossReport> Trainer<T>::train(const Dataset<T>& data, const std::filesystem::path& out_dir,
                                          const std::function<void(const LossReport&)>& on_step) {
  if (data.samples.empty()) throw std::invalid_argument("training dataset is empty");
  std::filesystem::create_directories(out_dir);
  const auto log_path = out_dir / "train_log.csv";
  const bool fresh = step_ == 0 || !std::filesystem::exists(log_path);
  std::ofstream log(log_path, fresh ? std::ios::trunc : std::ios::app);
  if (!log) throw std::runtime_error("cannot write " + log_path.string());
  if (fresh) log << LossReport::csv_header() << '\n';

  auto ckpt_dir = [&](std::uint64_t s) {
    char name[32];
    std::snprintf(name, sizeof name, "ckpt_%06llu", static_cast<unsigned long long>(s));
    return out_dir / name;
  };
  std::vector<LossReport> reports;
  std::uint64_t last_saved = ~std::uint64_t{0};
  while (step_ < static_cast<std::uint64_t>(cfg_.steps)) {
    LossReport r = step(data);
    if (r.step % static_cast<std::uint64_t>(cfg_.log_every) == 0) log << r.csv_row() << '\n';
    if (cfg_.checkpoint_every > 0 && r.step % static_cast<std::uint64_t>(cfg_.checkpoint_every) == 0) {
      log.flush();
      save(ckpt_dir(r.step));
      last_saved = r.step;
    }
    if (on_step) on_step(r);
    reports.push_back(r);
  }
  log.flush();
  if (last_saved != step_) save(ckpt_dir(step_));
  return reports;
}

template <typename T>
Checkpoint<T> Trainer<T>::checkpoint() const {
  Checkpoint<T> ck;
  ck.step = step_;
  ck.config = to_key_values(gen_.config(), cfg_);
  ck.add_params(gen_.params(), "gen/");
  ck.add_params(disc_.params(), "disc/");
  adam_g_.save(ck, "adam_g/");
  adam_d_.save(ck, "adam_d/");
  return ck;
}

template <typename T>
void Trainer<T>::save(const std::filesystem::path& dir) const {
  save_checkpoint(dir, checkpoint());
}

template <typename T>
void Trainer<T>::load_weights(const Checkpoint<T>& ckpt) {
  ckpt.restore_params(gen_.params(), "gen/");
  ckpt.restore_params(disc_.params(), "disc/");
}

template <typename T>
Trainer<T> Trainer<T>::load(const std::filesystem::path& dir) {
  const Checkpoint<T> ck = load_checkpoint<T>(dir);
  KeyValues kv;
  for (const auto& [k, v] : ck.config) {
    if (!has_prefix(k, "adam_")) kv[k] = v;
  }
  NetConfig net;
  TrainConfig tc;
  apply_key_values(kv, net, tc);
  Trainer tr(net, tc);
  tr.load_weights(ck);
  tr.adam_g_.load(ck, "adam_g/");
  tr.adam_d_.load(ck, "adam_d/");
  tr.step_ = ck.step;
  return tr;
}

template <typename T>
std::vector<LossReport> pretrain_rec(Trainer<T>& trainer, const Dataset<T>& data, int steps) {
  if (data.samples.empty()) throw std::invalid_argument("pretrain_rec: dataset is empty");
  const TrainMode prev = trainer.config().mode;
  const auto prev_freeze = trainer.config().freeze;
  trainer.set_mode(TrainMode::RecOnly);
  std::vector<LossReport> out;
  for (int i = 0; i < steps; ++i) out.push_back(trainer.step(data));
  trainer.set_mode(prev, prev_freeze);
  return out;
}

template <typename T>
std::vector<LossReport> finetune_reg(Trainer<T>& trainer, const Dataset<T>& data, int steps,
                                     const std::vector<std::string>& freeze) {
  if (data.samples.empty()) throw std::invalid_argument("finetune_reg: fine-tuning set is empty");
  if (!data.has_noisy()) throw std::invalid_argument("finetune_reg: fine-tuning set needs noisy inputs");
  const TrainMode prev = trainer.config().mode;
  const auto prev_freeze = trainer.config().freeze;
  trainer.set_mode(TrainMode::RegFinetune, freeze);
  std::vector<LossReport> out;
  for (int i = 0; i < steps; ++i) out.push_back(trainer.step(data));
  trainer.set_mode(prev, prev_freeze);
  return out;
}

// ---- ablations -------------------------------------------------------------

std::vector<std::string> ablation_variants() {
  return {"full", "standard_discriminator", "no_rec", "no_rec+no_residual"};
}

void apply_variant(const std::string& variant, TrainConfig& cfg) {
  cfg.no_rec = cfg.no_residual = cfg.standard_discriminator = false;
  if (variant == "full") return;
  if (variant == "standard_discriminator") {
    cfg.standard_discriminator = true;
  } else if (variant == "no_rec") {
    cfg.no_rec = true;
  } else if (variant == "no_rec+no_residual") {
    cfg.no_rec = true;
    cfg.no_residual = true;
  } else {
    throw ConfigError("unknown ablation variant '" + variant + "'");
  }
}

const AblationRow& AblationTable::row(const std::string& variant) const {
  for (const auto& r : rows) {
    if (r.variant == variant) return r;
  }
  throw std::out_of_range("ablation table has no row " + variant);
}

std::string AblationTable::text() const {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-22s %10s %8s", "variant", "PSNR", "SSIM");
  os << line;
  for (auto s : seeds) {
    std::snprintf(line, sizeof line, "  psnr[s%llu] ssim[s%llu]", static_cast<unsigned long long>(s),
                  static_cast<unsigned long long>(s));
    os << line;
  }
  os << '\n';
  std::snprintf(line, sizeof line, "%-22s %10.3f %8.4f\n", "noisy input", noisy_psnr, noisy_ssim);
  os << line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-22s %10.3f %8.4f", r.variant.c_str(), r.mean_psnr, r.mean_ssim);
    os << line;
    for (std::size_t i = 0; i < r.psnr.size(); ++i) {
      std::snprintf(line, sizeof line, "  %10.3f %9.4f", r.psnr[i], r.ssim[i]);
      os << line;
    }
    os << '\n';
  }
  return os.str();
}

std::string AblationTable::csv() const {
  std::ostringstream os;
  os << "variant,mean_psnr,mean_ssim";
  for (auto s : seeds) os << ",psnr_seed" << s << ",ssim_seed" << s;
  os << '\n';
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
  };
  for (const auto& r : rows) {
    os << r.variant << ',' << num(r.mean_psnr) << ',' << num(r.mean_ssim);
    for (std::size_t i = 0; i < r.psnr.size(); ++i) os << ',' << num(r.psnr[i]) << ',' << num(r.ssim[i]);
    os << '\n';
  }
  return os.str();
}

void AblationTable::add(const std::string& variant, const MetricReport& report) {
  if (rows.empty()) {
    noisy_psnr = report.overall.psnr_noisy;
    noisy_ssim = report.overall.ssim_noisy;
  }
  auto it = std::find_if(rows.begin(), rows.end(), [&](const AblationRow& r) { return r.variant == variant; });
  if (it == rows.end()) {
    rows.push_back(AblationRow{variant, {}, {}, 0.0, 0.0});
    it = rows.end() - 1;
  }
  it->psnr.push_back(report.overall.psnr_denoised);
  it->ssim.push_back(report.overall.ssim_denoised);
  const double n = static_cast<double>(it->psnr.size());
  it->mean_psnr = std::accumulate(it->psnr.begin(), it->psnr.end(), 0.0) / n;
  it->mean_ssim = std::accumulate(it->ssim.begin(), it->ssim.end(), 0.0) / n;
}

MetricReport ablation_run(const Dataset<float>& train, const Dataset<float>& test, const NetConfig& net,
                          const TrainConfig& cfg, const std::string& variant, std::uint64_t seed) {
  TrainConfig c = cfg;
  apply_variant(variant, c);
  c.seed = seed;
  c.mode = TrainMode::Full;
  Trainer<float> tr(net, c);
  while (tr.step_count() < static_cast<std::uint64_t>(c.steps)) tr.step(train);
  return evaluate(tr.generator(), test);
}

AblationTable ablation_suite(const Dataset<float>& train, const Dataset<float>& test, const NetConfig& net,
                             const TrainConfig& cfg, const std::vector<std::uint64_t>& seeds,
                             const std::function<void(const std::string&)>& progress) {
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
  AblationTable table;
  table.seeds = seeds;
  for (const auto& variant : ablation_variants()) {
    for (auto seed : seeds) {
      const MetricReport rep = ablation_run(train, test, net, cfg, variant, seed);
      table.add(variant, rep);
      if (progress) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "%s seed %llu: PSNR %.3f dB, SSIM %.4f", variant.c_str(),
                      static_cast<unsigned long long>(seed), rep.overall.psnr_denoised, rep.overall.ssim_denoised);
        progress(buf);
      }
    }
  }
  return table;
}

// ---- composed gradient check ---------------------------------------------

GradcheckReport gradcheck_composed(int batch, double tolerance, std::uint64_t seed, std::size_t max_coords) {
  NetConfig net;
  net.patch = 8;
  net.depth = 2;
  net.base_channels = 3;
  net.latent_channels = 4;
  net.skips = {1, 2};
  net.disc_channels = 2;
  Generator<double> gen(net);
  gen.init(seed);
  // Nonzero last layer and biases keep ReLU inputs off their kink at 0.
  {
    auto& w = gen.params().get("dec.up1.w").value;
    const auto r = random_tensor(w.shape(), seed ^ 0xdec);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.3 * r[i];
  }
  std::uint64_t k = 0;
  for (auto& p : gen.params()) {
    if (p.name.size() < 2 || p.name.compare(p.name.size() - 2, 2, ".b") != 0) continue;
    const auto r = random_tensor(p.value.shape(), seed ^ (0xb1a5 + k++));
    for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] = 0.1 * r[i];
  }
  Discriminator<double> disc(net);
  disc.init(seed);

  Dataset<double> data;
  data.profiles = {{0, 0.02, 0.01}, {1, 0.03, 0.005}};
  for (int i = 0; i < batch; ++i) {
    RngStream scene(CounterRng(seed, 0x5ce0e).substream(static_cast<std::uint64_t>(i)));
    const auto& prof = data.profiles[static_cast<std::size_t>(i % 2)];
    auto s = make_sample(render_scene(3, 8, 8, scene), prof, 2, seed + static_cast<std::uint64_t>(i), false);
    s.index = i;
    s.profile_id = prof.id;
    data.samples.push_back(std::move(s));
  }
  std::vector<int> idx(static_cast<std::size_t>(batch));
  std::iota(idx.begin(), idx.end(), 0);
  const Batch<double> b = make_batch(data, idx);

  TrainConfig cfg;
  cfg.batch = batch;
  const ForwardOptions fwd{true, seed};
  auto loss = [&](Tape<double>& tape) {
    Var<double> s = tape.constant(b.noisy);
    Var<double> c = tape.constant(b.cond);
    RegOutputs<double> reg = gen.reg_forward(tape, s, c, gen.backbone_forward(tape, s, c), fwd);
    LossReport rep;
    return generator_loss(tape, gen, disc, b, reg, cfg, fwd, rep);
  };
  GradcheckOptions opts;
  opts.tolerance = tolerance;
  opts.eps = 1e-6;
  opts.seed = seed;
  opts.max_coords = max_coords;
  return gradcheck_params("generator+losses/batch" + std::to_string(batch), loss, gen.params(), opts);
}

template class Adam<float>;
template class Adam<double>;
template class Trainer<float>;
template class Trainer<double>;
template Var<float> generator_loss(Tape<float>&, Generator<float>&, Discriminator<float>&, const Batch<float>&,
                                   const RegOutputs<float>&, const TrainConfig&, const ForwardOptions&, LossReport&,
                                   TermSet);
template Var<double> generator_loss(Tape<double>&, Generator<double>&, Discriminator<double>&, const Batch<double>&,
                                    const RegOutputs<double>&, const TrainConfig&, const ForwardOptions&, LossReport&,
                                    TermSet);
template std::vector<LossReport> pretrain_rec(Trainer<float>&, const Dataset<float>&, int);
template std::vector<LossReport> pretrain_rec(Trainer<double>&, const Dataset<double>&, int);
template std::vector<LossReport> finetune_reg(Trainer<float>&, const Dataset<float>&, int,
                                              const std::vector<std::string>&);
template std::vector<LossReport> finetune_reg(Trainer<double>&, const Dataset<double>&, int,
                                              const std::vector<std::string>&);

}  // namespace nmd
