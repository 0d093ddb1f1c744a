#include "nmd/gradcheck.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>

#include "nmd/ops.hpp"
#include "nmd/rng.hpp"

namespace nmd {

namespace {

std::vector<std::size_t> pick_coords(std::size_t n, std::size_t max_coords, RngStream& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (max_coords == 0 || max_coords >= n) return idx;
  // Partial Fisher-Yates.
  for (std::size_t i = 0; i < max_coords; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.uniform() * static_cast<double>(n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(max_coords);
  return idx;
}

void record(GradcheckReport& rep, GradcheckCoord c) {
  ++rep.checked;
  if (rep.checked == 1 || c.error > rep.worst.error) rep.worst = c;
  if (!(c.error <= rep.tolerance)) rep.failures.push_back(std::move(c));
}

double rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
}

}  // namespace

std::string GradcheckReport::summary() const {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-28s %s  coords=%zu worst=%.3e at %s[%zu] (analytic %.9g, numeric %.9g)",
                op.c_str(), passed() ? "PASS" : "FAIL", checked, worst.error, worst.input.c_str(),
                worst.index, worst.analytic, worst.numeric);
  return buf;
}

Tensor<double> random_tensor(Shape shape, std::uint64_t seed, bool avoid_kinks) {
  RngStream rng(seed, 0x67c);
  Tensor<double> t(shape);
  for (auto& v : t.data()) {
    do {
      v = rng.uniform(-1.0, 1.0);
    } while (avoid_kinks && std::abs(v) < 1e-3);
  }
  return t;
}

GradcheckReport gradcheck(const std::string& op, const TapeFn& f, std::vector<Tensor<double>> inputs,
                          const GradcheckOptions& opts) {
  GradcheckReport rep;
  rep.op = op;
  rep.tolerance = opts.tolerance;

  Tensor<double> proj;
  auto evaluate = [&](Tape<double>& tape, bool leaves) {
    std::vector<Var<double>> vars;
    for (const auto& t : inputs) vars.push_back(leaves ? tape.leaf(t) : tape.constant(t));
    Var<double> out = f(tape, vars);
    if (proj.empty()) proj = random_tensor(out.shape(), opts.seed ^ 0x5bd1e995);
    return std::pair{sum(mul(out, tape.constant(proj))), vars};
  };

  Tape<double> tape;
  auto [loss, vars] = evaluate(tape, true);
  tape.backward(loss);

  RngStream rng(opts.seed, 0x9c);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor<double> analytic = tape.grad(vars[k]);
    for (std::size_t j : pick_coords(inputs[k].size(), opts.max_coords, rng)) {
      const double orig = inputs[k][j];
      inputs[k][j] = orig + opts.eps;
      Tape<double> tp;
      const double lp = evaluate(tp, false).first.value()[0];
      inputs[k][j] = orig - opts.eps;
      Tape<double> tm;
      const double lm = evaluate(tm, false).first.value()[0];
      inputs[k][j] = orig;
      const double numeric = (lp - lm) / (2.0 * opts.eps);
      record(rep, {std::to_string(k), j, analytic[j], numeric, rel_error(analytic[j], numeric)});
    }
  }
  return rep;
}

GradcheckReport gradcheck_params(const std::string& name,
                                 const std::function<Var<double>(Tape<double>&)>& loss_fn,
                                 ParamSet<double>& params, const GradcheckOptions& opts) {
  GradcheckReport rep;
  rep.op = name;
  rep.tolerance = opts.tolerance;

  params.zero_grad();
  {
    Tape<double> tape;
    Var<double> loss = loss_fn(tape);
    tape.backward(loss);
    tape.flush_param_grads();
  }

  std::vector<std::pair<Parameter<double>*, std::size_t>> coords;
  for (auto& p : params) {
    for (std::size_t j = 0; j < p.value.size(); ++j) coords.emplace_back(&p, j);
  }
  RngStream rng(opts.seed, 0x9d);
  for (std::size_t c : pick_coords(coords.size(), opts.max_coords, rng)) {
    auto [p, j] = coords[c];
    const double orig = p->value[j];
    p->value[j] = orig + opts.eps;
    Tape<double> tp;
    const double lp = loss_fn(tp).value()[0];
    p->value[j] = orig - opts.eps;
    Tape<double> tm;
    const double lm = loss_fn(tm).value()[0];
    p->value[j] = orig;
    const double numeric = (lp - lm) / (2.0 * opts.eps);
    record(rep, {p->name, j, p->grad[j], numeric, rel_error(p->grad[j], numeric)});
  }
  return rep;
}

void require_pass(const GradcheckReport& r) {
  if (r.passed()) return;
  const auto& f = r.failures.front();
  char buf[256];
  std::snprintf(buf, sizeof buf, "gradcheck failed for %s at input %s coordinate %zu: analytic %.9g vs numeric %.9g",
                r.op.c_str(), f.input.c_str(), f.index, f.analytic, f.numeric);
  throw GradcheckFailure(buf);
}

std::vector<GradcheckReport> check_primitives(double tolerance, std::uint64_t seed) {
  GradcheckOptions opts;
  opts.tolerance = tolerance;
  opts.seed = seed;
  std::vector<GradcheckReport> out;
  auto rnd = [&](Shape s, bool avoid = false) { return random_tensor(s, seed + out.size() * 131 + s.numel(), avoid); };
  using V = const std::vector<Var<double>>&;
  using Tp = Tape<double>&;

  out.push_back(gradcheck("conv2d/s1/same", [](Tp, V v) { return conv2d(v[0], v[1], 1, Padding::Same); },
                          {rnd({1, 2, 8, 8}), rnd({3, 2, 3, 3})}, opts));
  out.push_back(gradcheck("conv2d/s2/same", [](Tp, V v) { return conv2d(v[0], v[1], 2, Padding::Same); },
                          {rnd({2, 2, 8, 8}), rnd({3, 2, 3, 3})}, opts));
  out.push_back(gradcheck("conv2d/s1/valid", [](Tp, V v) { return conv2d(v[0], v[1], 1, Padding::Valid); },
                          {rnd({1, 2, 6, 6}), rnd({2, 2, 3, 3})}, opts));
  out.push_back(gradcheck("conv2d/1x1", [](Tp, V v) { return conv2d(v[0], v[1], 1, Padding::Same); },
                          {rnd({2, 3, 4, 4}), rnd({2, 3, 1, 1})}, opts));
  out.push_back(gradcheck("add_bias", [](Tp, V v) { return add_bias(v[0], v[1]); },
                          {rnd({2, 3, 4, 4}), rnd({3})}, opts));
  out.push_back(gradcheck("relu", [](Tp, V v) { return relu(v[0]); }, {rnd({2, 3, 4, 4}, true)}, opts));
  out.push_back(gradcheck("leaky_relu", [](Tp, V v) { return leaky_relu(v[0], 0.2); },
                          {rnd({2, 3, 4, 4}, true)}, opts));
  out.push_back(gradcheck("down2", [](Tp, V v) { return down2(v[0]); }, {rnd({1, 1, 4, 4})}, opts));
  out.push_back(gradcheck("up2", [](Tp, V v) { return up2(v[0]); }, {rnd({1, 2, 3, 3})}, opts));
  out.push_back(gradcheck("concat_channels", [](Tp, V v) { return concat_channels({v[0], v[1]}); },
                          {rnd({2, 1, 3, 3}), rnd({2, 2, 3, 3})}, opts));
  out.push_back(gradcheck("concat_batch",
                          [](Tp, V v) { return concat_batch(std::span<const Var<double>>(v.data(), 2)); },
                          {rnd({1, 2, 3, 3}), rnd({2, 2, 3, 3})}, opts));
  out.push_back(gradcheck("select_batch",
                          [](Tp, V v) {
                            const int idx[] = {2, 0, 2};
                            return select_batch(v[0], std::span<const int>(idx));
                          },
                          {rnd({3, 2, 2, 2})}, opts));
  out.push_back(gradcheck("add", [](Tp, V v) { return add(v[0], v[1]); }, {rnd({2, 3}), rnd({2, 3})}, opts));
  out.push_back(gradcheck("sub", [](Tp, V v) { return sub(v[0], v[1]); }, {rnd({2, 3}), rnd({2, 3})}, opts));
  out.push_back(gradcheck("mul", [](Tp, V v) { return mul(v[0], v[1]); }, {rnd({2, 3}), rnd({2, 3})}, opts));
  out.push_back(gradcheck("scale", [](Tp, V v) { return scale(v[0], -2.5); }, {rnd({2, 3})}, opts));
  out.push_back(gradcheck("abs", [](Tp, V v) { return abs(v[0]); }, {rnd({2, 3, 2, 2}, true)}, opts));
  out.push_back(gradcheck("square", [](Tp, V v) { return square(v[0]); }, {rnd({2, 3, 2, 2})}, opts));
  out.push_back(gradcheck("softplus", [](Tp, V v) { return softplus(scale(v[0], 4.0)); },
                          {rnd({2, 3, 2, 2})}, opts));
  out.push_back(gradcheck("sum", [](Tp, V v) { return sum(v[0]); }, {rnd({2, 3, 2, 2})}, opts));
  out.push_back(gradcheck("mean", [](Tp, V v) { return mean(v[0]); }, {rnd({2, 3, 2, 2})}, opts));
  out.push_back(gradcheck("diff_x", [](Tp, V v) { return diff_x(v[0]); }, {rnd({2, 2, 3, 4})}, opts));
  out.push_back(gradcheck("diff_y", [](Tp, V v) { return diff_y(v[0]); }, {rnd({2, 2, 4, 3})}, opts));
  out.push_back(gradcheck("decov", [](Tp, V v) { return decov(v[0]); }, {rnd({4, 3, 2, 1})}, opts));
  return out;
}

}  // namespace nmd
