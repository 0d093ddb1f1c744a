#include "nmd/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include <Eigen/Core>

namespace nmd {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

struct ConvGeom {
  int n, cin, h, w;
  int cout, k;
  int stride, pad;
  int ho, wo;

  std::size_t rows() const { return static_cast<std::size_t>(cin) * k * k; }
  std::size_t cols() const { return static_cast<std::size_t>(n) * ho * wo; }
};

// Output columns [lo, hi) whose input column ow * stride - pad + kw lies inside [0, w).
inline void valid_range(int w, int wo, int stride, int pad, int kw, int& lo, int& hi) {
  const int off = kw - pad;
  lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
  hi = w - 1 - off < 0 ? 0 : (w - 1 - off) / stride + 1;
  lo = std::min(lo, wo);
  hi = std::clamp(hi, lo, wo);
}

template <typename T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
  const std::size_t ncols = g.cols();
  for (int ci = 0; ci < g.cin; ++ci) {
    for (int kh = 0; kh < g.k; ++kh) {
      for (int kw = 0; kw < g.k; ++kw) {
        T* row = cols + ((static_cast<std::size_t>(ci) * g.k + kh) * g.k + kw) * ncols;
        int lo, hi;
        valid_range(g.w, g.wo, g.stride, g.pad, kw, lo, hi);
        const int off = kw - g.pad;
        for (int n = 0; n < g.n; ++n) {
          const T* plane = x + (static_cast<std::size_t>(n) * g.cin + ci) * g.h * g.w;
          for (int oh = 0; oh < g.ho; ++oh, row += g.wo) {
            const int ih = oh * g.stride - g.pad + kh;
            if (ih < 0 || ih >= g.h) {
              std::fill(row, row + g.wo, T{0});
              continue;
            }
            const T* src = plane + ih * g.w;
            std::fill(row, row + lo, T{0});
            if (g.stride == 1) {
              std::copy(src + lo + off, src + hi + off, row + lo);
            } else {
              for (int ow = lo; ow < hi; ++ow) row[ow] = src[ow * g.stride + off];
            }
            std::fill(row + hi, row + g.wo, T{0});
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeom& g, T* dx) {
  const std::size_t ncols = g.cols();
  for (int ci = 0; ci < g.cin; ++ci) {
    for (int kh = 0; kh < g.k; ++kh) {
      for (int kw = 0; kw < g.k; ++kw) {
        const T* row = cols + ((static_cast<std::size_t>(ci) * g.k + kh) * g.k + kw) * ncols;
        int lo, hi;
        valid_range(g.w, g.wo, g.stride, g.pad, kw, lo, hi);
        const int off = kw - g.pad;
        for (int n = 0; n < g.n; ++n) {
          T* plane = dx + (static_cast<std::size_t>(n) * g.cin + ci) * g.h * g.w;
          for (int oh = 0; oh < g.ho; ++oh, row += g.wo) {
            const int ih = oh * g.stride - g.pad + kh;
            if (ih < 0 || ih >= g.h) continue;
            T* dst = plane + ih * g.w;
            if (g.stride == 1) {
              for (int ow = lo; ow < hi; ++ow) dst[ow + off] += row[ow];
            } else {
              for (int ow = lo; ow < hi; ++ow) dst[ow * g.stride + off] += row[ow];
            }
          }
        }
      }
    }
  }
}

// [O x (N*HoWo)] <-> NCHW output.
template <typename T>
void mat_to_nchw(const T* m, const ConvGeom& g, T* out) {
  const std::size_t hw = static_cast<std::size_t>(g.ho) * g.wo;
  for (int o = 0; o < g.cout; ++o) {
    for (int n = 0; n < g.n; ++n) {
      const T* src = m + static_cast<std::size_t>(o) * g.cols() + n * hw;
      T* dst = out + (static_cast<std::size_t>(n) * g.cout + o) * hw;
      std::copy(src, src + hw, dst);
    }
  }
}

template <typename T>
void nchw_to_mat(const T* in, const ConvGeom& g, T* m) {
  const std::size_t hw = static_cast<std::size_t>(g.ho) * g.wo;
  for (int o = 0; o < g.cout; ++o) {
    for (int n = 0; n < g.n; ++n) {
      const T* src = in + (static_cast<std::size_t>(n) * g.cout + o) * hw;
      T* dst = m + static_cast<std::size_t>(o) * g.cols() + n * hw;
      std::copy(src, src + hw, dst);
    }
  }
}

template <typename T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src, T factor = T{1}) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += factor * s[i];
}

template <typename T>
Tape<T>& same_tape(Var<T> a, Var<T> b, const char* op) {
  if (&a.tape() != &b.tape()) throw std::invalid_argument(std::string(op) + ": operands on different tapes");
  return a.tape();
}

template <typename T>
Var<T> unary(const char* op, Var<T> x, T (*f)(T), T (*df)(T x, T y)) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  const int xid = x.id();
  return x.tape().record(op, std::move(out), {x}, [xid, df](Tape<T>& tp, int self) {
    if (!tp.needs_grad(xid)) return;
    const auto& node = tp.node(self);
    const auto& xv = tp.node(xid).value;
    auto& gx = tp.grad_acc(xid);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += node.grad[i] * df(xv[i], node.value[i]);
  });
}

}  // namespace

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> kernel, int stride, Padding pad) {
  Tape<T>& tape = same_tape(x, kernel, "conv2d");
  const Shape& xs = x.shape();
  const Shape& ks = kernel.shape();
  require_rank(xs, 4, "conv2d input");
  require_rank(ks, 4, "conv2d kernel");
  if (ks[2] != ks[3] || ks[2] % 2 == 0) {
    throw ShapeError("conv2d: kernel must be square with odd size, got " + ks.str());
  }
  if (xs.c() != ks[1]) {
    throw ShapeError("conv2d: input channels " + std::to_string(xs.c()) + " != kernel in-channels " +
                     std::to_string(ks[1]) + " (input " + xs.str() + ", kernel " + ks.str() + ")");
  }
  if (stride != 1 && stride != 2) throw ShapeError("conv2d: stride must be 1 or 2");

  ConvGeom g{xs.n(), xs.c(), xs.h(), xs.w(), ks[0], ks[2], stride, 0, 0, 0};
  g.pad = pad == Padding::Same ? (g.k - 1) / 2 : 0;
  g.ho = (g.h + 2 * g.pad - g.k) / stride + 1;
  g.wo = (g.w + 2 * g.pad - g.k) / stride + 1;
  if (g.h + 2 * g.pad < g.k || g.w + 2 * g.pad < g.k) {
    throw ShapeError("conv2d: input " + xs.str() + " smaller than kernel " + ks.str());
  }

  auto cols = std::make_shared<std::vector<T>>(g.rows() * g.cols());
  im2col(x.value().ptr(), g, cols->data());

  std::vector<T> outm(static_cast<std::size_t>(g.cout) * g.cols());
  {
    CMapMat<T> K(kernel.value().ptr(), g.cout, static_cast<Eigen::Index>(g.rows()));
    CMapMat<T> C(cols->data(), static_cast<Eigen::Index>(g.rows()), static_cast<Eigen::Index>(g.cols()));
    MapMat<T> O(outm.data(), g.cout, static_cast<Eigen::Index>(g.cols()));
    O.noalias() = K * C;
  }
  Tensor<T> out(Shape{g.n, g.cout, g.ho, g.wo});
  mat_to_nchw(outm.data(), g, out.ptr());

  const int xid = x.id();
  const int kid = kernel.id();
  return tape.record("conv2d", std::move(out), {x, kernel}, [g, cols, xid, kid](Tape<T>& tp, int self) {
    const auto& gy = tp.node(self).grad;
    std::vector<T> gm(static_cast<std::size_t>(g.cout) * g.cols());
    nchw_to_mat(gy.ptr(), g, gm.data());
    CMapMat<T> G(gm.data(), g.cout, static_cast<Eigen::Index>(g.cols()));
    if (tp.needs_grad(kid)) {
      CMapMat<T> C(cols->data(), static_cast<Eigen::Index>(g.rows()), static_cast<Eigen::Index>(g.cols()));
      MapMat<T> GK(tp.grad_acc(kid).ptr(), g.cout, static_cast<Eigen::Index>(g.rows()));
      GK.noalias() += G * C.transpose();
    }
    if (tp.needs_grad(xid)) {
      CMapMat<T> K(tp.node(kid).value.ptr(), g.cout, static_cast<Eigen::Index>(g.rows()));
      std::vector<T> gcols(g.rows() * g.cols());
      MapMat<T> GC(gcols.data(), static_cast<Eigen::Index>(g.rows()), static_cast<Eigen::Index>(g.cols()));
      GC.noalias() = K.transpose() * G;
      col2im_add(gcols.data(), g, tp.grad_acc(xid).ptr());
    }
  });
}

template <typename T>
Var<T> add_bias(Var<T> x, Var<T> bias) {
  Tape<T>& tape = same_tape(x, bias, "add_bias");
  const Shape& xs = x.shape();
  require_rank(xs, 4, "add_bias input");
  if (bias.shape().rank() != 1 || bias.shape()[0] != xs.c()) {
    throw ShapeError("add_bias: bias " + bias.shape().str() + " does not match channels of " + xs.str());
  }
  const std::size_t hw = static_cast<std::size_t>(xs.h()) * xs.w();
  Tensor<T> out = x.value();
  const auto& b = bias.value();
  for (int n = 0; n < xs.n(); ++n) {
    for (int c = 0; c < xs.c(); ++c) {
      T* p = out.ptr() + (static_cast<std::size_t>(n) * xs.c() + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) p[i] += b[static_cast<std::size_t>(c)];
    }
  }
  const int xid = x.id();
  const int bid = bias.id();
  return tape.record("add_bias", std::move(out), {x, bias}, [xs, hw, xid, bid](Tape<T>& tp, int self) {
    const auto& gy = tp.node(self).grad;
    if (tp.needs_grad(xid)) accumulate(tp.grad_acc(xid), gy);
    if (tp.needs_grad(bid)) {
      auto& gb = tp.grad_acc(bid);
      for (int n = 0; n < xs.n(); ++n) {
        for (int c = 0; c < xs.c(); ++c) {
          const T* p = gy.ptr() + (static_cast<std::size_t>(n) * xs.c() + c) * hw;
          T s{0};
          for (std::size_t i = 0; i < hw; ++i) s += p[i];
          gb[static_cast<std::size_t>(c)] += s;
        }
      }
    }
  });
}

template <typename T>
Var<T> leaky_relu(Var<T> x, T slope) {
  if (!(slope >= T{0} && slope < T{1})) throw std::invalid_argument("leaky_relu: slope must be in [0, 1)");
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > T{0} ? xv[i] : slope * xv[i];
  const int xid = x.id();
  return x.tape().record(slope == T{0} ? "relu" : "leaky_relu", std::move(out), {x},
                         [xid, slope](Tape<T>& tp, int self) {
                           if (!tp.needs_grad(xid)) return;
                           const auto& gy = tp.node(self).grad;
                           const auto& xv = tp.node(xid).value;
                           auto& gx = tp.grad_acc(xid);
                           for (std::size_t i = 0; i < gx.size(); ++i) {
                             gx[i] += xv[i] > T{0} ? gy[i] : slope * gy[i];
                           }
                         });
}

template <typename T>
Var<T> resample(Var<T> x, Resample mode) {
  const Shape& xs = x.shape();
  require_rank(xs, 4, "resample input");
  const int xid = x.id();
  if (mode == Resample::Down2) {
    if (xs.h() % 2 != 0 || xs.w() % 2 != 0) {
      throw ShapeError("down2: spatial dims must be even, got " + xs.str());
    }
    const int ho = xs.h() / 2;
    const int wo = xs.w() / 2;
    Tensor<T> out(Shape{xs.n(), xs.c(), ho, wo});
    const Tensor<T>& xv = x.value();
    for (int nc = 0; nc < xs.n() * xs.c(); ++nc) {
      const T* src = xv.ptr() + static_cast<std::size_t>(nc) * xs.h() * xs.w();
      T* dst = out.ptr() + static_cast<std::size_t>(nc) * ho * wo;
      for (int i = 0; i < ho; ++i) {
        for (int j = 0; j < wo; ++j) {
          const T* p = src + 2 * i * xs.w() + 2 * j;
          dst[i * wo + j] = (p[0] + p[1] + p[xs.w()] + p[xs.w() + 1]) * T(0.25);
        }
      }
    }
    return x.tape().record("down2", std::move(out), {x}, [xs, ho, wo, xid](Tape<T>& tp, int self) {
      if (!tp.needs_grad(xid)) return;
      const auto& gy = tp.node(self).grad;
      auto& gx = tp.grad_acc(xid);
      for (int nc = 0; nc < xs.n() * xs.c(); ++nc) {
        const T* src = gy.ptr() + static_cast<std::size_t>(nc) * ho * wo;
        T* dst = gx.ptr() + static_cast<std::size_t>(nc) * xs.h() * xs.w();
        for (int i = 0; i < ho; ++i) {
          for (int j = 0; j < wo; ++j) {
            const T g = src[i * wo + j] * T(0.25);
            T* p = dst + 2 * i * xs.w() + 2 * j;
            p[0] += g;
            p[1] += g;
            p[xs.w()] += g;
            p[xs.w() + 1] += g;
          }
        }
      }
    });
  }
  const int ho = xs.h() * 2;
  const int wo = xs.w() * 2;
  Tensor<T> out(Shape{xs.n(), xs.c(), ho, wo});
  const Tensor<T>& xv = x.value();
  for (int nc = 0; nc < xs.n() * xs.c(); ++nc) {
    const T* src = xv.ptr() + static_cast<std::size_t>(nc) * xs.h() * xs.w();
    T* dst = out.ptr() + static_cast<std::size_t>(nc) * ho * wo;
    for (int i = 0; i < ho; ++i) {
      for (int j = 0; j < wo; ++j) dst[i * wo + j] = src[(i / 2) * xs.w() + j / 2];
    }
  }
  return x.tape().record("up2", std::move(out), {x}, [xs, ho, wo, xid](Tape<T>& tp, int self) {
    if (!tp.needs_grad(xid)) return;
    const auto& gy = tp.node(self).grad;
    auto& gx = tp.grad_acc(xid);
    for (int nc = 0; nc < xs.n() * xs.c(); ++nc) {
      const T* src = gy.ptr() + static_cast<std::size_t>(nc) * ho * wo;
      T* dst = gx.ptr() + static_cast<std::size_t>(nc) * xs.h() * xs.w();
      for (int i = 0; i < ho; ++i) {
        for (int j = 0; j < wo; ++j) dst[(i / 2) * xs.w() + j / 2] += src[i * wo + j];
      }
    }
  });
}

template <typename T>
Var<T> concat_channels(std::span<const Var<T>> xs) {
  if (xs.empty()) throw ShapeError("concat_channels: no inputs");
  Tape<T>& tape = xs[0].tape();
  const Shape& s0 = xs[0].shape();
  require_rank(s0, 4, "concat_channels input");
  int ctot = 0;
  for (const auto& v : xs) {
    same_tape(xs[0], v, "concat_channels");
    const Shape& s = v.shape();
    require_rank(s, 4, "concat_channels input");
    if (s.n() != s0.n() || s.h() != s0.h() || s.w() != s0.w()) {
      throw ShapeError("concat_channels: spatial/batch mismatch " + s0.str() + " vs " + s.str());
    }
    ctot += s.c();
  }
  const std::size_t hw = static_cast<std::size_t>(s0.h()) * s0.w();
  Tensor<T> out(Shape{s0.n(), ctot, s0.h(), s0.w()});
  std::vector<int> ids;
  std::vector<int> chans;
  for (int n = 0; n < s0.n(); ++n) {
    T* dst = out.ptr() + static_cast<std::size_t>(n) * ctot * hw;
    for (const auto& v : xs) {
      const std::size_t block = static_cast<std::size_t>(v.shape().c()) * hw;
      const T* src = v.value().ptr() + static_cast<std::size_t>(n) * block;
      dst = std::copy(src, src + block, dst);
    }
  }
  for (const auto& v : xs) {
    ids.push_back(v.id());
    chans.push_back(v.shape().c());
  }
  std::vector<Var<T>> inputs(xs.begin(), xs.end());
  const int batch = s0.n();
  return tape.record("concat_channels", std::move(out), inputs,
                     [ids, chans, ctot, hw, batch](Tape<T>& tp, int self) {
                       const auto& gy = tp.node(self).grad;
                       std::size_t coff = 0;
                       for (std::size_t k = 0; k < ids.size(); ++k) {
                         const std::size_t block = static_cast<std::size_t>(chans[k]) * hw;
                         if (tp.needs_grad(ids[k])) {
                           auto& gx = tp.grad_acc(ids[k]);
                           for (int n = 0; n < batch; ++n) {
                             const T* src = gy.ptr() + static_cast<std::size_t>(n) * ctot * hw + coff;
                             T* dst = gx.ptr() + static_cast<std::size_t>(n) * block;
                             for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
                           }
                         }
                         coff += block;
                       }
                     });
}

template <typename T>
Var<T> concat_batch(std::span<const Var<T>> xs) {
  if (xs.empty()) throw ShapeError("concat_batch: no inputs");
  Tape<T>& tape = xs[0].tape();
  const Shape& s0 = xs[0].shape();
  int ntot = 0;
  for (const auto& v : xs) {
    same_tape(xs[0], v, "concat_batch");
    const Shape& s = v.shape();
    if (s.rank() != s0.rank()) throw ShapeError("concat_batch: rank mismatch");
    for (int a = 1; a < s.rank(); ++a) {
      if (s[a] != s0[a]) throw ShapeError("concat_batch: extent mismatch " + s0.str() + " vs " + s.str());
    }
    ntot += s[0];
  }
  std::vector<int> dims(s0.dims().begin(), s0.dims().end());
  dims[0] = ntot;
  std::vector<T> data;
  data.reserve(static_cast<std::size_t>(ntot) * (s0.numel() / static_cast<std::size_t>(s0[0])));
  std::vector<int> ids;
  for (const auto& v : xs) {
    data.insert(data.end(), v.value().data().begin(), v.value().data().end());
    ids.push_back(v.id());
  }
  std::vector<Var<T>> inputs(xs.begin(), xs.end());
  return tape.record("concat_batch", Tensor<T>(Shape(dims), std::move(data)), inputs,
                     [ids](Tape<T>& tp, int self) {
                       const auto& gy = tp.node(self).grad;
                       std::size_t off = 0;
                       for (int id : ids) {
                         const std::size_t len = tp.node(id).value.size();
                         if (tp.needs_grad(id)) {
                           auto& gx = tp.grad_acc(id);
                           for (std::size_t i = 0; i < len; ++i) gx[i] += gy[off + i];
                         }
                         off += len;
                       }
                     });
}

template <typename T>
Var<T> select_batch(Var<T> x, std::span<const int> indices) {
  const Shape& xs = x.shape();
  if (indices.empty()) throw ShapeError("select_batch: empty index list");
  const std::size_t per = xs.numel() / static_cast<std::size_t>(xs[0]);
  std::vector<int> dims(xs.dims().begin(), xs.dims().end());
  dims[0] = static_cast<int>(indices.size());
  std::vector<T> data;
  data.reserve(per * indices.size());
  for (int i : indices) {
    if (i < 0 || i >= xs[0]) throw ShapeError("select_batch: index out of range");
    const T* src = x.value().ptr() + static_cast<std::size_t>(i) * per;
    data.insert(data.end(), src, src + per);
  }
  std::vector<int> idx(indices.begin(), indices.end());
  const int xid = x.id();
  return x.tape().record("select_batch", Tensor<T>(Shape(dims), std::move(data)), {x},
                         [idx, per, xid](Tape<T>& tp, int self) {
                           if (!tp.needs_grad(xid)) return;
                           const auto& gy = tp.node(self).grad;
                           auto& gx = tp.grad_acc(xid);
                           for (std::size_t k = 0; k < idx.size(); ++k) {
                             T* dst = gx.ptr() + static_cast<std::size_t>(idx[k]) * per;
                             const T* src = gy.ptr() + k * per;
                             for (std::size_t i = 0; i < per; ++i) dst[i] += src[i];
                           }
                         });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  Tape<T>& tape = same_tape(a, b, "add");
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  accumulate(out, b.value());
  const int aid = a.id();
  const int bid = b.id();
  return tape.record("add", std::move(out), {a, b}, [aid, bid](Tape<T>& tp, int self) {
    const auto& gy = tp.node(self).grad;
    if (tp.needs_grad(aid)) accumulate(tp.grad_acc(aid), gy);
    if (tp.needs_grad(bid)) accumulate(tp.grad_acc(bid), gy);
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  Tape<T>& tape = same_tape(a, b, "sub");
  require_same_shape(a.shape(), b.shape(), "sub");
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  const int aid = a.id();
  const int bid = b.id();
  return tape.record("sub", std::move(out), {a, b}, [aid, bid](Tape<T>& tp, int self) {
    const auto& gy = tp.node(self).grad;
    if (tp.needs_grad(aid)) accumulate(tp.grad_acc(aid), gy);
    if (tp.needs_grad(bid)) accumulate(tp.grad_acc(bid), gy, T{-1});
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  Tape<T>& tape = same_tape(a, b, "mul");
  require_same_shape(a.shape(), b.shape(), "mul");
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const int aid = a.id();
  const int bid = b.id();
  return tape.record("mul", std::move(out), {a, b}, [aid, bid](Tape<T>& tp, int self) {
    const auto& gy = tp.node(self).grad;
    if (tp.needs_grad(aid)) {
      const auto& bv = tp.node(bid).value;
      auto& ga = tp.grad_acc(aid);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] * bv[i];
    }
    if (tp.needs_grad(bid)) {
      const auto& av = tp.node(aid).value;
      auto& gb = tp.grad_acc(bid);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gy[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> x, T s) {
  const auto& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * xv[i];
  const int xid = x.id();
  return x.tape().record("scale", std::move(out), {x}, [xid, s](Tape<T>& tp, int self) {
    if (tp.needs_grad(xid)) accumulate(tp.grad_acc(xid), tp.node(self).grad, s);
  });
}

template <typename T>
Var<T> abs(Var<T> x) {
  return unary<T>(
      "abs", x, [](T v) { return std::abs(v); },
      [](T v, T) { return v > T{0} ? T{1} : (v < T{0} ? T{-1} : T{0}); });
}

template <typename T>
Var<T> square(Var<T> x) {
  return unary<T>(
      "square", x, [](T v) { return v * v; }, [](T v, T) { return T{2} * v; });
}

template <typename T>
Var<T> softplus(Var<T> x) {
  return unary<T>(
      "softplus", x,
      [](T v) { return v > T{0} ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); },
      [](T v, T) { return v >= T{0} ? T{1} / (T{1} + std::exp(-v)) : std::exp(v) / (T{1} + std::exp(v)); });
}

template <typename T>
Var<T> sum(Var<T> x) {
  const auto& xv = x.value();
  T s{0};
  for (T v : xv.data()) s += v;
  const int xid = x.id();
  return x.tape().record("sum", Tensor<T>(Shape{1}, s), {x}, [xid](Tape<T>& tp, int self) {
    if (!tp.needs_grad(xid)) return;
    const T g = tp.node(self).grad[0];
    auto& gx = tp.grad_acc(xid);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
}

template <typename T>
Var<T> mean(Var<T> x) {
  const auto& xv = x.value();
  T s{0};
  for (T v : xv.data()) s += v;
  const T inv = T{1} / static_cast<T>(xv.size());
  const int xid = x.id();
  return x.tape().record("mean", Tensor<T>(Shape{1}, s * inv), {x}, [xid, inv](Tape<T>& tp, int self) {
    if (!tp.needs_grad(xid)) return;
    const T g = tp.node(self).grad[0] * inv;
    auto& gx = tp.grad_acc(xid);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
}

namespace {

// Shared implementation of forward differences; `along_w` selects the axis.
template <typename T>
Var<T> spatial_diff(Var<T> x, bool along_w) {
  const Shape& xs = x.shape();
  require_rank(xs, 4, along_w ? "diff_x input" : "diff_y input");
  const int h = xs.h();
  const int w = xs.w();
  const auto& xv = x.value();
  Tensor<T> out(xs);
  for (int nc = 0; nc < xs.n() * xs.c(); ++nc) {
    const T* src = xv.ptr() + static_cast<std::size_t>(nc) * h * w;
    T* dst = out.ptr() + static_cast<std::size_t>(nc) * h * w;
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        if (along_w) {
          dst[i * w + j] = j + 1 < w ? src[i * w + j + 1] - src[i * w + j] : T{0};
        } else {
          dst[i * w + j] = i + 1 < h ? src[(i + 1) * w + j] - src[i * w + j] : T{0};
        }
      }
    }
  }
  const int xid = x.id();
  return x.tape().record(along_w ? "diff_x" : "diff_y", std::move(out), {x},
                         [xs, h, w, xid, along_w](Tape<T>& tp, int self) {
                           if (!tp.needs_grad(xid)) return;
                           const auto& gy = tp.node(self).grad;
                           auto& gx = tp.grad_acc(xid);
                           for (int nc = 0; nc < xs.n() * xs.c(); ++nc) {
                             const T* g = gy.ptr() + static_cast<std::size_t>(nc) * h * w;
                             T* d = gx.ptr() + static_cast<std::size_t>(nc) * h * w;
                             for (int i = 0; i < h; ++i) {
                               for (int j = 0; j < w; ++j) {
                                 const T v = g[i * w + j];
                                 if (along_w && j + 1 < w) {
                                   d[i * w + j + 1] += v;
                                   d[i * w + j] -= v;
                                 } else if (!along_w && i + 1 < h) {
                                   d[(i + 1) * w + j] += v;
                                   d[i * w + j] -= v;
                                 }
                               }
                             }
                           }
                         });
}

}  // namespace

template <typename T>
Var<T> diff_x(Var<T> x) {
  return spatial_diff(x, true);
}

template <typename T>
Var<T> diff_y(Var<T> x) {
  return spatial_diff(x, false);
}

template <typename T>
Var<T> decov(Var<T> x) {
  const Shape& xs = x.shape();
  const int n = xs[0];
  if (n < 2) throw ShapeError("decov: batch size must be at least 2, got " + std::to_string(n));
  const auto d = static_cast<Eigen::Index>(xs.numel() / static_cast<std::size_t>(n));

  auto centered = std::make_shared<RowMat<T>>(CMapMat<T>(x.value().ptr(), n, d));
  for (Eigen::Index j = 0; j < d; ++j) {
    T m{0};
    for (int i = 0; i < n; ++i) m += (*centered)(i, j);
    m /= static_cast<T>(n);
    for (int i = 0; i < n; ++i) (*centered)(i, j) -= m;
  }
  auto offdiag = std::make_shared<RowMat<T>>(d, d);
  offdiag->noalias() = centered->transpose() * (*centered);
  *offdiag /= static_cast<T>(n);
  offdiag->diagonal().setZero();
  T frob{0};
  for (Eigen::Index i = 0; i < d; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) frob += (*offdiag)(i, j) * (*offdiag)(i, j);
  }
  const int xid = x.id();
  return x.tape().record("decov", Tensor<T>(Shape{1}, T(0.5) * frob), {x},
                         [centered, offdiag, n, d, xid](Tape<T>& tp, int self) {
                           if (!tp.needs_grad(xid)) return;
                           const T g = tp.node(self).grad[0];
                           RowMat<T> gx = (*centered) * (*offdiag);
                           gx *= g * T{2} / static_cast<T>(n);
                           auto& acc = tp.grad_acc(xid);
                           MapMat<T>(acc.ptr(), n, d) += gx;
                         });
}

#define NMD_INSTANTIATE_OPS(T)                                                  \
  template Var<T> conv2d(Var<T>, Var<T>, int, Padding);                         \
  template Var<T> add_bias(Var<T>, Var<T>);                                     \
  template Var<T> leaky_relu(Var<T>, T);                                        \
  template Var<T> resample(Var<T>, Resample);                                   \
  template Var<T> concat_channels(std::span<const Var<T>>);                     \
  template Var<T> concat_batch(std::span<const Var<T>>);                        \
  template Var<T> select_batch(Var<T>, std::span<const int>);                   \
  template Var<T> add(Var<T>, Var<T>);                                          \
  template Var<T> sub(Var<T>, Var<T>);                                          \
  template Var<T> mul(Var<T>, Var<T>);                                          \
  template Var<T> scale(Var<T>, T);                                             \
  template Var<T> abs(Var<T>);                                                  \
  template Var<T> square(Var<T>);                                               \
  template Var<T> softplus(Var<T>);                                             \
  template Var<T> sum(Var<T>);                                                  \
  template Var<T> mean(Var<T>);                                                 \
  template Var<T> diff_x(Var<T>);                                               \
  template Var<T> diff_y(Var<T>);                                               \
  template Var<T> decov(Var<T>);

NMD_INSTANTIATE_OPS(float)
NMD_INSTANTIATE_OPS(double)

}  // namespace nmd
