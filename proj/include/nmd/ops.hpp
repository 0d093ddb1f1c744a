#pragma once

#include <span>
#include <vector>

#include "nmd/autodiff.hpp"

namespace nmd {

enum class Padding { Same, Valid };
enum class Resample { Down2, Up2 };

// Differentiable primitives. Every op checks its operand shapes and throws
// ShapeError with the op name on mismatch. Reductions accumulate sequentially
// in row-major order.

/// NCHW input, OIKK kernel, odd K, stride 1 or 2. `Same` yields ceil(H/stride).
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> kernel, int stride = 1, Padding pad = Padding::Same);
/// Adds a per-channel bias of shape [C].
template <typename T>
Var<T> add_bias(Var<T> x, Var<T> bias);

/// max(x, slope*x); the derivative at exactly 0 is `slope`.
template <typename T>
Var<T> leaky_relu(Var<T> x, T slope);
template <typename T>
Var<T> relu(Var<T> x) {
  return leaky_relu(x, T{0});
}

/// Down2 is 2x2 average pooling; Up2 is nearest-neighbour replication.
template <typename T>
Var<T> resample(Var<T> x, Resample mode);
template <typename T>
Var<T> down2(Var<T> x) {
  return resample(x, Resample::Down2);
}
template <typename T>
Var<T> up2(Var<T> x) {
  return resample(x, Resample::Up2);
}

template <typename T>
Var<T> concat_channels(std::span<const Var<T>> xs);
template <typename T>
Var<T> concat_channels(std::initializer_list<Var<T>> xs) {
  return concat_channels(std::span<const Var<T>>(xs.begin(), xs.size()));
}
/// Stacks along the leading (batch) axis.
template <typename T>
Var<T> concat_batch(std::span<const Var<T>> xs);
/// Gathers batch entries in the given order.
template <typename T>
Var<T> select_batch(Var<T> x, std::span<const int> indices);

template <typename T>
Var<T> add(Var<T> a, Var<T> b);
template <typename T>
Var<T> sub(Var<T> a, Var<T> b);
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);
template <typename T>
Var<T> scale(Var<T> x, T s);
template <typename T>
Var<T> abs(Var<T> x);
template <typename T>
Var<T> square(Var<T> x);
/// log(1 + exp(x)), evaluated stably.
template <typename T>
Var<T> softplus(Var<T> x);

/// Scalar [1] outputs.
template <typename T>
Var<T> sum(Var<T> x);
template <typename T>
Var<T> mean(Var<T> x);

/// Forward differences along W (x) or H (y) with replicate border: the last
/// column/row difference is zero. Output has the input's shape.
template <typename T>
Var<T> diff_x(Var<T> x);
template <typename T>
Var<T> diff_y(Var<T> x);

/// Covariance decorrelation penalty of a batch viewed as N x D:
/// 0.5 * (||C||_F^2 - ||diag C||^2), C = Xc^T Xc / N. Requires N >= 2.
template <typename T>
Var<T> decov(Var<T> x);

/// Same value, no gradient path.
template <typename T>
Var<T> detach(Var<T> x) {
  return x.tape().constant(x.value(), "detach");
}

template <typename T>
Var<T> operator+(Var<T> a, Var<T> b) {
  return add(a, b);
}
template <typename T>
Var<T> operator-(Var<T> a, Var<T> b) {
  return sub(a, b);
}
template <typename T>
Var<T> operator*(T s, Var<T> x) {
  return scale(x, s);
}

}  // namespace nmd
