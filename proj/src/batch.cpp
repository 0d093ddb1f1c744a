#include "nmd/batch.hpp"

#include <algorithm>
#include <stdexcept>

#include "nmd/rng.hpp"

namespace nmd {

template <typename T>
Tensor<T> dihedral(const Tensor<T>& x, int k) {
  require_rank(x.shape(), 4, "dihedral");
  if (k < 0 || k > 7) throw std::invalid_argument("dihedral: transform index must be in 0..7");
  if (k == 0) return x;
  const int n = x.shape().n(), c = x.shape().c(), h = x.shape().h(), w = x.shape().w();
  const bool transpose = k & 1;
  if (transpose && h != w) throw ShapeError("dihedral: rotation needs a square image, got " + x.shape().str());
  const bool flip_r = k & 2, flip_c = k & 4;
  Tensor<T> out(x.shape());
  for (int b = 0; b < n; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
          int si = transpose ? j : i;
          int sj = transpose ? i : j;
          if (flip_r) si = h - 1 - si;
          if (flip_c) sj = w - 1 - sj;
          out.at(b, ch, i, j) = x.at(b, ch, si, sj);
        }
      }
    }
  }
  return out;
}

namespace {

template <typename T>
void put(Tensor<T>& dst, int slot, const Tensor<T>& src) {
  std::copy(src.data().begin(), src.data().end(), dst.data().begin() + static_cast<long>(slot) * src.size());
}

template <typename T>
Shape stacked(const Tensor<T>& one, int n) {
  return Shape{n, one.shape().c(), one.shape().h(), one.shape().w()};
}

}  // namespace

template <typename T>
Batch<T> make_batch(const Dataset<T>& data, std::span<const int> indices, std::span<const int> transforms) {
  if (indices.empty()) throw std::invalid_argument("make_batch: empty index list");
  if (!transforms.empty() && transforms.size() != indices.size()) {
    throw std::invalid_argument("make_batch: one transform per sample required");
  }
  const int n = static_cast<int>(indices.size());
  const auto& first = data.samples.at(static_cast<std::size_t>(indices[0]));
  const bool has_noisy = !first.noisy.empty();
  const bool has_cond = !first.cond.blind();
  Batch<T> b;
  b.clean = Tensor<T>(stacked(first.clean, n));
  b.residual = Tensor<T>(stacked(first.residual, n));
  if (has_noisy) b.noisy = Tensor<T>(stacked(first.noisy, n));
  if (has_cond) b.cond = Tensor<T>(stacked(first.cond.maps, n));
  for (int i = 0; i < n; ++i) {
    const auto& s = data.samples.at(static_cast<std::size_t>(indices[static_cast<std::size_t>(i)]));
    if (!(s.clean.shape() == first.clean.shape())) {
      throw ShapeError("make_batch: sample " + std::to_string(s.index) + " has shape " + s.clean.shape().str() +
                       ", batch uses " + first.clean.shape().str());
    }
    if (s.noisy.empty() == has_noisy) throw std::invalid_argument("make_batch: mixed samples with and without noisy input");
    const int k = transforms.empty() ? 0 : transforms[static_cast<std::size_t>(i)];
    put(b.clean, i, dihedral(s.clean, k));
    put(b.residual, i, dihedral(s.residual, k));
    if (has_noisy) put(b.noisy, i, dihedral(s.noisy, k));
    if (has_cond) put(b.cond, i, dihedral(s.cond.maps, k));
    b.sources.push_back(s.source_tag);
    b.profile_ids.push_back(s.profile_id);
    b.indices.push_back(s.index);
  }
  return b;
}

template <typename T>
Batch<T> sample_batch(const Dataset<T>& data, int batch, std::uint64_t seed, std::uint64_t step, bool augment) {
  if (data.samples.empty()) throw std::invalid_argument("sample_batch: dataset is empty");
  if (batch < 1) throw std::invalid_argument("sample_batch: batch must be positive");
  RngStream rng(CounterRng(seed, 0xba7c).substream(step));
  const int count = static_cast<int>(data.samples.size());
  std::vector<int> idx(static_cast<std::size_t>(batch));
  std::vector<int> tf;
  for (auto& i : idx) i = rng.below(count);
  if (augment) {
    const auto& shape = data.samples.front().clean.shape();
    const int choices = shape.h() == shape.w() ? 8 : 4;
    for (int i = 0; i < batch; ++i) {
      const int r = rng.below(choices);
      tf.push_back(choices == 8 ? r : (r << 1));
    }
  }
  return make_batch(data, idx, tf);
}

template Tensor<float> dihedral(const Tensor<float>&, int);
template Tensor<double> dihedral(const Tensor<double>&, int);
template Batch<float> make_batch(const Dataset<float>&, std::span<const int>, std::span<const int>);
template Batch<double> make_batch(const Dataset<double>&, std::span<const int>, std::span<const int>);
template Batch<float> sample_batch(const Dataset<float>&, int, std::uint64_t, std::uint64_t, bool);
template Batch<double> sample_batch(const Dataset<double>&, int, std::uint64_t, std::uint64_t, bool);

}  // namespace nmd
