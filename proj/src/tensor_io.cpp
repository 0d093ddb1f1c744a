#include "nmd/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace nmd {

namespace {

static_assert(std::endian::native == std::endian::little, "NMT1 I/O assumes a little-endian host");

constexpr char kMagic[4] = {'N', 'M', 'T', '1'};

void read_exact(std::istream& is, void* dst, std::size_t n, const char* what) {
  is.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) {
    throw FormatError(std::string("NMT1: truncated ") + what);
  }
}

template <typename T>
Tensor<T> read_payload(std::istream& is, const Shape& shape) {
  std::vector<T> data(shape.numel());
  read_exact(is, data.data(), data.size() * sizeof(T), "payload");
  return Tensor<T>(shape, std::move(data));
}

}  // namespace

template <typename T>
void write_nmt(std::ostream& os, const Tensor<T>& t) {
  if (t.rank() < 1) throw FormatError("NMT1: cannot write an empty tensor");
  unsigned char header[8] = {'N', 'M', 'T', '1', static_cast<unsigned char>(dtype_of<T>()),
                             static_cast<unsigned char>(t.rank()), 0, 0};
  os.write(reinterpret_cast<const char*>(header), sizeof header);
  for (int d : t.shape().dims()) {
    const auto u = static_cast<std::uint32_t>(d);
    os.write(reinterpret_cast<const char*>(&u), sizeof u);
  }
  os.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.size() * sizeof(T)));
  if (!os) throw FormatError("NMT1: write failed");
}

template <typename T>
void save_nmt(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  write_nmt(os, t);
}

AnyTensor read_nmt_any(std::istream& is) {
  unsigned char header[8];
  read_exact(is, header, sizeof header, "header");
  if (std::memcmp(header, kMagic, 4) != 0) throw FormatError("NMT1: bad magic");
  const int dtype = header[4];
  const int rank = header[5];
  if (dtype > 1) throw FormatError("NMT1: unknown dtype " + std::to_string(dtype));
  if (rank < 1 || rank > 4) throw FormatError("NMT1: invalid rank " + std::to_string(rank));
  if (header[6] != 0 || header[7] != 0) throw FormatError("NMT1: reserved bytes must be zero");
  int dims[4];
  for (int i = 0; i < rank; ++i) {
    std::uint32_t u = 0;
    read_exact(is, &u, sizeof u, "dims");
    if (u == 0 || u > 0x7fffffffu) throw FormatError("NMT1: invalid extent");
    dims[i] = static_cast<int>(u);
  }
  const Shape shape(std::span<const int>(dims, static_cast<std::size_t>(rank)));
  if (dtype == 0) return read_payload<float>(is, shape);
  return read_payload<double>(is, shape);
}

AnyTensor load_nmt_any(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return read_nmt_any(is);
}

template <typename T>
Tensor<T> read_nmt(std::istream& is) {
  return std::visit(
      [](auto&& t) -> Tensor<T> {
        using U = typename std::decay_t<decltype(t)>::value_type;
        if constexpr (std::is_same_v<U, T>) {
          return std::move(t);
        } else {
          return t.template cast<T>();
        }
      },
      read_nmt_any(is));
}

template <typename T>
Tensor<T> load_nmt(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return read_nmt<T>(is);
}

template void write_nmt(std::ostream&, const Tensor<float>&);
template void write_nmt(std::ostream&, const Tensor<double>&);
template void save_nmt(const std::filesystem::path&, const Tensor<float>&);
template void save_nmt(const std::filesystem::path&, const Tensor<double>&);
template Tensor<float> read_nmt(std::istream&);
template Tensor<double> read_nmt(std::istream&);
template Tensor<float> load_nmt(const std::filesystem::path&);
template Tensor<double> load_nmt(const std::filesystem::path&);

}  // namespace nmd
