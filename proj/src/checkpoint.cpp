#include "nmd/checkpoint.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "nmd/tensor_io.hpp"

namespace nmd {

namespace {

std::string dims_string(const Shape& s) {
  std::string out;
  for (int d : s.dims()) out += (out.empty() ? "" : "x") + std::to_string(d);
  return out;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, '\t')) out.push_back(field);
  return out;
}

}  // namespace

template <typename T>
const Tensor<T>* Checkpoint<T>::find(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

template <typename T>
void Checkpoint<T>::add_params(const ParamSet<T>& params, const std::string& prefix) {
  for (const auto& p : params) tensors.emplace_back(prefix + p.name, p.value);
}

template <typename T>
void Checkpoint<T>::restore_params(ParamSet<T>& params, const std::string& prefix) const {
  for (auto& p : params) {
    const Tensor<T>* t = find(prefix + p.name);
    if (!t) throw std::runtime_error("checkpoint: missing tensor " + prefix + p.name);
    if (!(t->shape() == p.value.shape())) {
      throw std::runtime_error("checkpoint: tensor " + prefix + p.name + " has shape " + t->shape().str() +
                               ", model expects " + p.value.shape().str());
    }
    p.value = *t;
  }
}

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const Checkpoint<T>& ckpt) {
  std::filesystem::create_directories(dir);
  std::ofstream man(dir / "manifest.txt");
  if (!man) throw std::runtime_error("checkpoint: cannot write " + (dir / "manifest.txt").string());
  man << "step\t" << ckpt.step << '\n';
  for (const auto& [k, v] : ckpt.config) man << "config\t" << k << '\t' << v << '\n';
  std::size_t i = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    char file[32];
    std::snprintf(file, sizeof file, "t%05zu.nmt", i++);
    save_nmt(dir / file, t);
    man << "tensor\t" << name << '\t' << dims_string(t.shape()) << '\t' << file << '\n';
  }
  if (!man) throw std::runtime_error("checkpoint: write failed in " + dir.string());
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream man(dir / "manifest.txt");
  if (!man) throw std::runtime_error("checkpoint: no manifest.txt in " + dir.string());
  Checkpoint<T> ckpt;
  std::string line;
  int lineno = 0;
  while (std::getline(man, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split_tabs(line);
    auto bad = [&] {
      return std::runtime_error("checkpoint: malformed manifest line " + std::to_string(lineno) + ": " + line);
    };
    if (f[0] == "step" && f.size() == 2) {
      ckpt.step = std::stoull(f[1]);
    } else if (f[0] == "config" && (f.size() == 3 || f.size() == 2)) {
      ckpt.config[f[1]] = f.size() == 3 ? f[2] : "";
    } else if (f[0] == "tensor" && f.size() == 4) {
      Tensor<T> t = load_nmt<T>(dir / f[3]);
      if (dims_string(t.shape()) != f[2]) {
        throw std::runtime_error("checkpoint: tensor " + f[1] + " file shape " + t.shape().str() +
                                 " disagrees with manifest " + f[2]);
      }
      ckpt.tensors.emplace_back(f[1], std::move(t));
    } else {
      throw bad();
    }
  }
  return ckpt;
}

template struct Checkpoint<float>;
template struct Checkpoint<double>;
template void save_checkpoint(const std::filesystem::path&, const Checkpoint<float>&);
template void save_checkpoint(const std::filesystem::path&, const Checkpoint<double>&);
template Checkpoint<float> load_checkpoint(const std::filesystem::path&);
template Checkpoint<double> load_checkpoint(const std::filesystem::path&);

}  // namespace nmd
