#include "nmd/autodiff.hpp"

namespace nmd {

template <typename T>
Parameter<T>& ParamSet<T>::add(std::string name, Shape shape) {
  if (find(name) != nullptr) throw std::invalid_argument("duplicate parameter " + name);
  params_.push_back(Parameter<T>{std::move(name), Tensor<T>(shape), Tensor<T>(shape)});
  return params_.back();
}

template <typename T>
Parameter<T>* ParamSet<T>::find(std::string_view name) {
  for (auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

template <typename T>
const Parameter<T>* ParamSet<T>::find(std::string_view name) const {
  for (const auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

template <typename T>
Parameter<T>& ParamSet<T>::get(std::string_view name) {
  if (auto* p = find(name)) return *p;
  throw std::out_of_range("unknown parameter " + std::string(name));
}

template <typename T>
const Parameter<T>& ParamSet<T>::get(std::string_view name) const {
  if (const auto* p = find(name)) return *p;
  throw std::out_of_range("unknown parameter " + std::string(name));
}

template <typename T>
std::vector<Parameter<T>*> ParamSet<T>::group(std::string_view prefix) {
  std::vector<Parameter<T>*> out;
  for (auto& p : params_) {
    if (std::string_view(p.name).starts_with(prefix)) out.push_back(&p);
  }
  return out;
}

template <typename T>
std::vector<const Parameter<T>*> ParamSet<T>::group(std::string_view prefix) const {
  std::vector<const Parameter<T>*> out;
  for (const auto& p : params_) {
    if (std::string_view(p.name).starts_with(prefix)) out.push_back(&p);
  }
  return out;
}

template <typename T>
void ParamSet<T>::zero_grad() {
  for (auto& p : params_) p.grad.fill(T{0});
}

template <typename T>
std::size_t ParamSet<T>::numel() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

template <typename T>
Var<T> Tape<T>::push(Node<T> n) {
  n.id = static_cast<int>(nodes_.size());
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.back().id);
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value, std::string op) {
  Node<T> n;
  n.op = std::move(op);
  n.value = std::move(value);
  return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T> value) {
  Node<T> n;
  n.op = "leaf";
  n.value = std::move(value);
  n.requires_grad = true;
  return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::param(Parameter<T>& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var<T>(this, it->second);
  Node<T> n;
  n.op = "param";
  n.value = p.value;
  n.requires_grad = true;
  n.param = &p;
  Var<T> v = push(std::move(n));
  param_nodes_.emplace(&p, v.id());
  return v;
}

template <typename T>
Var<T> Tape<T>::frozen(const Parameter<T>& p) {
  return constant(p.value, "frozen");
}

template <typename T>
Var<T> Tape<T>::record(std::string op, Tensor<T> value, std::initializer_list<Var<T>> inputs,
                       BackwardFn backward) {
  return record(std::move(op), std::move(value), std::vector<Var<T>>(inputs), std::move(backward));
}

template <typename T>
Var<T> Tape<T>::record(std::string op, Tensor<T> value, const std::vector<Var<T>>& inputs,
                       BackwardFn backward) {
  Node<T> n;
  n.op = std::move(op);
  n.value = std::move(value);
  for (const auto& v : inputs) {
    if (&v.tape() != this) throw std::invalid_argument(n.op + ": input from a different tape");
    n.inputs.push_back(v.id());
    n.requires_grad = n.requires_grad || needs_grad(v.id());
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

template <typename T>
Tensor<T>& Tape<T>::grad_acc(int id) {
  auto& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
  return n.grad;
}

template <typename T>
Tensor<T> Tape<T>::grad(Var<T> v) const {
  const auto& n = node(v.id());
  if (n.grad.empty()) return Tensor<T>(n.value.shape());
  return n.grad;
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
  if (&loss.tape() != this) throw std::invalid_argument("backward: loss from a different tape");
  if (loss.value().size() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + loss.shape().str());
  }
  for (auto& n : nodes_) n.grad = Tensor<T>();
  grad_acc(loss.id()).fill(T{1});
  for (int id = loss.id(); id >= 0; --id) {
    auto& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty() || !n.backward) continue;
    n.backward(*this, id);
  }
}

template <typename T>
void Tape<T>::flush_param_grads() const {
  for (const auto& n : nodes_) {
    if (n.param == nullptr || n.grad.empty()) continue;
    auto dst = n.param->grad.data();
    auto src = n.grad.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }
}

template class ParamSet<float>;
template class ParamSet<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace nmd
