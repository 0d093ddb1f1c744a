#pragma once

#include <deque>
#include <functional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "nmd/tensor.hpp"

namespace nmd {

/// A named trainable tensor with its accumulated gradient.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
};

/// Ordered parameter registry. References stay valid as parameters are added.
template <typename T>
class ParamSet {
 public:
  Parameter<T>& add(std::string name, Shape shape);
  Parameter<T>* find(std::string_view name);
  const Parameter<T>* find(std::string_view name) const;
  Parameter<T>& get(std::string_view name);
  const Parameter<T>& get(std::string_view name) const;

  /// Parameters whose name starts with `prefix`, in registration order.
  std::vector<Parameter<T>*> group(std::string_view prefix);
  std::vector<const Parameter<T>*> group(std::string_view prefix) const;

  void zero_grad();
  std::size_t size() const { return params_.size(); }
  std::size_t numel() const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::deque<Parameter<T>> params_;
};

template <typename T>
class Tape;

/// Handle to a node on a tape.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, int id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  int id() const { return id_; }
  Tape<T>& tape() const { return *tape_; }
  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Tape<T>* tape_ = nullptr;
  int id_ = -1;
};

template <typename T>
struct Node {
  using BackwardFn = std::function<void(Tape<T>&, int self)>;

  int id = -1;
  std::string op;
  std::vector<int> inputs;
  Tensor<T> value;
  Tensor<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  Parameter<T>* param = nullptr;
  BackwardFn backward;
};

/// Append-only computation record. Node ids are a valid evaluation order.
template <typename T>
class Tape {
 public:
  using BackwardFn = typename Node<T>::BackwardFn;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value, std::string op = "const");
  Var<T> leaf(Tensor<T> value);
  /// One node per parameter per tape; repeated calls return the same node.
  Var<T> param(Parameter<T>& p);
  /// Parameter value as a constant; no gradient is recorded for it.
  Var<T> frozen(const Parameter<T>& p);

  /// Adds an op node. `backward` reads this node's grad and accumulates into inputs.
  Var<T> record(std::string op, Tensor<T> value, std::initializer_list<Var<T>> inputs,
                BackwardFn backward);
  Var<T> record(std::string op, Tensor<T> value, const std::vector<Var<T>>& inputs,
                BackwardFn backward);

  /// Reverse sweep from a scalar. Clears previous node grads first.
  void backward(Var<T> loss);
  /// Adds every parameter node's grad into its Parameter::grad.
  void flush_param_grads() const;

  const Node<T>& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  bool needs_grad(int id) const { return node(id).requires_grad; }
  /// Gradient accumulator for an input; allocated as zeros on first use.
  Tensor<T>& grad_acc(int id);
  /// Gradient of a node (zeros if nothing reached it).
  Tensor<T> grad(Var<T> v) const;
  std::size_t size() const { return nodes_.size(); }

 private:
  Var<T> push(Node<T> n);

  std::deque<Node<T>> nodes_;
  std::unordered_map<const Parameter<T>*, int> param_nodes_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape_->node(id_).value;
}

}  // namespace nmd
