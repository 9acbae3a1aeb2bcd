#include "wrangan/tape.hpp"

#include <fmt/format.h>

namespace wrangan {

template <class T>
const Tensor<T>& Gradients<T>::at(int node_id) const {
  auto it = by_node_.find(node_id);
  if (it == by_node_.end()) throw std::out_of_range(fmt::format("gradients: node {} is not a tracked leaf", node_id));
  return it->second;
}

template <class T>
Var<T> Tape<T>::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var<T>(this, static_cast<int>(nodes_.size() - 1));
}

template <class T>
Var<T> Tape<T>::leaf(Tensor<T> value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  n.is_leaf = true;
  return push(std::move(n));
}

template <class T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

template <class T>
bool Tape<T>::any_requires_grad(std::initializer_list<Var<T>> vars) const {
  for (const auto& v : vars) {
    if (requires_grad(v.id())) return true;
  }
  return false;
}

template <class T>
Var<T> Tape<T>::record(Tensor<T> value, std::initializer_list<Var<T>> parents, Backward backward) {
  return record(std::move(value), std::vector<Var<T>>(parents), std::move(backward));
}

template <class T>
Var<T> Tape<T>::record(Tensor<T> value, const std::vector<Var<T>>& parents, Backward backward) {
  Node n;
  n.value = std::move(value);
  for (const auto& p : parents) {
    if (&p.tape() != this) throw std::logic_error("tape: parent belongs to a different tape");
    n.requires_grad = n.requires_grad || requires_grad(p.id());
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

template <class T>
Tensor<T>& Tape<T>::grad(int node_id) {
  auto& n = nodes_[static_cast<std::size_t>(node_id)];
  if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape(), T(0));
  return n.grad;
}

template <class T>
Gradients<T> Tape<T>::backward(const Var<T>& loss) {
  if (&loss.tape() != this) throw std::logic_error("backward: loss belongs to a different tape");
  if (loss.value().size() != 1) {
    throw ShapeError(fmt::format("backward: loss must be scalar, got shape {}", to_string(loss.shape())));
  }
  for (auto& n : nodes_) n.grad = Tensor<T>();

  Gradients<T> out;
  const auto root = static_cast<std::size_t>(loss.id());
  if (nodes_[root].requires_grad) {
    grad(loss.id())[0] = T(1);
    for (std::size_t i = root + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (n.is_leaf || !n.backward || n.grad.empty()) continue;
      Tensor<T> g = std::move(n.grad);
      n.grad = Tensor<T>();
      n.backward(*this, g);
    }
  }
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    auto& n = nodes_[i];
    if (!n.is_leaf) continue;
    out.by_node_.emplace(static_cast<int>(i), n.grad.empty() ? Tensor<T>(n.value.shape(), T(0)) : std::move(n.grad));
    n.grad = Tensor<T>();
  }
  return out;
}

template class Tape<float>;
template class Tape<double>;
template class Gradients<float>;
template class Gradients<double>;

}  // namespace wrangan
