#pragma once

#include <functional>
#include <initializer_list>
#include <map>
#include <vector>

#include "wrangan/tensor.hpp"

namespace wrangan {

template <class T>
class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, int id) : tape_(tape), id_(id) {}

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  int id() const { return id_; }
  Tape<T>& tape() const { return *tape_; }
  bool valid() const { return tape_ != nullptr; }
  bool requires_grad() const;

 private:
  Tape<T>* tape_ = nullptr;
  int id_ = -1;
};

/// Gradients of a scalar loss with respect to every tracked leaf on the tape.
template <class T>
class Gradients {
 public:
  const Tensor<T>& operator[](const Var<T>& v) const { return at(v.id()); }
  const Tensor<T>& at(int node_id) const;
  bool contains(const Var<T>& v) const { return by_node_.count(v.id()) != 0; }
  std::size_t size() const { return by_node_.size(); }
  bool empty() const { return by_node_.empty(); }
  const std::map<int, Tensor<T>>& map() const { return by_node_; }

 private:
  friend class Tape<T>;
  std::map<int, Tensor<T>> by_node_;
};

/// Append-only record of operations for reverse-mode differentiation.
///
/// Nodes are appended after their parents, so the node index order is a
/// topological order and backward() walks it in reverse. A tape is not
/// thread-safe; independent tapes may be used from different threads.
template <class T>
class Tape {
 public:
  /// Receives the gradient flowing into the node and pushes contributions to
  /// its parents through grad().
  using Backward = std::function<void(Tape& tape, const Tensor<T>& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Tracked input: gradients are reported for it.
  Var<T> leaf(Tensor<T> value);
  /// Untracked input.
  Var<T> constant(Tensor<T> value);

  /// Records an op output. The backward function is dropped when no parent
  /// requires a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> parents, Backward backward);
  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& parents, Backward backward);

  bool requires_grad(int node_id) const { return nodes_[static_cast<std::size_t>(node_id)].requires_grad; }
  bool any_requires_grad(std::initializer_list<Var<T>> vars) const;
  const Tensor<T>& value(int node_id) const { return nodes_[static_cast<std::size_t>(node_id)].value; }

  /// Accumulation buffer for a node's gradient, zero-filled on first access.
  /// Only meaningful during backward().
  Tensor<T>& grad(int node_id);

  /// Runs the reverse sweep from a scalar loss. Throws ShapeError for a
  /// non-scalar loss. Leaves the loss does not depend on get zero gradients.
  Gradients<T> backward(const Var<T>& loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Backward backward;
    Tensor<T> grad;
    bool requires_grad = false;
    bool is_leaf = false;
  };

  Var<T> push(Node node);

  std::vector<Node> nodes_;
};

template <class T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value(id_);
}

template <class T>
bool Var<T>::requires_grad() const {
  return tape_->requires_grad(id_);
}

extern template class Tape<float>;
extern template class Tape<double>;
extern template class Gradients<float>;
extern template class Gradients<double>;

}  // namespace wrangan
