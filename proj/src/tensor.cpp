#include "wrangan/tensor.hpp"

#include <cmath>

#include <fmt/format.h>

namespace wrangan {

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace {
void check_extents(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor: shape must have at least one extent");
  for (auto d : shape) {
    if (d <= 0) throw ShapeError(fmt::format("tensor: non-positive extent in {}", to_string(shape)));
  }
}
}  // namespace

template <class T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)) {
  check_extents(shape_);
  data_.assign(static_cast<std::size_t>(numel(shape_)), fill);
}

template <class T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_extents(shape_);
  if (numel(shape_) != static_cast<std::int64_t>(data_.size())) {
    throw ShapeError(fmt::format("tensor: shape {} needs {} elements, got {}", to_string(shape_),
                                 numel(shape_), data_.size()));
  }
}

template <class T>
std::int64_t Tensor<T>::dim(int axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) {
    throw ShapeError(fmt::format("tensor: axis {} out of range for {}", axis, to_string(shape_)));
  }
  return shape_[static_cast<std::size_t>(axis)];
}

template <class T>
T Tensor<T>::item() const {
  if (data_.size() != 1) throw ShapeError(fmt::format("item: tensor {} is not a scalar", to_string(shape_)));
  return data_[0];
}

template <class T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const& {
  return Tensor(std::move(shape), data_);
}

template <class T>
Tensor<T> Tensor<T>::reshaped(Shape shape) && {
  return Tensor(std::move(shape), std::move(data_));
}

template <class T>
bool all_finite(const Tensor<T>& t) {
  for (T v : t.data()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

template class Tensor<float>;
template class Tensor<double>;
template bool all_finite(const Tensor<float>&);
template bool all_finite(const Tensor<double>&);

}  // namespace wrangan
