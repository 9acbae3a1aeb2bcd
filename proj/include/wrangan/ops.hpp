#pragma once

#include <vector>

#include "wrangan/tape.hpp"

// Differentiable operations on Var<T>. Every op checks shapes at its
// boundary and throws ShapeError naming the op and the offending shapes.
// Inputs are never mutated.
namespace wrangan::ops {

// Elementwise, identical shapes.
template <class T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> div(const Var<T>& a, const Var<T>& b);

// Scalar operand.
template <class T> Var<T> add_scalar(const Var<T>& a, T s);
template <class T> Var<T> mul_scalar(const Var<T>& a, T s);

// Unary.
template <class T> Var<T> neg(const Var<T>& a);
template <class T> Var<T> square(const Var<T>& a);
template <class T> Var<T> sqrt(const Var<T>& a);
template <class T> Var<T> rsqrt(const Var<T>& a);
template <class T> Var<T> exp(const Var<T>& a);
template <class T> Var<T> leaky_relu(const Var<T>& a, T slope);
/// log(1 + e^x), evaluated without overflow.
template <class T> Var<T> softplus(const Var<T>& a);

// Reductions. sum/mean produce shape [1].
template <class T> Var<T> sum(const Var<T>& a);
template <class T> Var<T> mean(const Var<T>& a);
/// Sums out one axis. A rank-1 input reduces to [1].
template <class T> Var<T> sum_dim(const Var<T>& a, int axis);

// Linear algebra.
template <class T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> transpose(const Var<T>& a);

// Shape manipulation.
template <class T> Var<T> reshape(const Var<T>& a, Shape shape);
template <class T> Var<T> concat(const std::vector<Var<T>>& parts, int axis);

// Broadcasting along axis 1.
/// x[b, c, ...] + bias[c]
template <class T> Var<T> add_bias(const Var<T>& x, const Var<T>& bias);
/// x[b, c, ...] * scale[b, c]
template <class T> Var<T> scale_channels(const Var<T>& x, const Var<T>& scale);
/// x[b, c, h, w] / sqrt(sum_c x[b, c, h, w]^2 + eps)
template <class T> Var<T> channel_normalize(const Var<T>& x, T eps);
/// Mean over spatial axes: [B, C, H, W] -> [B, C].
template <class T> Var<T> global_avg_pool(const Var<T>& x);

// Image ops on [B, C, H, W].
/// 2-D cross-correlation with weight [O, C, K, K], square kernel, zero padding.
template <class T> Var<T> conv2d(const Var<T>& x, const Var<T>& weight, int stride, int padding);
template <class T> Var<T> upsample_nearest2x(const Var<T>& x);
/// Per-channel separable Gaussian blur with a fixed kernel of half-width
/// `radius`, zero padding, output same size.
template <class T> Var<T> gaussian_blur(const Var<T>& x, T sigma, int radius);

/// Normalized 1-D Gaussian taps for gaussian_blur.
template <class T> std::vector<T> gaussian_kernel(T sigma, int radius);

// Composite helpers.
template <class T> Var<T> mse(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> sum_squares(const Var<T>& a);

}  // namespace wrangan::ops
