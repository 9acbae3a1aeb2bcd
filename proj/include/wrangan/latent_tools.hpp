#pragma once

#include <vector>

#include "wrangan/inversion.hpp"

namespace wrangan {

/// Oriented plane n.w + offset = 0 in W with |n| = 1. Positive side is label 1.
struct Hyperplane {
  std::vector<double> normal;
  double offset = 0;

  double signed_distance(const Tensor<float>& w) const;
  int classify(const Tensor<float>& w) const { return signed_distance(w) > 0 ? 1 : 0; }
};

struct HyperplaneOptions {
  int max_steps = 5000;
  double tolerance = 1e-6;  // on the loss change between steps
  double learning_rate = 1.0;
  int min_per_class = 50;
};

struct HyperplaneFit {
  Hyperplane plane;
  double held_out_accuracy = 0;
  double train_accuracy = 0;
  int steps = 0;
  int n_train = 0;
  int n_held_out = 0;
};

/// Logistic regression on whitened codes by full-batch gradient descent.
/// Samples are put in a canonical order first and a sample is held out when
/// the hash of its code bytes is 0 mod 5, so the fit ignores input order.
HyperplaneFit fit_hyperplane(const std::vector<Tensor<float>>& codes, const std::vector<int>& labels,
                             const HyperplaneOptions& options = {});

struct PcaResult {
  std::vector<std::vector<double>> directions;  // unit rows, largest variance first
  std::vector<double> explained_variance;
};

/// Top-k eigenvectors of the sample covariance; each direction's
/// largest-magnitude component is positive.
PcaResult pca_directions(const std::vector<Tensor<float>>& codes, int k);

/// w + step * direction rendered with the result's tuned weights. W+ results
/// move every per-layer code.
Tensor<float> edit(const GeneratorSpec& spec, const InversionResult& result, const std::vector<double>& direction,
                   double step);

/// Images at w = (1-a) w_a + a w_b with the weights blended the same way: the
/// epsilon of wrangan results, theta otherwise.
std::vector<Tensor<float>> interpolate(const RandomizedParamStore& store, const InversionResult& a,
                                       const InversionResult& b, const std::vector<double>& alphas);

/// |n . (mean of class 1 - mean of class 0)|.
double class_center_separation(const Hyperplane& plane, const std::vector<Tensor<float>>& codes,
                               const std::vector<int>& labels);

/// Fraction of codes whose classification flips after moving by `step` along
/// the normal toward the side they are not on.
double edit_flip_rate(const Hyperplane& plane, const std::vector<Tensor<float>>& codes, double step);

/// Same edit, but the moved code is rendered with the mean weights and re-encoded as f(E(image)); returns
/// the fraction whose re-encoded code is classified on the other side.
double round_trip_flip_rate(const InversionModels& models, const Hyperplane& plane,
                            const std::vector<Tensor<float>>& codes, double step);

/// Codes of a list as rows of a [N, D] tensor.
Tensor<double> code_matrix(const std::vector<Tensor<float>>& codes);

}  // namespace wrangan
