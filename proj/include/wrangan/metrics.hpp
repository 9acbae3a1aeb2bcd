#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "wrangan/tensor.hpp"

namespace wrangan {

/// Mean of squared differences over all elements.
double mse(const Tensor<float>& a, const Tensor<float>& b);

struct MsSsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  /// Leading standard scale weights; renormalized to sum to 1.
  std::vector<double> weights = {0.0448, 0.2856, 0.3001};
  /// Smallest window accepted when a scale is narrower than `window`.
  int min_window = 7;
};

/// Multi-scale SSIM of two [3, H, W] (or [1, 3, H, W]) images in [-1, 1],
/// rescaled to [0, 1]. At a scale narrower than the window, the window
/// shrinks to the largest odd size that fits; below min_window it throws.
double ms_ssim(const Tensor<float>& a, const Tensor<float>& b, const MsSsimOptions& options = {});

/// Features are [N, D] rows.
struct FeatureStats {
  std::vector<double> mean;
  std::vector<double> covariance;  // D x D row-major
  std::int64_t n = 0;
  int dim = 0;
};

FeatureStats feature_stats(const Tensor<double>& features);

/// ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)), with the square root from
/// the eigendecomposition of S1^(1/2) S2 S1^(1/2) (eigenvalues clamped at 0).
double frechet_distance(const FeatureStats& a, const FeatureStats& b);
double frechet_distance(const Tensor<double>& real, const Tensor<double>& gen);

/// Unbiased MMD^2 with k(x, y) = (x.y / d + 1)^3.
double kernel_distance(const Tensor<double>& real, const Tensor<double>& gen);

struct PrecisionRecall {
  double precision = 0;
  double recall = 0;
};

/// k-NN manifold precision/recall: a sample is covered when it lies within
/// the k-th-neighbour radius of some sample of the other set.
PrecisionRecall precision_recall(const Tensor<double>& real, const Tensor<double>& gen, int k = 3);

/// Ordered named metric values with provenance.
struct EvalReport {
  std::vector<std::pair<std::string, double>> values;
  std::uint64_t seed = 0;
  std::string config_hash;

  void set(const std::string& name, double value);
  double get(const std::string& name) const;
  bool has(const std::string& name) const;
  std::string to_json() const;
};

}  // namespace wrangan
