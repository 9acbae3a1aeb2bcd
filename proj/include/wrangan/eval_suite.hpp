#pragma once

#include <cmath>
#include <functional>
#include <iterator>
#include <string>
#include <vector>

#include "wrangan/config.hpp"
#include "wrangan/data_io.hpp"
#include "wrangan/inversion.hpp"
#include "wrangan/metrics.hpp"

namespace wrangan {

/// Runs fn(0..n-1) on up to `jobs` threads. Each index is handled exactly
/// once; callers write results into per-index slots.
void parallel_for(int n, int jobs, const std::function<void(int)>& fn);

/// Pooled perceptual features of a set of [3,32,32] images, [N, 64].
Tensor<double> image_features(const ParamMap<float>& percep, const std::vector<Tensor<float>>& images);

/// Mean over dimensions of the per-dimension std of w = f(z).
double characteristic_style_scale(const GeneratorSpec& spec, const ParamMap<float>& mapping, int n_samples,
                                  std::uint64_t seed);

struct CorruptionSetup {
  GeneratorSpec spec;
  ParamMap<float> base_weights;  // its mapping network samples w
  ParamMap<float> percep;
  Tensor<double> reference;      // reference features [N, 64]
  double style_scale = 1.0;
  int n_images = 256;
  double shift_scale = 1.0;
  std::uint64_t seed = 1;
};

struct DistributionDistance {
  double fid = 0;
  double kid = 0;
};

/// Shifts n_images samples w = f(z) by uniformly random unit directions
/// scaled by shift_scale * style_scale, synthesizes them with `tuned`, and
/// measures Frechet and kernel distances to the reference features. The z
/// draws and directions depend only on the seed, so runs are paired.
DistributionDistance corruption_fid(const CorruptionSetup& setup, const ParamMap<float>& tuned);

/// Unshifted generation with `weights` from the same z draws.
DistributionDistance generation_fid(const CorruptionSetup& setup, const ParamMap<float>& weights);

struct CompareRow {
  std::string image_id;
  Strategy strategy = Strategy::w_only;
  double mse = 0;
  double perceptual = 0;
  double ms_ssim = 0;
  double corruption_fid = std::nan("");  // NaN when not measured
  double corruption_kid = std::nan("");
  std::int64_t optimized_params = 0;
  int best_iteration = 0;
  std::string status = "ok";
  double seconds = 0;  // wall time; kept out of the deterministic CSV
};

struct CompareOutput {
  std::vector<CompareRow> rows;  // image-major, strategies in kAllStrategies order
  /// Recovered epsilon of each successful wrangan inversion, image order.
  std::vector<EpsilonVector> wrangan_epsilon;
};

struct CompareOptions {
  std::vector<Strategy> strategies{std::begin(kAllStrategies), std::end(kAllStrategies)};
  /// Corruption distances are measured on the first this-many images.
  int corruption_images = 20;
  int jobs = 1;
};

/// Every strategy on every image. A failing strategy yields a flagged row.
CompareOutput strategy_compare(const std::vector<Tensor<float>>& images, const std::vector<std::string>& ids,
                               const InversionModels& models, const std::vector<InversionConfig>& configs,
                               const CorruptionSetup& corruption, const CompareOptions& options);

void write_compare_csv(const std::filesystem::path& path, const std::vector<CompareRow>& rows);
/// One row per image with an mse_<strategy> column per strategy.
void write_compare_wide_csv(const std::filesystem::path& path, const std::vector<CompareRow>& rows);
void write_timing_csv(const std::filesystem::path& path, const std::vector<CompareRow>& rows);

struct GridRow {
  int n_randomized = 0;
  double alpha = 0;
  double mean_mse = 0;
  int images = 0;
  std::int64_t randomized_params = 0;
  double relative_increase = 0;
};

/// Mean simple-tune reconstruction MSE for every (N, alpha).
std::vector<GridRow> layer_grid(const std::vector<Tensor<float>>& images, const InversionModels& models,
                                const std::vector<int>& n_values, const std::vector<double>& alpha_values,
                                const InversionConfig& base_config, int jobs = 1);
void write_grid_csv(const std::filesystem::path& path, const std::vector<GridRow>& rows);

struct VarianceLayer {
  std::string layer;
  std::int64_t n_params = 0;
  double frac_small = 0;  // sigma < 1e-3
  double mean_sigma = 0;
  double min_sigma = 0;
  double max_sigma = 0;
  std::vector<double> bin_edges;  // log10 sigma
  std::vector<std::int64_t> counts;  // counts[i] in [edge i, edge i+1)
};

inline constexpr double kSmallSigma = 1e-3;

std::vector<VarianceLayer> variance_histogram(const RandomizedParamStore& store);
void write_variance_csv(const std::filesystem::path& hist_path, const std::filesystem::path& summary_path,
                        const std::vector<VarianceLayer>& layers);

struct InfluenceRow {
  std::string layer;
  double mse = 0;
};

/// Per randomized layer: that layer's weights drawn from N(mu, sigma), all
/// others at mu; MSE against the unperturbed output averaged over n_samples.
/// Sample k of layer L draws z then eps (names in order) from the stream
/// "influence/<L>" of `seed`.
std::vector<InfluenceRow> layer_influence(const RandomizedParamStore& store, int n_samples, std::uint64_t seed);
void write_influence_csv(const std::filesystem::path& path, const std::vector<InfluenceRow>& rows);

struct EpsilonLayerStats {
  std::string layer;
  std::int64_t n_values = 0;
  double mean = 0;
  double variance = 0;
  double variance_ratio = 0;  // relative to the N(0, 1) training prior
};

std::vector<EpsilonLayerStats> epsilon_statistics(const RandomizedParamStore& store,
                                                  const std::vector<EpsilonVector>& results);
void write_epsilon_csv(const std::filesystem::path& path, const std::vector<EpsilonLayerStats>& rows);

struct SignTest {
  int n_less = 0;     // pairs with a < b
  int n_greater = 0;  // pairs with a > b
  int ties = 0;
  double p_value = 1;  // one-sided, H1: a < b
};

/// Paired sign test with ties dropped; exact binomial tail.
SignTest paired_sign_test(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace wrangan
