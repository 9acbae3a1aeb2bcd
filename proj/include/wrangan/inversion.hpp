#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "wrangan/config.hpp"
#include "wrangan/rand_param.hpp"

namespace wrangan {

struct LossPoint {
  int iteration = 0;
  double total = 0;
  double l2 = 0;  // per-pixel MSE, weighted 2 in total
  double perceptual = 0;
  double reg = 0;
};

/// Non-finite inversion loss; carries the trace up to the failure.
class InversionError : public std::runtime_error {
 public:
  InversionError(const std::string& what, std::vector<LossPoint> trace)
      : std::runtime_error(what), trace(std::move(trace)) {}
  std::vector<LossPoint> trace;
};

/// Networks an inversion session reads. Never modified.
struct InversionModels {
  GeneratorSpec spec;
  RandomizedParamStore store;  // baselines use its mean weights
  ParamMap<float> encoder;
  ParamMap<float> percep;
};

struct InversionResult {
  Strategy strategy = Strategy::w_only;
  /// One [1, w_dim] code, or one per synthesis conv layer for w_plus.
  std::vector<Tensor<float>> w;
  /// wrangan: recovered epsilon; tune strategies: theta - theta_0 of the tuned
  /// parameters; empty for latent-only strategies.
  EpsilonVector epsilon;
  std::vector<LossPoint> trace;
  /// Generator weights of the returned (best) iterate.
  ParamMap<float> final_weights;
  Tensor<float> image;  // [1, 3, 32, 32]
  int best_iteration = -1;  // -1: the initialization (no iterations run)
  double mse = 0;
  double perceptual = 0;
  double ms_ssim = 0;
  /// Largest number of scalars optimized at once.
  std::int64_t optimized_params = 0;
  /// Fingerprint of the store the result was inverted against.
  std::uint64_t store_fingerprint = 0;
};

/// Tuned parameter names of each strategy.
std::vector<std::string> pti_tuned_names(const GeneratorSpec& spec);

/// f(E(x)) as [1, w_dim].
Tensor<float> initial_code(const InversionModels& models, const Tensor<float>& x);

/// Algorithm: w from f(E(x)), eps from eps_init; each step realizes
/// theta = mu + sigma * eps and Adam-updates (w, eps) on
/// 2 MSE + perceptual + alpha ||eps||^2. The best iterate is returned.
InversionResult invert_wrangan(const Tensor<float>& x, const InversionModels& models, const InversionConfig& config);

enum class LatentSpace { w, w_plus };
InversionResult invert_latent(const Tensor<float>& x, const InversionModels& models, const InversionConfig& config,
                              LatentSpace space);

enum class TuneMode { simple_tune, pti_style };
/// simple_tune: w and the last spec.n_randomized conv layers jointly with
/// alpha ||theta - theta_0||^2. pti_style: w alone for effective_pivot()
/// iterations, then every synthesis conv and toRGB weight with w frozen.
InversionResult invert_tune(const Tensor<float>& x, const InversionModels& models, const InversionConfig& config,
                            TuneMode mode);

/// Dispatches on config.strategy.
InversionResult invert(const Tensor<float>& x, const InversionModels& models, const InversionConfig& config);

/// synthesize(w, final_weights): W+ results use their per-layer codes.
Tensor<float> render(const GeneratorSpec& spec, const InversionResult& result);

void write_loss_trace(const std::filesystem::path& path, const std::vector<LossPoint>& trace);

}  // namespace wrangan
