#pragma once

#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "wrangan/config.hpp"
#include "wrangan/data_io.hpp"
#include "wrangan/rand_param.hpp"

namespace wrangan {

/// Non-finite loss or runaway log-sigma during training.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LossRecord {
  int iteration = 0;
  double d_loss = 0;
  double g_loss = 0;
  double r1 = 0;  // 0 on iterations without the lazy penalty
};

using LossLog = std::vector<LossRecord>;

void write_loss_log(const std::filesystem::path& path, const LossLog& log);

struct TrainObserver {
  /// Called with every freshly drawn epsilon ("d" or "g" phase).
  std::function<void(int iteration, const std::string& phase, const EpsilonVector& eps)> on_epsilon;
  /// Called after each update with the current state.
  std::function<void(int iteration, const std::string& phase, const RandomizedParamStore& store,
                     const ParamMap<float>& disc)>
      after_step;
  /// Called every log_every iterations and after the last one.
  std::function<void(int iteration)> periodic;
};

template <class T>
struct R1Result {
  double value = 0;         // (gamma / 2) mean_b |grad_x D(x_b)|^2
  ParamMap<T> gradient;     // d value / d theta_D
};

/// R1 penalty at `real` and its parameter gradient, the latter from a central
/// difference of the parameter gradient of the summed logits at x +- h g,
/// g = grad_x, h = relative_step / rms(g). For the piecewise-linear
/// discriminator this is the gradient of the secant slope along g; it tends to
/// the exact R1 gradient as relative_step -> 0.
template <class T>
R1Result<T> r1_penalty(const ParamMap<T>& disc, const Tensor<T>& real, double gamma, double relative_step = 1e-2);

struct GanResult {
  ParamMap<float> generator;
  ParamMap<float> discriminator;
  LossLog log;
};

/// Fresh generator and discriminator drawn from the config seed.
ParamMap<float> initial_generator(const GeneratorSpec& spec, std::uint64_t seed);
ParamMap<float> initial_discriminator(std::uint64_t seed);

/// Non-saturating GAN training with lazy R1. Starts from `init_g`/`init_d`
/// when given, otherwise from the seeded initialization.
GanResult pretrain_base(const GeneratorSpec& spec, const Dataset& data, const TrainConfig& config,
                        const ParamMap<float>* init_g = nullptr, const ParamMap<float>* init_d = nullptr,
                        const TrainObserver* observer = nullptr);

struct WranganResult {
  RandomizedParamStore store;
  ParamMap<float> discriminator;
  LossLog log;
};

/// Randomized-weight training: mu = theta_g0 and sigma = 1 on the last
/// spec.n_randomized conv layers; per iteration one D step then one G step,
/// each on a fresh epsilon. Non-randomized generator parameters train too.
WranganResult train_wrangan(const GeneratorSpec& spec, const ParamMap<float>& theta_g0, const ParamMap<float>& disc0,
                            const Dataset& data, const TrainConfig& config, const TrainObserver* observer = nullptr);

struct EncoderResult {
  ParamMap<float> encoder;
  std::vector<double> loss;
};

/// Trains E against the frozen generator `gen` (at eps = 0) with
/// 2 MSE + perceptual + latent_penalty * ||E(x)||^2.
EncoderResult train_encoder(const GeneratorSpec& spec, const ParamMap<float>& gen, const ParamMap<float>& percep,
                            const Dataset& data, const EncoderConfig& config);

}  // namespace wrangan
