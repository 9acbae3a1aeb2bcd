#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "wrangan/networks.hpp"

namespace wrangan {

/// One randomized generator parameter: theta = mu + eps * exp(log_sigma).
struct RandomizedEntry {
  std::string name;
  Tensor<float> mu;
  Tensor<float> log_sigma;

  Tensor<float> sigma() const;
};

/// Per-entry noise with the same shapes as the randomized parameters.
using EpsilonVector = ParamMap<float>;

/// Mean/log-std pairs for the last N synthesis conv layers plus the frozen
/// remainder of the generator.
class RandomizedParamStore {
 public:
  RandomizedParamStore() = default;

  /// mu = theta_g0 and sigma = 1 (log_sigma = 0) for the weights and biases of
  /// the last spec.n_randomized synthesis conv layers; everything else frozen.
  static RandomizedParamStore from_generator(const GeneratorSpec& spec, const ParamMap<float>& theta_g0);

  const GeneratorSpec& spec() const { return spec_; }
  const std::vector<RandomizedEntry>& entries() const { return entries_; }
  std::vector<RandomizedEntry>& entries() { return entries_; }
  const ParamMap<float>& frozen() const { return frozen_; }
  ParamMap<float>& frozen() { return frozen_; }

  const RandomizedEntry* find(const std::string& name) const;

  /// Generator weights at eps = 0.
  ParamMap<float> mean_weights() const;

  /// Layer names ("syn.conv<k>") covered by the entries, in layer order.
  std::vector<std::string> layer_names() const;

  /// FNV-1a digest over names, shapes and bytes of every tensor.
  std::uint64_t fingerprint() const;

  /// Checks the structural invariants (names, shapes, positivity inputs).
  void validate() const;

  void set_spec(GeneratorSpec spec) { spec_ = std::move(spec); }

 private:
  GeneratorSpec spec_;
  std::vector<RandomizedEntry> entries_;
  ParamMap<float> frozen_;
};

EpsilonVector make_epsilon(const RandomizedParamStore& store, float value);
EpsilonVector sample_epsilon(const RandomizedParamStore& store, Rng& rng);

/// theta_G: mu + eps * sigma on randomized entries, frozen values elsewhere.
/// Throws when an entry has no epsilon or a shape disagrees.
ParamMap<float> realize_weights(const RandomizedParamStore& store, const EpsilonVector& eps);

/// Tape version. `base` holds every generator parameter (mu for randomized
/// ones); entries named in `sigma` become base + sigma * eps.
template <class T>
VarMap<T> realize_weights(const VarMap<T>& base, const VarMap<T>& sigma, const VarMap<T>& eps);

/// alpha * sum_i eps_i^2 over all randomized entries.
template <class T>
Var<T> epsilon_regularizer(const VarMap<T>& eps, T alpha);
double epsilon_regularizer(const EpsilonVector& eps, double alpha);

struct ParamCounts {
  std::int64_t randomized = 0;
  std::int64_t total = 0;
  double relative_increase = 0.0;
};

/// randomized = number of sigma entries added; total = deterministic generator
/// parameter count.
ParamCounts count_params(const RandomizedParamStore& store);

}  // namespace wrangan
