#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "wrangan/networks.hpp"

namespace wrangan {

struct TrainConfig {
  int batch_size = 8;
  int iterations = 0;
  double lr_g = 1e-3;
  double lr_d = 1e-3;
  double beta1 = 0.0;
  double beta2 = 0.99;
  double r1_gamma = 1.0;  // 0 disables R1
  int r1_every = 16;
  int log_every = 500;
  std::uint64_t seed = 1;

  void validate() const;
};

struct EncoderConfig {
  int batch_size = 8;
  int iterations = 5000;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double latent_penalty = 1e-3;
  int log_every = 500;
  std::uint64_t seed = 1;

  void validate() const;
};

enum class Strategy { w_only, w_plus, simple_tune, pti_style, wrangan };

inline constexpr Strategy kAllStrategies[] = {Strategy::w_only, Strategy::w_plus, Strategy::simple_tune,
                                              Strategy::pti_style, Strategy::wrangan};

std::string to_string(Strategy s);
/// Throws std::invalid_argument listing the valid names.
Strategy parse_strategy(const std::string& name);

struct InversionConfig {
  Strategy strategy = Strategy::wrangan;
  int iterations = 500;
  double lr = 1e-3;
  double alpha_reg = 1e-4;
  double eps_init = 1e-4;
  /// pti_style: iterations spent on w before weights are tuned; -1 means half.
  int pivot_iterations = -1;
  std::uint64_t seed = 1;

  int effective_pivot() const { return pivot_iterations < 0 ? iterations / 2 : pivot_iterations; }
  void validate() const;
};

struct DataConfig {
  std::string source = "synthetic";  // synthetic | folder
  std::string folder;
  int n_train = 4096;
  int n_test = 100;
  int n_reference = 512;
};

struct EvalConfig {
  int corruption_images = 256;
  double shift_scale = 1.0;
  int corruption_inversions = 20;
  int compare_images = 100;
  int style_samples = 10000;
  std::vector<int> grid_n = {4, 6, 8};
  std::vector<double> grid_alpha = {1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1};
  int grid_images = 50;
  int grid_iterations = 500;
  int influence_samples = 100;
  int precision_k = 3;
};

struct LatentConfig {
  std::string attribute = "fill";
  int n_codes = 1000;
  int pca_k = 4;
  std::vector<double> interpolation_alphas = {0.0, 0.25, 0.5, 0.75, 1.0};
  double edit_step = 1.0;
};

/// Baseline coefficients per strategy; the inversion config takes the one
/// matching its strategy.
struct InvertSection {
  std::string strategy = "wrangan";
  int iterations = 500;
  double lr = 1e-3;
  double eps_init = 1e-4;
  double alpha_wrangan = 1e-4;
  double alpha_simple = 1e-6;
  double alpha_pti = 1e-2;
  int pivot_iterations = -1;
};

/// Everything a run depends on. Parsed from a sectioned key = value file in
/// which every key is known; the canonical rendering of all values (defaults
/// included) is hashed to identify the run.
struct RunConfig {
  std::uint64_t seed = 1;
  std::uint64_t feature_seed = 1234;
  int jobs = 1;
  GeneratorSpec model;
  DataConfig data;
  TrainConfig pretrain;
  TrainConfig wrangan;
  EncoderConfig encoder;
  InvertSection invert;
  EvalConfig eval;
  LatentConfig latent;

  RunConfig();

  /// Effective configuration of one inversion strategy; alpha override < 0
  /// keeps the configured coefficient.
  InversionConfig inversion(Strategy s, double alpha_override = -1.0) const;
  TrainConfig pretrain_config() const;
  TrainConfig wrangan_config() const;
  EncoderConfig encoder_config() const;

  std::string canonical_text() const;
  std::uint64_t hash() const;
  std::string hash_hex() const;
  void validate() const;

  /// Throws ConfigError with the line number for syntax errors, unknown
  /// sections/keys and unparsable values.
  static RunConfig parse(const std::string& text);
  static RunConfig load(const std::filesystem::path& path);
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string hex64(std::uint64_t v);

}  // namespace wrangan
