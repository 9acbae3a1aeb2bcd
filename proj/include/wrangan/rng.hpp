#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "wrangan/tensor.hpp"

namespace wrangan {

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis = 0xcbf29ce484222325ULL);

/// Seeded random stream. Streams are identified by name and derived from the
/// run seed, so adding a consumer never shifts the draws of another.
class Rng {
 public:
  Rng(std::uint64_t seed, std::string_view stream_name);

  /// Independent child stream keyed by this stream's key and `name`.
  Rng fork(std::string_view name) const;

  std::uint64_t key() const { return key_; }

  std::uint64_t next_u64() { return engine_(); }
  double uniform();                         // [0, 1)
  double uniform(double lo, double hi);     // [lo, hi)
  double normal();                          // N(0, 1)
  std::int64_t below(std::int64_t n);       // [0, n)
  bool bernoulli(double p) { return uniform() < p; }

  template <class T>
  void fill_normal(Tensor<T>& t, double stddev = 1.0) {
    for (auto& v : t.data()) v = static_cast<T>(normal() * stddev);
  }
  template <class T>
  Tensor<T> normal_tensor(Shape shape, double stddev = 1.0) {
    Tensor<T> t(std::move(shape));
    fill_normal(t, stddev);
    return t;
  }

 private:
  explicit Rng(std::uint64_t key);

  std::uint64_t key_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace wrangan
