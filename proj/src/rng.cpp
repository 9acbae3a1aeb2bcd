#include "wrangan/rng.hpp"

#include <stdexcept>

namespace wrangan {

namespace {
std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}
}  // namespace

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis) {
  std::uint64_t h = basis;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Rng::Rng(std::uint64_t key) : key_(key), engine_(key) {}

Rng::Rng(std::uint64_t seed, std::string_view stream_name)
    : Rng(splitmix64(splitmix64(seed) ^ fnv1a64(stream_name))) {}

Rng Rng::fork(std::string_view name) const { return Rng(splitmix64(key_ ^ fnv1a64(name))); }

double Rng::uniform() { return uniform_(engine_); }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() { return normal_(engine_); }

std::int64_t Rng::below(std::int64_t n) {
  if (n <= 0) throw std::invalid_argument("rng: below() needs n > 0");
  return std::uniform_int_distribution<std::int64_t>(0, n - 1)(engine_);
}

}  // namespace wrangan
