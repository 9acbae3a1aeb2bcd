#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "wrangan/ops.hpp"
#include "wrangan/rng.hpp"

namespace wrangan::testing {

template <class T>
using GraphFn = std::function<Var<T>(const std::vector<Var<T>>&)>;

/// Scalarizes `out` with a fixed random projection so every output element
/// contributes to the checked loss.
template <class T>
Var<T> project(const Var<T>& out) {
  if (out.value().size() == 1) return ops::sum(out);
  Rng rng(99, "projection");
  auto r = out.tape().constant(rng.normal_tensor<T>(out.shape()));
  return ops::sum(ops::mul(out, r));
}

template <class T>
T eval_loss(const GraphFn<T>& f, const std::vector<Tensor<T>>& inputs) {
  Tape<T> tape;
  std::vector<Var<T>> vars;
  for (const auto& x : inputs) vars.push_back(tape.constant(x));
  return project(f(vars)).value()[0];
}

/// Largest relative error ||g_analytic - g_fd|| / max(||g_analytic||, ||g_fd||, floor)
/// over all inputs, using central differences at up to `max_probes` sampled
/// elements per input.
template <class T>
double gradient_error(const GraphFn<T>& f, const std::vector<Tensor<T>>& inputs, T h, int max_probes = 64,
                      double floor = 1e-6) {
  Tape<T> tape;
  std::vector<Var<T>> vars;
  for (const auto& x : inputs) vars.push_back(tape.leaf(x));
  auto grads = tape.backward(project(f(vars)));

  Rng pick(7, "probe");
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto& g = grads[vars[i]];
    std::vector<std::int64_t> idx;
    const std::int64_t n = inputs[i].size();
    if (n <= max_probes) {
      for (std::int64_t j = 0; j < n; ++j) idx.push_back(j);
    } else {
      for (int k = 0; k < max_probes; ++k) idx.push_back(pick.below(n));
    }
    double diff = 0, na = 0, nf = 0;
    for (auto j : idx) {
      auto plus = inputs, minus = inputs;
      plus[i][j] += h;
      minus[i][j] -= h;
      const double fd = (static_cast<double>(eval_loss(f, plus)) - static_cast<double>(eval_loss(f, minus))) /
                        (static_cast<double>(plus[i][j]) - static_cast<double>(minus[i][j]));
      const double a = g[j];
      diff += (a - fd) * (a - fd);
      na += a * a;
      nf += fd * fd;
    }
    const double denom = std::max({std::sqrt(na), std::sqrt(nf), floor});
    worst = std::max(worst, std::sqrt(diff) / denom);
  }
  return worst;
}

template <class T>
Tensor<T> random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

/// Uniform values whose magnitude stays at least `gap` away from zero.
template <class T>
Tensor<T> away_from_zero(Rng& rng, Shape shape, double gap = 0.1, double hi = 1.0) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) {
    const double m = rng.uniform(gap, hi);
    v = static_cast<T>(rng.bernoulli(0.5) ? m : -m);
  }
  return t;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("wrangan_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace wrangan::testing
