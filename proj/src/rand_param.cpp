#include "wrangan/rand_param.hpp"

#include <cmath>
#include <cstring>

#include <fmt/format.h>

namespace wrangan {

Tensor<float> RandomizedEntry::sigma() const {
  Tensor<float> s(log_sigma.shape());
  for (std::int64_t i = 0; i < s.size(); ++i) s[i] = std::exp(log_sigma[i]);
  return s;
}

RandomizedParamStore RandomizedParamStore::from_generator(const GeneratorSpec& spec, const ParamMap<float>& theta_g0) {
  spec.validate();
  RandomizedParamStore store;
  store.spec_ = spec;
  store.frozen_ = theta_g0;
  for (const auto& name : last_layer_param_names(spec, spec.n_randomized)) {
    auto it = store.frozen_.find(name);
    if (it == store.frozen_.end()) throw std::invalid_argument(fmt::format("rand_param: generator lacks '{}'", name));
    RandomizedEntry e;
    e.name = name;
    e.mu = it->second;
    e.log_sigma = Tensor<float>(e.mu.shape(), 0.0f);
    store.entries_.push_back(std::move(e));
    store.frozen_.erase(it);
  }
  return store;
}

const RandomizedEntry* RandomizedParamStore::find(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

ParamMap<float> RandomizedParamStore::mean_weights() const {
  ParamMap<float> out = frozen_;
  for (const auto& e : entries_) out.insert_or_assign(e.name, e.mu);
  return out;
}

std::vector<std::string> RandomizedParamStore::layer_names() const {
  std::vector<std::string> layers;
  for (const auto& e : entries_) {
    auto layer = layer_of(e.name);
    if (layers.empty() || layers.back() != layer) layers.push_back(layer);
  }
  return layers;
}

namespace {
std::uint64_t digest_tensor(std::uint64_t h, const std::string& name, const Tensor<float>& t) {
  h = fnv1a64(name, h);
  h = fnv1a64(to_string(t.shape()), h);
  return fnv1a64(std::string_view(reinterpret_cast<const char*>(t.ptr()), static_cast<std::size_t>(t.size()) * sizeof(float)), h);
}
}  // namespace

std::uint64_t RandomizedParamStore::fingerprint() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& e : entries_) {
    h = digest_tensor(h, "mu/" + e.name, e.mu);
    h = digest_tensor(h, "log_sigma/" + e.name, e.log_sigma);
  }
  for (const auto& [name, t] : frozen_) h = digest_tensor(h, name, t);
  return h;
}

void RandomizedParamStore::validate() const {
  const auto expected = last_layer_param_names(spec_, spec_.n_randomized);
  if (expected.size() != entries_.size()) {
    throw std::invalid_argument(fmt::format("rand_param: {} entries for n_randomized={} (expected {})", entries_.size(),
                                            spec_.n_randomized, expected.size()));
  }
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& e = entries_[i];
    if (e.name != expected[i]) {
      throw std::invalid_argument(fmt::format("rand_param: entry '{}' where '{}' expected", e.name, expected[i]));
    }
    if (e.mu.shape() != e.log_sigma.shape()) {
      throw ShapeError(fmt::format("rand_param: '{}' mu {} vs log_sigma {}", e.name, to_string(e.mu.shape()),
                                   to_string(e.log_sigma.shape())));
    }
    if (frozen_.count(e.name)) throw std::invalid_argument(fmt::format("rand_param: '{}' both frozen and randomized", e.name));
  }
}

EpsilonVector make_epsilon(const RandomizedParamStore& store, float value) {
  EpsilonVector eps;
  for (const auto& e : store.entries()) eps.emplace(e.name, Tensor<float>(e.mu.shape(), value));
  return eps;
}

EpsilonVector sample_epsilon(const RandomizedParamStore& store, Rng& rng) {
  EpsilonVector eps;
  for (const auto& e : store.entries()) eps.emplace(e.name, rng.normal_tensor<float>(e.mu.shape()));
  return eps;
}

ParamMap<float> realize_weights(const RandomizedParamStore& store, const EpsilonVector& eps) {
  ParamMap<float> out = store.frozen();
  for (const auto& e : store.entries()) {
    auto it = eps.find(e.name);
    if (it == eps.end()) throw std::invalid_argument(fmt::format("realize_weights: no epsilon for '{}'", e.name));
    if (it->second.shape() != e.mu.shape()) {
      throw ShapeError(fmt::format("realize_weights: epsilon {} vs parameter '{}' {}", to_string(it->second.shape()),
                                   e.name, to_string(e.mu.shape())));
    }
    Tensor<float> theta(e.mu.shape());
    for (std::int64_t i = 0; i < theta.size(); ++i) theta[i] = e.mu[i] + it->second[i] * std::exp(e.log_sigma[i]);
    out.insert_or_assign(e.name, std::move(theta));
  }
  return out;
}

template <class T>
VarMap<T> realize_weights(const VarMap<T>& base, const VarMap<T>& sigma, const VarMap<T>& eps) {
  VarMap<T> out = base;
  for (const auto& [name, s] : sigma) {
    auto b = base.find(name);
    if (b == base.end()) throw std::invalid_argument(fmt::format("realize_weights: no mean for '{}'", name));
    auto e = eps.find(name);
    if (e == eps.end()) throw std::invalid_argument(fmt::format("realize_weights: no epsilon for '{}'", name));
    out.insert_or_assign(name, ops::add(b->second, ops::mul(s, e->second)));
  }
  return out;
}

template <class T>
Var<T> epsilon_regularizer(const VarMap<T>& eps, T alpha) {
  if (alpha < T(0)) throw std::invalid_argument("epsilon_regularizer: alpha must be >= 0");
  if (eps.empty()) throw std::invalid_argument("epsilon_regularizer: no entries");
  Var<T> total;
  for (const auto& [name, e] : eps) {
    auto term = ops::sum_squares(e);
    total = total.valid() ? ops::add(total, term) : term;
  }
  return ops::mul_scalar(total, alpha);
}

double epsilon_regularizer(const EpsilonVector& eps, double alpha) {
  if (alpha < 0) throw std::invalid_argument("epsilon_regularizer: alpha must be >= 0");
  double acc = 0;
  for (const auto& [name, e] : eps) {
    for (float v : e.data()) acc += static_cast<double>(v) * v;
  }
  return alpha * acc;
}

ParamCounts count_params(const RandomizedParamStore& store) {
  ParamCounts c;
  for (const auto& e : store.entries()) {
    c.randomized += e.log_sigma.size();
    c.total += e.mu.size();
  }
  for (const auto& [name, t] : store.frozen()) c.total += t.size();
  c.relative_increase = c.total ? static_cast<double>(c.randomized) / static_cast<double>(c.total) : 0.0;
  return c;
}

template VarMap<float> realize_weights(const VarMap<float>&, const VarMap<float>&, const VarMap<float>&);
template VarMap<double> realize_weights(const VarMap<double>&, const VarMap<double>&, const VarMap<double>&);
template Var<float> epsilon_regularizer(const VarMap<float>&, float);
template Var<double> epsilon_regularizer(const VarMap<double>&, double);

}  // namespace wrangan
