#include "wrangan/adam.hpp"

#include <cmath>

#include <fmt/format.h>

#include "wrangan/log.hpp"

namespace wrangan {

template <class T>
Adam<T>::Adam(AdamOptions options) : options_(options) {
  if (!(options_.learning_rate > 0)) throw std::invalid_argument("adam: learning_rate must be > 0");
  if (options_.beta1 < 0 || options_.beta1 >= 1 || options_.beta2 < 0 || options_.beta2 >= 1) {
    throw std::invalid_argument("adam: betas must lie in [0, 1)");
  }
}

template <class T>
void Adam<T>::step(ParamMap<T>& params, const ParamMap<T>& grads) {
  ++steps_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  const double lr = options_.learning_rate;
  const double eps = options_.eps_hat;

  for (auto& [name, p] : params) {
    auto git = grads.find(name);
    const Tensor<T>* g = nullptr;
    if (git == grads.end()) {
      if (warned_.insert(name).second) log::warn(fmt::format("adam: no gradient for '{}', using zero", name));
    } else {
      if (git->second.shape() != p.shape()) {
        throw ShapeError(fmt::format("adam: gradient shape {} does not match parameter '{}' {}",
                                     to_string(git->second.shape()), name, to_string(p.shape())));
      }
      g = &git->second;
    }
    auto [mit, m_new] = m_.try_emplace(name, p.shape(), T(0));
    auto [vit, v_new] = v_.try_emplace(name, p.shape(), T(0));
    auto& m = mit->second;
    auto& v = vit->second;
    for (std::int64_t i = 0; i < p.size(); ++i) {
      const double gi = g ? static_cast<double>((*g)[i]) : 0.0;
      const double mi = b1 * m[i] + (1.0 - b1) * gi;
      const double vi = b2 * v[i] + (1.0 - b2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = lr * (mi / c1) / (std::sqrt(vi / c2) + eps);
      p[i] = static_cast<T>(p[i] - update);
    }
  }
}

template class Adam<float>;
template class Adam<double>;

}  // namespace wrangan
