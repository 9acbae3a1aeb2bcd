#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>

#include "wrangan/tensor.hpp"

namespace wrangan {

template <class T>
using ParamMap = std::map<std::string, Tensor<T>>;

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps_hat = 1e-8;
};

/// Adam with bias correction. Moments are created lazily per parameter name
/// and always match the parameter's shape.
template <class T>
class Adam {
 public:
  explicit Adam(AdamOptions options = {});

  /// One update of every parameter in `params`. A parameter without an entry
  /// in `grads` is updated with a zero gradient (warned once per name).
  void step(ParamMap<T>& params, const ParamMap<T>& grads);

  std::int64_t step_count() const { return steps_; }
  const AdamOptions& options() const { return options_; }
  const ParamMap<T>& first_moment() const { return m_; }
  const ParamMap<T>& second_moment() const { return v_; }

 private:
  AdamOptions options_;
  std::int64_t steps_ = 0;
  ParamMap<T> m_;
  ParamMap<T> v_;
  std::set<std::string> warned_;
};

extern template class Adam<float>;
extern template class Adam<double>;

}  // namespace wrangan
