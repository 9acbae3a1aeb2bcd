#include "wrangan/inversion.hpp"

#include <cmath>
#include <functional>
#include <limits>

#include <fmt/format.h>

#include "wrangan/data_io.hpp"
#include "wrangan/metrics.hpp"

namespace wrangan {

namespace {

Tensor<float> as_batch(const Tensor<float>& x) {
  const auto& s = x.shape();
  if (s.size() == 3 && s[0] == 3 && s[1] == kImageSize && s[2] == kImageSize) return x.reshaped({1, 3, kImageSize, kImageSize});
  if (s.size() == 4 && s[0] == 1 && s[1] == 3 && s[2] == kImageSize && s[3] == kImageSize) return x;
  throw ShapeError(fmt::format("invert: target must be [3,32,32] or [1,3,32,32], got {}", to_string(s)));
}

void check_config(const InversionConfig& c) {
  if (c.iterations < 0) throw std::invalid_argument("invert: iterations must be >= 0");
  if (!(c.lr > 0)) throw std::invalid_argument("invert: lr must be > 0");
  if (!(c.alpha_reg >= 0)) throw std::invalid_argument("invert: alpha_reg must be >= 0");
}

struct Terms {
  Var<float> total, l2, perceptual, reg, image;
};

// Loss for the current variables; `weights` are the generator weights used.
using BuildFn = std::function<Terms(Tape<float>&, const VarMap<float>& vars, VarMap<float>& weights)>;

struct Best {
  double total = std::numeric_limits<double>::infinity();
  int iteration = -1;
  ParamMap<float> vars;
  Tensor<float> image;
  ParamMap<float> weights;
};

class Session {
 public:
  Session(const InversionModels& m, const Tensor<float>& x) : models_(m), target_(as_batch(x)) {
    Tape<float> t;
    auto p = bind_constants(t, m.percep);
    for (const auto& f : normalized_features(p, t.constant(target_))) target_features_.push_back(f.value());
  }

  const Tensor<float>& target() const { return target_; }

  // 2 MSE + perceptual (+ reg).
  Terms loss(Tape<float>& tape, const Var<float>& image, Var<float> reg) const {
    auto p = bind_constants(tape, models_.percep);
    std::vector<Var<float>> feats;
    for (const auto& f : target_features_) feats.push_back(tape.constant(f));
    Terms t;
    t.image = image;
    t.l2 = ops::mse(image, tape.constant(target_));
    t.perceptual = perceptual_distance_to(p, image, feats);
    t.total = ops::add(ops::mul_scalar(t.l2, 2.0f), t.perceptual);
    if (reg.valid()) t.total = ops::add(t.total, reg);
    t.reg = reg;
    return t;
  }

  // Runs `iterations` Adam steps over `vars`, recording one trace point per
  // step (the loss before the update) and tracking the best iterate.
  void run(int first_iteration, int iterations, ParamMap<float>& vars, const BuildFn& build, double lr,
           std::vector<LossPoint>& trace, Best& best) const {
    AdamOptions o;
    o.learning_rate = lr;
    Adam<float> opt(o);
    for (int k = 0; k < iterations; ++k) {
      const int it = first_iteration + k;
      Tape<float> tape;
      auto leaves = bind_leaves(tape, vars);
      VarMap<float> weights;
      auto terms = build(tape, leaves, weights);
      LossPoint lp;
      lp.iteration = it;
      lp.total = terms.total.value().item();
      lp.l2 = terms.l2.value().item();
      lp.perceptual = terms.perceptual.value().item();
      lp.reg = terms.reg.valid() ? terms.reg.value().item() : 0.0;
      trace.push_back(lp);
      if (!std::isfinite(lp.total)) {
        throw InversionError(fmt::format("invert: non-finite loss at iteration {}", it), trace);
      }
      if (lp.total < best.total) {
        best.total = lp.total;
        best.iteration = it;
        best.vars = vars;
        best.image = terms.image.value();
        best.weights.clear();
        for (const auto& [name, v] : weights) best.weights.emplace(name, v.value());
      }
      opt.step(vars, gradients_by_name(leaves, tape.backward(terms.total)));
    }
  }

  // Evaluates the variables without stepping (used for zero iterations).
  void evaluate(ParamMap<float>& vars, const BuildFn& build, Best& best) const {
    Tape<float> tape;
    auto leaves = bind_constants(tape, vars);
    VarMap<float> weights;
    auto terms = build(tape, leaves, weights);
    best.total = terms.total.value().item();
    best.iteration = -1;
    best.vars = vars;
    best.image = terms.image.value();
    for (const auto& [name, v] : weights) best.weights.emplace(name, v.value());
  }

  void finish(InversionResult& r, const Best& best) const {
    r.best_iteration = best.iteration;
    r.image = best.image;
    r.final_weights = best.weights;
    r.mse = mse(r.image, target_);
    r.perceptual = perceptual_distance(models_.percep, r.image, target_);
    r.ms_ssim = ms_ssim(r.image, target_);
    r.store_fingerprint = models_.store.fingerprint();
  }

 private:
  const InversionModels& models_;
  Tensor<float> target_;
  std::vector<Tensor<float>> target_features_;
};

std::vector<Var<float>> style_list(const GeneratorSpec& spec, const VarMap<float>& vars, LatentSpace space) {
  if (space == LatentSpace::w) return {vars.at("w")};
  std::vector<Var<float>> styles;
  for (int k = 0; k < spec.num_conv_layers(); ++k) styles.push_back(vars.at(fmt::format("w/{}", k)));
  styles.push_back(styles.back());  // toRGB shares the last layer's code
  return styles;
}

Var<float> sum_squares_of(const std::vector<Var<float>>& parts) {
  Var<float> acc;
  for (const auto& p : parts) acc = acc.valid() ? ops::add(acc, ops::sum_squares(p)) : ops::sum_squares(p);
  return acc;
}

}  // namespace

std::vector<std::string> pti_tuned_names(const GeneratorSpec& spec) {
  std::vector<std::string> names;
  for (const auto& layer : synthesis_layers(spec)) {
    names.push_back(layer.name + ".bias");
    names.push_back(layer.name + ".weight");
  }
  names.push_back("syn.torgb.bias");
  names.push_back("syn.torgb.weight");
  return names;
}

Tensor<float> initial_code(const InversionModels& models, const Tensor<float>& x) {
  const auto weights = models.store.mean_weights();
  return map_latent(models.spec, weights, encode(models.encoder, as_batch(x)));
}

InversionResult invert_wrangan(const Tensor<float>& x, const InversionModels& models, const InversionConfig& config) {
  check_config(config);
  const auto& store = models.store;
  if (store.entries().empty()) throw std::invalid_argument("invert_wrangan: the store has no randomized layers");
  Session s(models, x);
  ParamMap<float> vars;
  vars.emplace("w", initial_code(models, s.target()));
  for (const auto& e : store.entries()) vars.emplace("eps/" + e.name, Tensor<float>(e.mu.shape(), static_cast<float>(config.eps_init)));
  const auto base_tensors = store.mean_weights();
  ParamMap<float> sigma_tensors;
  for (const auto& e : store.entries()) sigma_tensors.emplace(e.name, e.sigma());
  const auto alpha = static_cast<float>(config.alpha_reg);

  BuildFn build = [&](Tape<float>& tape, const VarMap<float>& v, VarMap<float>& weights) {
    auto base = bind_constants(tape, base_tensors);
    auto sigma = bind_constants(tape, sigma_tensors);
    VarMap<float> eps;
    for (const auto& e : store.entries()) eps.emplace(e.name, v.at("eps/" + e.name));
    weights = realize_weights(base, sigma, eps);
    auto img = synthesize(models.spec, weights, v.at("w"));
    return s.loss(tape, img, epsilon_regularizer(eps, alpha));
  };

  InversionResult r;
  r.strategy = Strategy::wrangan;
  r.optimized_params = models.spec.w_dim + count_params(store).randomized;
  Best best;
  if (config.iterations == 0) {
    s.evaluate(vars, build, best);
  } else {
    s.run(0, config.iterations, vars, build, config.lr, r.trace, best);
  }
  r.w = {best.vars.at("w")};
  for (const auto& e : store.entries()) r.epsilon.emplace(e.name, best.vars.at("eps/" + e.name));
  s.finish(r, best);
  return r;
}

InversionResult invert_latent(const Tensor<float>& x, const InversionModels& models, const InversionConfig& config,
                              LatentSpace space) {
  check_config(config);
  Session s(models, x);
  const auto w0 = initial_code(models, s.target());
  ParamMap<float> vars;
  if (space == LatentSpace::w) {
    vars.emplace("w", w0);
  } else {
    for (int k = 0; k < models.spec.num_conv_layers(); ++k) vars.emplace(fmt::format("w/{}", k), w0);
  }
  const auto weight_tensors = models.store.mean_weights();
  BuildFn build = [&](Tape<float>& tape, const VarMap<float>& v, VarMap<float>& weights) {
    weights = bind_constants(tape, weight_tensors);
    auto img = synthesize(models.spec, weights, style_list(models.spec, v, space));
    return s.loss(tape, img, Var<float>());
  };

  InversionResult r;
  r.strategy = space == LatentSpace::w ? Strategy::w_only : Strategy::w_plus;
  r.optimized_params = parameter_count(vars);
  Best best;
  if (config.iterations == 0) {
    s.evaluate(vars, build, best);
  } else {
    s.run(0, config.iterations, vars, build, config.lr, r.trace, best);
  }
  if (space == LatentSpace::w) {
    r.w = {best.vars.at("w")};
  } else {
    for (int k = 0; k < models.spec.num_conv_layers(); ++k) r.w.push_back(best.vars.at(fmt::format("w/{}", k)));
  }
  s.finish(r, best);
  return r;
}

InversionResult invert_tune(const Tensor<float>& x, const InversionModels& models, const InversionConfig& config,
                            TuneMode mode) {
  check_config(config);
  Session s(models, x);
  const auto theta0 = models.store.mean_weights();
  const auto tuned = mode == TuneMode::simple_tune ? last_layer_param_names(models.spec, models.spec.n_randomized)
                                                   : pti_tuned_names(models.spec);
  if (tuned.empty()) throw std::invalid_argument("invert_tune: no parameters to tune");
  ParamMap<float> fixed = theta0;
  ParamMap<float> theta0_tuned;
  for (const auto& n : tuned) {
    theta0_tuned.emplace(n, theta0.at(n));
    fixed.erase(n);
  }
  const auto alpha = static_cast<float>(config.alpha_reg);
  const auto w0 = initial_code(models, s.target());

  // Weights from tuned leaves when present, else theta_0 constants.
  auto weights_for = [&](Tape<float>& tape, const VarMap<float>& v, VarMap<float>& weights, Var<float>& reg) {
    weights = bind_constants(tape, fixed);
    std::vector<Var<float>> deltas;
    for (const auto& n : tuned) {
      auto it = v.find("theta/" + n);
      if (it == v.end()) {
        weights.emplace(n, tape.constant(theta0_tuned.at(n)));
      } else {
        weights.emplace(n, it->second);
        deltas.push_back(ops::sub(it->second, tape.constant(theta0_tuned.at(n))));
      }
    }
    if (!deltas.empty()) reg = ops::mul_scalar(sum_squares_of(deltas), alpha);
  };

  InversionResult r;
  r.strategy = mode == TuneMode::simple_tune ? Strategy::simple_tune : Strategy::pti_style;
  Best best;
  ParamMap<float> vars;
  ParamMap<float> w_fixed;

  BuildFn joint = [&](Tape<float>& tape, const VarMap<float>& v, VarMap<float>& weights) {
    Var<float> reg;
    weights_for(tape, v, weights, reg);
    auto w = v.count("w") ? v.at("w") : tape.constant(w_fixed.at("w"));
    return s.loss(tape, synthesize(models.spec, weights, w), reg);
  };

  if (mode == TuneMode::simple_tune) {
    vars.emplace("w", w0);
    for (const auto& n : tuned) vars.emplace("theta/" + n, theta0_tuned.at(n));
    r.optimized_params = parameter_count(vars);
    if (config.iterations == 0) {
      s.evaluate(vars, joint, best);
    } else {
      s.run(0, config.iterations, vars, joint, config.lr, r.trace, best);
    }
  } else {
    const int pivot = std::min(config.effective_pivot(), config.iterations);
    vars.emplace("w", w0);
    std::int64_t tuned_count = 0;
    for (const auto& n : tuned) tuned_count += theta0_tuned.at(n).size();
    r.optimized_params = std::max<std::int64_t>(models.spec.w_dim, pivot < config.iterations ? tuned_count : 0);
    if (config.iterations == 0) {
      s.evaluate(vars, joint, best);
    } else {
      s.run(0, pivot, vars, joint, config.lr, r.trace, best);
      if (pivot < config.iterations) {
        // stage 2 tunes from the pivot (last stage-1 iterate) with w frozen
        w_fixed.emplace("w", vars.at("w"));
        ParamMap<float> stage2;
        for (const auto& n : tuned) stage2.emplace("theta/" + n, theta0_tuned.at(n));
        s.run(pivot, config.iterations - pivot, stage2, joint, config.lr, r.trace, best);
        if (!best.vars.count("w")) best.vars.emplace("w", w_fixed.at("w"));
      }
    }
  }
  r.w = {best.vars.at("w")};
  for (const auto& n : tuned) {
    auto it = best.vars.find("theta/" + n);
    Tensor<float> delta(theta0_tuned.at(n).shape());
    if (it != best.vars.end()) {
      for (std::int64_t i = 0; i < delta.size(); ++i) delta[i] = it->second[i] - theta0_tuned.at(n)[i];
    }
    r.epsilon.emplace(n, std::move(delta));
  }
  s.finish(r, best);
  return r;
}

InversionResult invert(const Tensor<float>& x, const InversionModels& models, const InversionConfig& config) {
  switch (config.strategy) {
    case Strategy::w_only: return invert_latent(x, models, config, LatentSpace::w);
    case Strategy::w_plus: return invert_latent(x, models, config, LatentSpace::w_plus);
    case Strategy::simple_tune: return invert_tune(x, models, config, TuneMode::simple_tune);
    case Strategy::pti_style: return invert_tune(x, models, config, TuneMode::pti_style);
    case Strategy::wrangan: return invert_wrangan(x, models, config);
  }
  throw std::invalid_argument("invert: unknown strategy");
}

Tensor<float> render(const GeneratorSpec& spec, const InversionResult& result) {
  Tape<float> tape;
  auto p = bind_constants(tape, result.final_weights);
  std::vector<Var<float>> styles;
  for (const auto& w : result.w) styles.push_back(tape.constant(w));
  if (styles.size() > 1) styles.push_back(styles.back());
  return synthesize(spec, p, styles).value();
}

void write_loss_trace(const std::filesystem::path& path, const std::vector<LossPoint>& trace) {
  CsvWriter csv(path, {"iteration", "total", "l2", "perceptual", "reg"});
  for (const auto& p : trace) {
    csv.row({std::to_string(p.iteration), fmt_real(p.total), fmt_real(p.l2), fmt_real(p.perceptual), fmt_real(p.reg)});
  }
}

}  // namespace wrangan
