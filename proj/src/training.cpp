#include "wrangan/training.hpp"

#include <cmath>

#include <fmt/format.h>

#include "wrangan/log.hpp"

namespace wrangan {

namespace {

constexpr const char* kSigmaPrefix = "log_sigma/";

std::vector<std::int64_t> draw_indices(Rng& rng, std::size_t n, int count) {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(count));
  for (auto& i : idx) i = rng.below(static_cast<std::int64_t>(n));
  return idx;
}

void require_finite(double v, const char* what, int iteration) {
  if (!std::isfinite(v)) throw TrainingError(fmt::format("non-finite {} at iteration {}", what, iteration));
}

// Generator state for the shared GAN loop: every generator parameter by name
// (mu for randomized ones) plus "log_sigma/<name>" entries.
struct GenState {
  GeneratorSpec spec;
  ParamMap<float> params;
  std::vector<std::string> randomized;

  static GenState from_store(const RandomizedParamStore& store) {
    GenState s{store.spec(), store.mean_weights(), {}};
    for (const auto& e : store.entries()) {
      s.params.insert_or_assign(kSigmaPrefix + e.name, e.log_sigma);
      s.randomized.push_back(e.name);
    }
    return s;
  }

  RandomizedParamStore to_store() const {
    ParamMap<float> weights;
    for (const auto& [name, t] : params) {
      if (name.rfind(kSigmaPrefix, 0) != 0) weights.emplace(name, t);
    }
    auto store = RandomizedParamStore::from_generator(spec, weights);
    for (auto& e : store.entries()) e.log_sigma = params.at(kSigmaPrefix + e.name);
    return store;
  }

  EpsilonVector sample_eps(Rng& rng) const {
    EpsilonVector eps;
    for (const auto& name : randomized) eps.emplace(name, rng.normal_tensor<float>(params.at(name).shape()));
    return eps;
  }

  // theta = mu + exp(log_sigma) * eps, without a tape.
  ParamMap<float> realize(const EpsilonVector& eps) const {
    ParamMap<float> out;
    for (const auto& [name, t] : params) {
      if (name.rfind(kSigmaPrefix, 0) != 0) out.emplace(name, t);
    }
    for (const auto& name : randomized) {
      auto& theta = out.at(name);
      const auto& rho = params.at(kSigmaPrefix + name);
      const auto& e = eps.at(name);
      for (std::int64_t i = 0; i < theta.size(); ++i) theta[i] += std::exp(rho[i]) * e[i];
    }
    return out;
  }

  void check_sigma(int iteration) const {
    for (const auto& name : randomized) {
      for (float r : params.at(kSigmaPrefix + name).data()) {
        if (!std::isfinite(r) || r > 10.0f) {
          throw TrainingError(
              fmt::format("log-sigma overflow in layer {} ({}) at iteration {}", layer_of(name), name, iteration));
        }
      }
    }
  }
};

Tensor<float> generate(const GeneratorSpec& spec, const ParamMap<float>& weights, const Tensor<float>& z) {
  return synthesize(spec, weights, map_latent(spec, weights, z));
}

struct DStep {
  double loss = 0;
  double r1 = 0;
};

DStep discriminator_step(const GeneratorSpec& spec, const GenState& gen, ParamMap<float>& disc, Adam<float>& opt,
                         const Tensor<float>& real, const Tensor<float>& z, const EpsilonVector& eps,
                         const TrainConfig& cfg, int iteration) {
  DStep out;
  const auto fake = generate(spec, gen.realize(eps), z);
  Tape<float> tape;
  auto d = bind_leaves(tape, disc);
  auto lf = discriminate(d, tape.constant(fake));
  auto lr = discriminate(d, tape.constant(real));
  auto loss = ops::add(ops::mean(ops::softplus(lf)), ops::mean(ops::softplus(ops::neg(lr))));
  out.loss = loss.value().item();
  require_finite(out.loss, "discriminator loss", iteration);
  auto grads = gradients_by_name(d, tape.backward(loss));

  if (cfg.r1_gamma > 0 && iteration % cfg.r1_every == 0) {
    const auto r1 = r1_penalty(disc, real, cfg.r1_gamma);
    out.r1 = r1.value;
    require_finite(out.r1, "R1 penalty", iteration);
    const auto scale = static_cast<float>(cfg.r1_every);
    for (auto& [name, gr] : grads) {
      const auto& extra = r1.gradient.at(name);
      for (std::int64_t i = 0; i < gr.size(); ++i) gr[i] += scale * extra[i];
    }
  }
  opt.step(disc, grads);
  return out;
}

double generator_step(const GeneratorSpec& spec, GenState& gen, const ParamMap<float>& disc, Adam<float>& opt,
                      const Tensor<float>& z, const EpsilonVector& eps, int iteration) {
  Tape<float> tape;
  auto leaves = bind_leaves(tape, gen.params);
  VarMap<float> base, sigma, e;
  for (const auto& [name, v] : leaves) {
    if (name.rfind(kSigmaPrefix, 0) == 0) {
      sigma.emplace(name.substr(std::char_traits<char>::length(kSigmaPrefix)), ops::exp(v));
    } else {
      base.emplace(name, v);
    }
  }
  for (const auto& [name, t] : eps) e.emplace(name, tape.constant(t));
  const auto weights = realize_weights(base, sigma, e);
  auto d = bind_constants(tape, disc);
  auto w = map_latent(spec, weights, tape.constant(z));
  auto logits = discriminate(d, synthesize(spec, weights, w));
  auto loss = ops::mean(ops::softplus(ops::neg(logits)));
  const double value = loss.value().item();
  require_finite(value, "generator loss", iteration);
  opt.step(gen.params, gradients_by_name(leaves, tape.backward(loss)));
  gen.check_sigma(iteration);
  return value;
}

AdamOptions gan_adam(double lr, const TrainConfig& cfg) {
  AdamOptions o;
  o.learning_rate = lr;
  o.beta1 = cfg.beta1;
  o.beta2 = cfg.beta2;
  return o;
}

struct LoopOutput {
  GenState gen;
  ParamMap<float> disc;
  LossLog log;
};

LoopOutput gan_loop(GenState gen, ParamMap<float> disc, const Dataset& data, const TrainConfig& cfg,
                    const TrainObserver* observer, const char* label) {
  cfg.validate();
  if (data.size() == 0) throw std::invalid_argument(fmt::format("{}: empty dataset", label));
  Rng z_rng(cfg.seed, "gan/z");
  Rng batch_rng(cfg.seed, "gan/batches");
  Rng eps_rng(cfg.seed, "wrangan-eps");
  Adam<float> g_opt(gan_adam(cfg.lr_g, cfg));
  Adam<float> d_opt(gan_adam(cfg.lr_d, cfg));
  const auto& spec = gen.spec;
  LossLog log;
  log.reserve(static_cast<std::size_t>(cfg.iterations));

  auto notify_step = [&](int it, const char* phase) {
    if (observer && observer->after_step) observer->after_step(it, phase, gen.to_store(), disc);
  };
  auto notify_eps = [&](int it, const char* phase, const EpsilonVector& eps) {
    if (observer && observer->on_epsilon) observer->on_epsilon(it, phase, eps);
  };

  for (int it = 0; it < cfg.iterations; ++it) {
    LossRecord rec;
    rec.iteration = it;

    const auto real = data.batch(draw_indices(batch_rng, data.size(), cfg.batch_size));
    const auto zd = z_rng.normal_tensor<float>(Shape{cfg.batch_size, spec.z_dim});
    const auto eps_d = gen.sample_eps(eps_rng);
    notify_eps(it, "d", eps_d);
    const auto ds = discriminator_step(spec, gen, disc, d_opt, real, zd, eps_d, cfg, it);
    rec.d_loss = ds.loss;
    rec.r1 = ds.r1;
    notify_step(it, "d");

    const auto zg = z_rng.normal_tensor<float>(Shape{cfg.batch_size, spec.z_dim});
    const auto eps_g = gen.sample_eps(eps_rng);
    notify_eps(it, "g", eps_g);
    rec.g_loss = generator_step(spec, gen, disc, g_opt, zg, eps_g, it);
    notify_step(it, "g");

    log.push_back(rec);
    const bool last = it + 1 == cfg.iterations;
    if ((it + 1) % cfg.log_every == 0 || last) {
      log::info(fmt::format("{} {}/{}: d_loss {:.4f} g_loss {:.4f} r1 {:.4f}", label, it + 1, cfg.iterations, rec.d_loss,
                            rec.g_loss, rec.r1));
      if (observer && observer->periodic) observer->periodic(it + 1);
    }
  }
  return {std::move(gen), std::move(disc), std::move(log)};
}

}  // namespace

template <class T>
R1Result<T> r1_penalty(const ParamMap<T>& disc, const Tensor<T>& real, double gamma, double relative_step) {
  R1Result<T> out;
  const auto b = static_cast<double>(real.dim(0));
  Tensor<T> g;
  {
    Tape<T> t;
    auto dc = bind_constants(t, disc);
    auto x = t.leaf(real);
    g = t.backward(ops::sum(discriminate(dc, x)))[x];
  }
  double sq = 0;
  for (T v : g.data()) sq += static_cast<double>(v) * v;
  out.value = 0.5 * gamma * sq / b;
  const double rms = std::sqrt(sq / static_cast<double>(g.size()));
  if (rms == 0 || !std::isfinite(rms)) {
    for (const auto& [name, t] : disc) out.gradient.emplace(name, Tensor<T>(t.shape()));
    return out;
  }
  // d/dtheta of (gamma / 2B) |g|^2 is (gamma / B) (dg/dtheta)^T g, taken as a
  // central difference of the parameter gradient along g
  const double h = relative_step / rms;
  Tensor<T> xp = real, xm = real;
  for (std::int64_t i = 0; i < g.size(); ++i) {
    xp[i] += static_cast<T>(h * g[i]);
    xm[i] -= static_cast<T>(h * g[i]);
  }
  Tape<T> t;
  auto dl = bind_leaves(t, disc);
  auto diff = ops::sub(ops::sum(discriminate(dl, t.constant(xp))), ops::sum(discriminate(dl, t.constant(xm))));
  out.gradient = gradients_by_name(dl, t.backward(diff));
  const auto scale = static_cast<T>(gamma / b / (2 * h));
  for (auto& [name, gr] : out.gradient) {
    for (auto& v : gr.data()) v *= scale;
  }
  return out;
}

template R1Result<float> r1_penalty(const ParamMap<float>&, const Tensor<float>&, double, double);
template R1Result<double> r1_penalty(const ParamMap<double>&, const Tensor<double>&, double, double);

void write_loss_log(const std::filesystem::path& path, const LossLog& log) {
  CsvWriter csv(path, {"iteration", "d_loss", "g_loss", "r1"});
  for (const auto& r : log) {
    csv.row({std::to_string(r.iteration), fmt_real(r.d_loss), fmt_real(r.g_loss), fmt_real(r.r1)});
  }
}

ParamMap<float> initial_generator(const GeneratorSpec& spec, std::uint64_t seed) {
  Rng rng(seed, "init/generator");
  return init_generator(spec, rng);
}

ParamMap<float> initial_discriminator(std::uint64_t seed) {
  Rng rng(seed, "init/discriminator");
  return init_discriminator(rng);
}

GanResult pretrain_base(const GeneratorSpec& spec, const Dataset& data, const TrainConfig& config,
                        const ParamMap<float>* init_g, const ParamMap<float>* init_d, const TrainObserver* observer) {
  if (data.size() < 1000) {
    throw std::invalid_argument(fmt::format("pretrain: need at least 1000 images, got {}", data.size()));
  }
  GeneratorSpec s = spec;
  s.n_randomized = 0;
  s.validate();
  const auto g0 = init_g ? *init_g : initial_generator(s, config.seed);
  GenState gen = GenState::from_store(RandomizedParamStore::from_generator(s, g0));
  auto out = gan_loop(std::move(gen), init_d ? *init_d : initial_discriminator(config.seed), data, config, observer,
                      "pretrain");
  return {std::move(out.gen.params), std::move(out.disc), std::move(out.log)};
}

WranganResult train_wrangan(const GeneratorSpec& spec, const ParamMap<float>& theta_g0, const ParamMap<float>& disc0,
                            const Dataset& data, const TrainConfig& config, const TrainObserver* observer) {
  spec.validate();
  auto store = RandomizedParamStore::from_generator(spec, theta_g0);
  store.validate();
  auto out = gan_loop(GenState::from_store(store), disc0, data, config, observer, "wrangan");
  return {out.gen.to_store(), std::move(out.disc), std::move(out.log)};
}

EncoderResult train_encoder(const GeneratorSpec& spec, const ParamMap<float>& gen, const ParamMap<float>& percep,
                            const Dataset& data, const EncoderConfig& cfg) {
  cfg.validate();
  if (data.size() == 0) throw std::invalid_argument("train_encoder: empty dataset");
  Rng init(cfg.seed, "init/encoder");
  EncoderResult out{init_encoder(spec, init), {}};
  Rng batch_rng(cfg.seed, "encoder/batches");
  AdamOptions o;
  o.learning_rate = cfg.lr;
  o.beta1 = cfg.beta1;
  o.beta2 = cfg.beta2;
  Adam<float> opt(o);
  const auto b = static_cast<float>(cfg.batch_size);
  for (int it = 0; it < cfg.iterations; ++it) {
    const auto x = data.batch(draw_indices(batch_rng, data.size(), cfg.batch_size));
    Tape<float> tape;
    auto e = bind_leaves(tape, out.encoder);
    auto g = bind_constants(tape, gen);
    auto p = bind_constants(tape, percep);
    auto xt = tape.constant(x);
    auto z = encode(e, xt);
    auto img = synthesize(spec, g, map_latent(spec, g, z));
    auto loss = ops::add(ops::add(ops::mul_scalar(ops::mse(img, xt), 2.0f), perceptual_distance(p, img, xt)),
                         ops::mul_scalar(ops::sum_squares(z), static_cast<float>(cfg.latent_penalty) / b));
    const double value = loss.value().item();
    require_finite(value, "encoder loss", it);
    opt.step(out.encoder, gradients_by_name(e, tape.backward(loss)));
    out.loss.push_back(value);
    if ((it + 1) % cfg.log_every == 0 || it + 1 == cfg.iterations) {
      log::info(fmt::format("encoder {}/{}: loss {:.4f}", it + 1, cfg.iterations, value));
    }
  }
  return out;
}

}  // namespace wrangan
