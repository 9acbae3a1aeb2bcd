#include "wrangan/cli.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>

#include <cmath>
#include <filesystem>
#include <ostream>
#include <sstream>

#include "wrangan/data_io.hpp"
#include "wrangan/eval_suite.hpp"
#include "wrangan/latent_tools.hpp"
#include "wrangan/log.hpp"
#include "wrangan/metrics.hpp"
#include "wrangan/training.hpp"

namespace wrangan::cli {

namespace fs = std::filesystem;

namespace {

class PreconditionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string command;
  std::string config;
  std::string out;
  std::uint64_t seed = 0;
  int jobs = 1;
  std::string strategy;
  int n_randomized = 0;
  double alpha = 0;
  int iterations = 0;
  std::vector<std::string> images;
  std::string protocol = "strategy-compare";
  // which optional flags were given
  bool has_seed = false, has_jobs = false, has_n = false, has_alpha = false, has_iterations = false;
};

// Everything a command needs: the effective config and the output layout.
struct Context {
  Options opt;
  RunConfig cfg;
  fs::path out;
  std::ostream* stdout_ = nullptr;

  std::string hash() const { return cfg.hash_hex(); }

  fs::path base_ckpt() const { return out / "base.ckpt"; }
  fs::path wrangan_ckpt() const { return out / "wrangan.ckpt"; }
  fs::path encoder_ckpt() const { return out / "encoder.ckpt"; }

  Checkpoint checkpoint() const {
    Checkpoint c;
    c.config_hash = hash();
    c.seed = cfg.seed;
    return c;
  }

  EvalReport report() const {
    EvalReport r;
    r.seed = cfg.seed;
    r.config_hash = hash();
    return r;
  }

  void write_report(const std::string& name, const EvalReport& r) const { write_text(out / (name + "_report.json"), r.to_json() + "\n"); }

  void summary(const std::string& text) const { *stdout_ << fmt::format("{}: {} [config {}]", opt.command, text, hash()) << std::endl; }
};

Checkpoint require_checkpoint(const fs::path& path, const std::string& producer) {
  if (!fs::exists(path)) {
    throw PreconditionError(fmt::format("missing '{}'; run `{}` with the same --out first", path.string(), producer));
  }
  return load_checkpoint(path);
}

Dataset split(const RunConfig& cfg, const std::string& which) {
  int n = which == "train" ? cfg.data.n_train : which == "test" ? cfg.data.n_test : cfg.data.n_reference;
  if (cfg.data.source == "synthetic") {
    SyntheticSpec s;
    s.n_images = n;
    s.seed = cfg.seed;
    s.stream = which;
    return generate_synthetic(s);
  }
  // folder: test first, then reference, the rest trains
  const auto all = load_image_folder(cfg.data.folder);
  const std::size_t n_test = static_cast<std::size_t>(cfg.data.n_test);
  const std::size_t n_ref = static_cast<std::size_t>(cfg.data.n_reference);
  if (all.size() <= n_test + n_ref) {
    throw PreconditionError(fmt::format("folder '{}' has {} images; need more than n_test + n_reference = {}",
                                        cfg.data.folder, all.size(), n_test + n_ref));
  }
  std::size_t lo = 0, hi = n_test;
  if (which == "reference") {
    lo = n_test;
    hi = n_test + n_ref;
  } else if (which == "train") {
    lo = n_test + n_ref;
    hi = all.size();
  }
  Dataset d;
  d.attribute_names = all.attribute_names;
  for (std::size_t i = lo; i < hi; ++i) {
    d.images.push_back(all.images[i]);
    d.ids.push_back(all.ids[i]);
    if (!all.labels.empty()) d.labels.push_back(all.labels[i]);
  }
  return d;
}

GeneratorSpec store_spec(const Context& ctx, const Checkpoint& ck) {
  GeneratorSpec spec = ctx.cfg.model;
  auto it = ck.attributes.find("n_randomized");
  if (it != ck.attributes.end()) spec.n_randomized = std::stoi(it->second);
  return spec;
}

InversionModels load_models(const Context& ctx) {
  InversionModels m;
  const auto wck = require_checkpoint(ctx.wrangan_ckpt(), "train-wrangan");
  m.spec = store_spec(ctx, wck);
  m.store = get_store(wck, m.spec);
  const auto eck = require_checkpoint(ctx.encoder_ckpt(), "train-encoder");
  Rng dummy(0, "init/encoder");
  const auto shape = init_encoder(m.spec, dummy);
  m.encoder = get_params(eck, "encoder", &shape);
  m.percep = init_perceptual(ctx.cfg.feature_seed);
  return m;
}

CorruptionSetup corruption_setup(const Context& ctx, const InversionModels& m, const ParamMap<float>& base) {
  CorruptionSetup s;
  s.spec = m.spec;
  s.base_weights = base;
  s.percep = m.percep;
  s.reference = image_features(m.percep, split(ctx.cfg, "reference").images);
  s.style_scale = characteristic_style_scale(m.spec, base, ctx.cfg.eval.style_samples, ctx.cfg.seed);
  s.n_images = ctx.cfg.eval.corruption_images;
  s.shift_scale = ctx.cfg.eval.shift_scale;
  s.seed = ctx.cfg.seed;
  return s;
}

// Images named by --image, else the first `limit` test images.
void input_images(const Context& ctx, std::size_t limit, std::vector<Tensor<float>>& images,
                  std::vector<std::string>& ids) {
  if (!ctx.opt.images.empty()) {
    for (const auto& p : ctx.opt.images) {
      if (!fs::exists(p)) throw PreconditionError(fmt::format("image '{}' not found", p));
      images.push_back(load_image(p));
      ids.push_back(fs::path(p).stem().string());
    }
    return;
  }
  const auto test = split(ctx.cfg, "test");
  for (std::size_t i = 0; i < std::min(limit, test.size()); ++i) {
    images.push_back(test.images[i]);
    ids.push_back(test.ids[i]);
  }
}

Strategy chosen_strategy(const Context& ctx) { return parse_strategy(ctx.cfg.invert.strategy); }

void write_result(const fs::path& dir, const Context& ctx, const std::string& id, const InversionResult& r,
                  const Tensor<float>& target) {
  fs::create_directories(dir);
  write_loss_trace(dir / "loss.csv", r.trace);
  save_image(dir / "reconstruction.png", batch_item(r.image, 0).reshaped({3, 32, 32}));
  save_image(dir / "target.png", target);
  auto ck = ctx.checkpoint();
  ck.attributes["image_id"] = id;
  ck.attributes["strategy"] = to_string(r.strategy);
  ck.attributes["best_iteration"] = std::to_string(r.best_iteration);
  for (std::size_t k = 0; k < r.w.size(); ++k) ck.tensors.emplace(fmt::format("w/{}", k), r.w[k]);
  put_params(ck, "epsilon", r.epsilon);
  save_checkpoint(dir / "result.ckpt", ck);
  auto rep = ctx.report();
  rep.set("mse", r.mse);
  rep.set("perceptual", r.perceptual);
  rep.set("ms_ssim", r.ms_ssim);
  rep.set("best_iteration", r.best_iteration);
  rep.set("optimized_params", static_cast<double>(r.optimized_params));
  write_text(dir / "result.json", rep.to_json() + "\n");
}

double layer_fraction_small(const RandomizedParamStore& store, EvalReport& rep) {
  double mean = 0;
  const auto layers = variance_histogram(store);
  for (const auto& l : layers) {
    rep.set(l.layer + ".frac_sigma_below_1e-3", l.frac_small);
    rep.set(l.layer + ".mean_sigma", l.mean_sigma);
    mean += l.mean_sigma;
  }
  return layers.empty() ? 0.0 : mean / static_cast<double>(layers.size());
}

// ---------------------------------------------------------------- commands

int cmd_gen_data(const Context& ctx) {
  std::size_t counts[3];
  const char* names[3] = {"train", "test", "reference"};
  for (int i = 0; i < 3; ++i) {
    const auto d = split(ctx.cfg, names[i]);
    export_dataset(ctx.out / "data" / names[i], d);
    counts[i] = d.size();
  }
  auto rep = ctx.report();
  rep.set("n_train", static_cast<double>(counts[0]));
  rep.set("n_test", static_cast<double>(counts[1]));
  rep.set("n_reference", static_cast<double>(counts[2]));
  ctx.write_report("gen-data", rep);
  ctx.summary(fmt::format("{} train, {} test, {} reference images in {}", counts[0], counts[1], counts[2],
                          (ctx.out / "data").string()));
  return 0;
}

int cmd_pretrain(const Context& ctx) {
  const auto train = split(ctx.cfg, "train");
  GeneratorSpec spec = ctx.cfg.model;
  const auto r = pretrain_base(spec, train, ctx.cfg.pretrain_config());
  auto ck = ctx.checkpoint();
  put_params(ck, "generator", r.generator);
  put_params(ck, "discriminator", r.discriminator);
  save_checkpoint(ctx.base_ckpt(), ck);
  write_loss_log(ctx.out / "pretrain_loss.csv", r.log);
  InversionModels m;
  m.spec = spec;
  m.percep = init_perceptual(ctx.cfg.feature_seed);
  const auto cs = corruption_setup(ctx, m, r.generator);
  const auto g = generation_fid(cs, r.generator);
  auto rep = ctx.report();
  rep.set("iterations", ctx.cfg.pretrain.iterations);
  if (!r.log.empty()) {
    rep.set("final_d_loss", r.log.back().d_loss);
    rep.set("final_g_loss", r.log.back().g_loss);
  }
  rep.set("generation_fid", g.fid);
  rep.set("generation_kid", g.kid);
  ctx.write_report("pretrain", rep);
  ctx.summary(fmt::format("{} iterations, generation FID {:.4g}", ctx.cfg.pretrain.iterations, g.fid));
  return 0;
}

int cmd_train_wrangan(const Context& ctx) {
  const auto bck = require_checkpoint(ctx.base_ckpt(), "pretrain");
  GeneratorSpec spec = ctx.cfg.model;
  Rng gr(0, "init/generator");
  const auto gshape = init_generator(spec, gr);
  Rng dr(0, "init/discriminator");
  const auto dshape = init_discriminator(dr);
  const auto gen = get_params(bck, "generator", &gshape);
  const auto disc = get_params(bck, "discriminator", &dshape);
  const auto train = split(ctx.cfg, "train");
  const auto r = train_wrangan(spec, gen, disc, train, ctx.cfg.wrangan_config());
  auto ck = ctx.checkpoint();
  ck.attributes["n_randomized"] = std::to_string(spec.n_randomized);
  put_store(ck, r.store);
  put_params(ck, "discriminator", r.discriminator);
  save_checkpoint(ctx.wrangan_ckpt(), ck);
  write_loss_log(ctx.out / "wrangan_loss.csv", r.log);
  auto rep = ctx.report();
  rep.set("iterations", ctx.cfg.wrangan.iterations);
  rep.set("n_randomized", spec.n_randomized);
  const auto counts = count_params(r.store);
  rep.set("randomized_params", static_cast<double>(counts.randomized));
  rep.set("relative_memory_increase", counts.relative_increase);
  const double mean_sigma = layer_fraction_small(r.store, rep);
  ctx.write_report("train-wrangan", rep);
  ctx.summary(fmt::format("{} iterations, N = {}, {} randomized parameters, mean sigma {:.4g}", ctx.cfg.wrangan.iterations,
                          spec.n_randomized, counts.randomized, mean_sigma));
  return 0;
}

int cmd_train_encoder(const Context& ctx) {
  const auto wck = require_checkpoint(ctx.wrangan_ckpt(), "train-wrangan");
  const auto spec = store_spec(ctx, wck);
  const auto store = get_store(wck, spec);
  const auto percep = init_perceptual(ctx.cfg.feature_seed);
  const auto train = split(ctx.cfg, "train");
  const auto r = train_encoder(spec, store.mean_weights(), percep, train, ctx.cfg.encoder_config());
  auto ck = ctx.checkpoint();
  put_params(ck, "encoder", r.encoder);
  save_checkpoint(ctx.encoder_ckpt(), ck);
  {
    CsvWriter csv(ctx.out / "encoder_loss.csv", {"iteration", "loss"});
    for (std::size_t i = 0; i < r.loss.size(); ++i) csv.row({std::to_string(i), fmt_real(r.loss[i])});
  }
  InversionModels m{spec, store, r.encoder, percep};
  const auto test = split(ctx.cfg, "test");
  double total = 0;
  for (const auto& x : test.images) {
    total += mse(synthesize(spec, store.mean_weights(), initial_code(m, x)), x.reshaped({1, 3, 32, 32}));
  }
  const double mean_mse = test.size() ? total / static_cast<double>(test.size()) : 0.0;
  auto rep = ctx.report();
  rep.set("iterations", ctx.cfg.encoder.iterations);
  if (!r.loss.empty()) rep.set("final_loss", r.loss.back());
  rep.set("test_init_mse", mean_mse);
  ctx.write_report("train-encoder", rep);
  ctx.summary(fmt::format("{} iterations, test MSE at f(E(x)) {:.4g}", ctx.cfg.encoder.iterations, mean_mse));
  return 0;
}

int cmd_invert(const Context& ctx) {
  const auto m = load_models(ctx);
  const auto s = chosen_strategy(ctx);
  const auto icfg = ctx.cfg.inversion(s);
  std::vector<Tensor<float>> images;
  std::vector<std::string> ids;
  input_images(ctx, static_cast<std::size_t>(ctx.cfg.data.n_test), images, ids);
  std::vector<InversionResult> results(images.size());
  std::vector<std::string> status(images.size(), "ok");
  parallel_for(static_cast<int>(images.size()), ctx.cfg.jobs, [&](int i) {
    const auto k = static_cast<std::size_t>(i);
    try {
      results[k] = invert(images[k], m, icfg);
    } catch (const InversionError& e) {
      status[k] = fmt::format("error: {}", e.what());
      results[k].trace = e.trace;
    }
  });
  const auto dir = ctx.out / "invert";
  fs::create_directories(dir);
  CsvWriter csv(dir / fmt::format("{}_summary.csv", to_string(s)),
                {"image_id", "mse", "perceptual", "ms_ssim", "best_iteration", "optimized_params", "status"});
  double total = 0;
  int ok = 0;
  for (std::size_t k = 0; k < images.size(); ++k) {
    const auto sub = dir / fmt::format("{}_{}", ids[k], to_string(s));
    if (status[k] == "ok") {
      write_result(sub, ctx, ids[k], results[k], images[k]);
      total += results[k].mse;
      ++ok;
      csv.row({ids[k], fmt_real(results[k].mse), fmt_real(results[k].perceptual), fmt_real(results[k].ms_ssim),
               std::to_string(results[k].best_iteration), std::to_string(results[k].optimized_params), "ok"});
    } else {
      fs::create_directories(sub);
      write_loss_trace(sub / "loss.csv", results[k].trace);
      csv.row({ids[k], "", "", "", "", "", status[k]});
      log::error(fmt::format("{}: {}", ids[k], status[k]));
    }
  }
  auto rep = ctx.report();
  rep.set("images", static_cast<double>(images.size()));
  rep.set("failures", static_cast<double>(images.size()) - ok);
  rep.set("iterations", icfg.iterations);
  rep.set("alpha_reg", icfg.alpha_reg);
  rep.set("mean_mse", ok ? total / ok : std::nan(""));
  ctx.write_report(fmt::format("invert_{}", to_string(s)), rep);
  ctx.summary(fmt::format("{} on {} images, {} failed, mean MSE {:.4g}", to_string(s), images.size(),
                          images.size() - static_cast<std::size_t>(ok), ok ? total / ok : std::nan("")));
  return ok == static_cast<int>(images.size()) ? 0 : 1;
}

int cmd_evaluate_compare(const Context& ctx) {
  const auto m = load_models(ctx);
  std::vector<Tensor<float>> images;
  std::vector<std::string> ids;
  input_images(ctx, static_cast<std::size_t>(ctx.cfg.eval.compare_images), images, ids);
  CompareOptions opt;
  if (!ctx.opt.strategy.empty()) opt.strategies = {parse_strategy(ctx.opt.strategy)};
  opt.corruption_images = ctx.cfg.eval.corruption_inversions;
  opt.jobs = ctx.cfg.jobs;
  std::vector<InversionConfig> configs;
  for (auto s : opt.strategies) configs.push_back(ctx.cfg.inversion(s));
  const auto cs = corruption_setup(ctx, m, m.store.mean_weights());
  const auto out = strategy_compare(images, ids, m, configs, cs, opt);
  write_compare_csv(ctx.out / "strategy_compare.csv", out.rows);
  write_compare_wide_csv(ctx.out / "strategy_compare_wide.csv", out.rows);
  write_timing_csv(ctx.out / "strategy_timing.csv", out.rows);
  auto rep = ctx.report();
  rep.set("images", static_cast<double>(images.size()));
  rep.set("style_scale", cs.style_scale);
  std::map<Strategy, std::vector<double>> mses;
  int failures = 0;
  for (auto s : opt.strategies) {
    double n = 0, sum[5] = {0, 0, 0, 0, 0};
    int n_corr = 0;
    for (const auto& r : out.rows) {
      if (r.strategy != s) continue;
      mses[s].push_back(r.mse);
      if (r.status != "ok") {
        ++failures;
        continue;
      }
      ++n;
      sum[0] += r.mse;
      sum[1] += r.perceptual;
      sum[2] += r.ms_ssim;
      if (!std::isnan(r.corruption_fid)) {
        sum[3] += r.corruption_fid;
        sum[4] += r.corruption_kid;
        ++n_corr;
      }
    }
    const auto name = to_string(s);
    rep.set(name + ".mean_mse", n ? sum[0] / n : std::nan(""));
    rep.set(name + ".mean_perceptual", n ? sum[1] / n : std::nan(""));
    rep.set(name + ".mean_ms_ssim", n ? sum[2] / n : std::nan(""));
    rep.set(name + ".mean_corruption_fid", n_corr ? sum[3] / n_corr : std::nan(""));
    rep.set(name + ".mean_corruption_kid", n_corr ? sum[4] / n_corr : std::nan(""));
  }
  auto sign = [&](Strategy a, Strategy b, const std::string& key) {
    if (!mses.count(a) || !mses.count(b)) return;
    const auto t = paired_sign_test(mses[a], mses[b]);
    rep.set(key + ".wins", t.n_less);
    rep.set(key + ".losses", t.n_greater);
    rep.set(key + ".p_value", t.p_value);
  };
  sign(Strategy::wrangan, Strategy::w_only, "sign_test.wrangan_below_w_only");
  sign(Strategy::simple_tune, Strategy::pti_style, "sign_test.simple_tune_below_pti_style");
  rep.set("failures", failures);
  if (out.wrangan_epsilon.size() >= 5) {
    const auto stats = epsilon_statistics(m.store, out.wrangan_epsilon);
    write_epsilon_csv(ctx.out / "epsilon_stats.csv", stats);
    for (const auto& e : stats) rep.set(e.layer + ".epsilon_variance", e.variance);
  }
  ctx.write_report("evaluate_strategy-compare", rep);
  std::string means;
  for (auto s : opt.strategies) means += fmt::format(" {} {:.4g}", to_string(s), rep.get(to_string(s) + ".mean_mse"));
  ctx.summary(fmt::format("{} images x {} strategies, mean MSE:{}", images.size(), opt.strategies.size(), means));
  return 0;
}

int cmd_evaluate_generation(const Context& ctx) {
  const auto m = load_models(ctx);
  auto rep = ctx.report();
  const auto ref = split(ctx.cfg, "reference");
  const auto real = image_features(m.percep, ref.images);
  auto measure = [&](const std::string& name, const ParamMap<float>& weights) {
    auto cs = corruption_setup(ctx, m, weights);
    const auto d = generation_fid(cs, weights);
    Rng zr(ctx.cfg.seed, "generation/z");
    std::vector<Tensor<float>> imgs;
    const int n = ctx.cfg.eval.corruption_images;
    for (int start = 0; start < n; start += 32) {
      const int b = std::min(32, n - start);
      const auto batch = synthesize(m.spec, weights, map_latent(m.spec, weights, zr.normal_tensor<float>({b, m.spec.z_dim})));
      for (int i = 0; i < b; ++i) imgs.push_back(batch_item(batch, i).reshaped({3, 32, 32}));
    }
    const auto pr = precision_recall(real, image_features(m.percep, imgs), ctx.cfg.eval.precision_k);
    rep.set(name + ".fid", d.fid);
    rep.set(name + ".kid", d.kid);
    rep.set(name + ".precision", pr.precision);
    rep.set(name + ".recall", pr.recall);
    return d.fid;
  };
  std::string text;
  if (fs::exists(ctx.base_ckpt())) {
    const auto base = get_params(load_checkpoint(ctx.base_ckpt()), "generator");
    text += fmt::format("base FID {:.4g}, ", measure("base", base));
  }
  text += fmt::format("wrangan mean-weight FID {:.4g}", measure("wrangan_mean", m.store.mean_weights()));
  ctx.write_report("evaluate_generation", rep);
  ctx.summary(text);
  return 0;
}

int cmd_grid(const Context& ctx) {
  const auto m = load_models(ctx);
  const auto test = split(ctx.cfg, "test");
  std::vector<Tensor<float>> images(test.images.begin(),
                                    test.images.begin() + std::min<std::ptrdiff_t>(ctx.cfg.eval.grid_images,
                                                                                   static_cast<std::ptrdiff_t>(test.size())));
  auto base = ctx.cfg.inversion(Strategy::simple_tune);
  base.iterations = ctx.cfg.eval.grid_iterations;
  const auto rows = layer_grid(images, m, ctx.cfg.eval.grid_n, ctx.cfg.eval.grid_alpha, base, ctx.cfg.jobs);
  write_grid_csv(ctx.out / "layer_grid.csv", rows);
  auto rep = ctx.report();
  for (const auto& r : rows) rep.set(fmt::format("N{}.alpha{}.mean_mse", r.n_randomized, fmt_real(r.alpha)), r.mean_mse);
  ctx.write_report("grid", rep);
  ctx.summary(fmt::format("{} cells over {} images", rows.size(), images.size()));
  return 0;
}

int cmd_analyze(const Context& ctx) {
  const auto wck = require_checkpoint(ctx.wrangan_ckpt(), "train-wrangan");
  const auto store = get_store(wck, store_spec(ctx, wck));
  const auto layers = variance_histogram(store);
  write_variance_csv(ctx.out / "variance_hist.csv", ctx.out / "variance_summary.csv", layers);
  const auto infl = layer_influence(store, ctx.cfg.eval.influence_samples, ctx.cfg.seed);
  write_influence_csv(ctx.out / "layer_influence.csv", infl);
  auto rep = ctx.report();
  layer_fraction_small(store, rep);
  for (const auto& r : infl) rep.set(r.layer + ".influence_mse", r.mse);
  ctx.write_report("analyze", rep);
  ctx.summary(fmt::format("{} randomized layers analyzed", layers.size()));
  return 0;
}

std::vector<Tensor<float>> encoder_codes(const InversionModels& m, const std::vector<Tensor<float>>& images) {
  std::vector<Tensor<float>> codes;
  for (const auto& x : images) codes.push_back(initial_code(m, x));
  return codes;
}

int cmd_edit(const Context& ctx) {
  const auto m = load_models(ctx);
  const auto train = split(ctx.cfg, "train");
  if (train.labels.empty()) throw PreconditionError("edit needs attribute labels; the dataset has none");
  const std::size_t n_codes = std::min(train.size(), static_cast<std::size_t>(ctx.cfg.latent.n_codes));
  const std::vector<Tensor<float>> fit_images(train.images.begin(), train.images.begin() + static_cast<std::ptrdiff_t>(n_codes));
  auto labels = train.attribute(ctx.cfg.latent.attribute);
  labels.resize(n_codes);
  const auto codes = encoder_codes(m, fit_images);
  const auto fit = fit_hyperplane(codes, labels);
  const auto pca = pca_directions(codes, ctx.cfg.latent.pca_k);

  auto ck = ctx.checkpoint();
  Tensor<float> normal({m.spec.w_dim});
  for (int k = 0; k < m.spec.w_dim; ++k) normal[k] = static_cast<float>(fit.plane.normal[static_cast<std::size_t>(k)]);
  ck.tensors.emplace("attribute/" + ctx.cfg.latent.attribute, normal);
  ck.attributes["attribute_offset"] = fmt_real(fit.plane.offset);
  for (std::size_t i = 0; i < pca.directions.size(); ++i) {
    Tensor<float> d({m.spec.w_dim});
    for (int k = 0; k < m.spec.w_dim; ++k) d[k] = static_cast<float>(pca.directions[i][static_cast<std::size_t>(k)]);
    ck.tensors.emplace(fmt::format("pca/{}", i), d);
    ck.attributes[fmt::format("pca_variance_{}", i)] = fmt_real(pca.explained_variance[i]);
  }
  save_checkpoint(ctx.out / "directions.ckpt", ck);

  const auto test = split(ctx.cfg, "test");
  const auto test_codes = encoder_codes(m, test.images);
  const double sep = class_center_separation(fit.plane, test_codes, test.attribute(ctx.cfg.latent.attribute));
  auto rep = ctx.report();
  rep.set("held_out_accuracy", fit.held_out_accuracy);
  rep.set("train_accuracy", fit.train_accuracy);
  rep.set("fit_steps", fit.steps);
  rep.set("class_center_separation", sep);
  for (int k = 1; k <= 5; ++k) rep.set(fmt::format("flip_rate.step_{}x", k), edit_flip_rate(fit.plane, test_codes, k * sep));
  rep.set("round_trip_flip_rate.step_5x", round_trip_flip_rate(m, fit.plane, test_codes, 5 * sep));

  std::vector<Tensor<float>> images;
  std::vector<std::string> ids;
  input_images(ctx, 1, images, ids);
  const auto s = chosen_strategy(ctx);
  const auto r = invert(images[0], m, ctx.cfg.inversion(s));
  const auto dir = ctx.out / "edit" / fmt::format("{}_{}", ids[0], to_string(s));
  fs::create_directories(dir);
  const double step = ctx.cfg.latent.edit_step * sep;
  auto save = [&](const std::string& name, const Tensor<float>& img) {
    save_image(dir / (name + ".png"), batch_item(img, 0).reshaped({3, 32, 32}));
  };
  save("reconstruction", r.image);
  save("attribute_minus", edit(m.spec, r, fit.plane.normal, -step));
  save("attribute_plus", edit(m.spec, r, fit.plane.normal, step));
  for (std::size_t i = 0; i < pca.directions.size(); ++i) {
    save(fmt::format("pca{}_minus", i), edit(m.spec, r, pca.directions[i], -step));
    save(fmt::format("pca{}_plus", i), edit(m.spec, r, pca.directions[i], step));
  }
  rep.set("edit_step", step);
  ctx.write_report("edit", rep);
  ctx.summary(fmt::format("attribute '{}' held-out accuracy {:.3f}, flip rate at 5x separation {:.3f}",
                          ctx.cfg.latent.attribute, fit.held_out_accuracy, rep.get("flip_rate.step_5x")));
  return 0;
}

int cmd_interpolate(const Context& ctx) {
  const auto m = load_models(ctx);
  std::vector<Tensor<float>> images;
  std::vector<std::string> ids;
  input_images(ctx, 2, images, ids);
  if (images.size() != 2) throw PreconditionError(fmt::format("interpolate needs exactly two images, got {}", images.size()));
  const auto s = chosen_strategy(ctx);
  const auto cfg = ctx.cfg.inversion(s);
  const auto a = invert(images[0], m, cfg);
  const auto b = invert(images[1], m, cfg);
  const auto& alphas = ctx.cfg.latent.interpolation_alphas;
  const auto frames = interpolate(m.store, a, b, alphas);
  const auto dir = ctx.out / "interpolate" / fmt::format("{}__{}_{}", ids[0], ids[1], to_string(s));
  fs::create_directories(dir);
  CsvWriter csv(dir / "interpolation.csv", {"alpha", "mse_to_a", "mse_to_b"});
  for (std::size_t i = 0; i < frames.size(); ++i) {
    save_image(dir / fmt::format("alpha_{}.png", i), batch_item(frames[i], 0).reshaped({3, 32, 32}));
    csv.row({fmt_real(alphas[i]), fmt_real(mse(frames[i], a.image)), fmt_real(mse(frames[i], b.image))});
  }
  auto rep = ctx.report();
  rep.set("frames", static_cast<double>(frames.size()));
  rep.set("mse_a", a.mse);
  rep.set("mse_b", b.mse);
  ctx.write_report("interpolate", rep);
  ctx.summary(fmt::format("{} frames between {} and {}", frames.size(), ids[0], ids[1]));
  return 0;
}

void apply_overrides(Context& ctx) {
  auto& c = ctx.cfg;
  const auto& o = ctx.opt;
  if (o.has_seed) c.seed = o.seed;
  if (o.has_jobs) c.jobs = o.jobs;
  if (!o.strategy.empty()) {
    parse_strategy(o.strategy);
    c.invert.strategy = o.strategy;
  }
  if (o.has_n) {
    if (o.command == "grid") {
      c.eval.grid_n = {o.n_randomized};
    } else {
      c.model.n_randomized = o.n_randomized;
    }
  }
  if (o.has_alpha) {
    if (o.command == "grid") {
      c.eval.grid_alpha = {o.alpha};
    } else {
      switch (parse_strategy(c.invert.strategy)) {
        case Strategy::simple_tune: c.invert.alpha_simple = o.alpha; break;
        case Strategy::pti_style: c.invert.alpha_pti = o.alpha; break;
        case Strategy::wrangan: c.invert.alpha_wrangan = o.alpha; break;
        default: throw PreconditionError(fmt::format("--alpha has no effect on strategy {}", c.invert.strategy));
      }
    }
  }
  if (o.has_iterations) {
    if (o.command == "pretrain") {
      c.pretrain.iterations = o.iterations;
    } else if (o.command == "train-wrangan") {
      c.wrangan.iterations = o.iterations;
    } else if (o.command == "train-encoder") {
      c.encoder.iterations = o.iterations;
    } else if (o.command == "grid") {
      c.eval.grid_iterations = o.iterations;
    } else {
      c.invert.iterations = o.iterations;
    }
  }
  c.validate();
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"WRanGAN desk-scale pipeline: training, inversion and evaluation"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  struct Flags {
    bool iterations = false, strategy = false, alpha = false, image = false, n_randomized = false, protocol = false;
  };
  auto add = [&](const std::string& name, const std::string& description, Flags f) {
    auto* s = app.add_subcommand(name, description);
    s->add_option("--config", o.config, "Config file (sectioned key = value); built-in defaults when omitted");
    s->add_option("--out", o.out, "Output directory for checkpoints and reports")->required();
    s->add_option("--seed", o.seed, "Run seed; overrides run.seed");
    s->add_option("--jobs", o.jobs, "Worker threads; overrides run.jobs (results do not depend on it)")
        ->check(CLI::PositiveNumber);
    if (f.iterations) s->add_option("--iterations", o.iterations, "Iteration count; overrides the config")->check(CLI::NonNegativeNumber);
    if (f.strategy) {
      s->add_option("--strategy", o.strategy, "w_only, w_plus, simple_tune, pti_style or wrangan; overrides invert.strategy")
          ->check(CLI::IsMember({"w_only", "w_plus", "simple_tune", "pti_style", "wrangan"}));
    }
    if (f.alpha) s->add_option("--alpha", o.alpha, "Regularization coefficient; overrides the config")->check(CLI::NonNegativeNumber);
    if (f.image) s->add_option("--image", o.images, "Input image (PNG/PPM); repeatable; default: test split");
    if (f.n_randomized) s->add_option("--n-randomized", o.n_randomized, "Randomized conv layers N; overrides the config");
    if (f.protocol) {
      s->add_option("--protocol", o.protocol, "strategy-compare or generation")
          ->capture_default_str()
          ->check(CLI::IsMember({"strategy-compare", "generation"}));
    }
    return s;
  };
  add("gen-data", "Export the train/test/reference splits with labels.csv", {});
  add("pretrain", "Train the deterministic base GAN", {.iterations = true});
  add("train-wrangan", "Train the randomized-weight GAN from the base checkpoint", {.iterations = true, .n_randomized = true});
  add("train-encoder", "Train the encoder against the mean weights", {.iterations = true});
  add("invert", "Invert images with one strategy", {.iterations = true, .strategy = true, .alpha = true, .image = true});
  add("evaluate", "Run an evaluation protocol", {.iterations = true, .strategy = true, .image = true, .protocol = true});
  add("grid", "Simple-tune reconstruction over (N, alpha)", {.iterations = true, .alpha = true, .n_randomized = true});
  add("analyze", "Variance histogram and layer influence of the trained store", {});
  add("edit", "Fit attribute hyperplane and PCA directions, edit an inverted image",
      {.iterations = true, .strategy = true, .image = true});
  add("interpolate", "Interpolate between two inverted images", {.iterations = true, .strategy = true, .image = true});

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }
  const auto* sub = app.get_subcommands().front();
  o.command = sub->get_name();
  auto given = [&](const char* flag) {
    try {
      return sub->get_option(flag)->count() > 0;
    } catch (const CLI::OptionNotFound&) {
      return false;
    }
  };
  o.has_seed = given("--seed");
  o.has_jobs = given("--jobs");
  o.has_n = given("--n-randomized");
  o.has_alpha = given("--alpha");
  o.has_iterations = given("--iterations");

  try {
    Context ctx;
    ctx.opt = o;
    ctx.cfg = o.config.empty() ? RunConfig{} : RunConfig::load(o.config);
    apply_overrides(ctx);
    ctx.out = o.out;
    ctx.stdout_ = &out;
    fs::create_directories(ctx.out);
    auto label = o.command;
    if (o.command == "evaluate") label += "_" + o.protocol;
    if (o.command == "invert") label += "_" + ctx.cfg.invert.strategy;
    write_text(ctx.out / (label + ".config"), ctx.cfg.canonical_text());
    if (o.command == "gen-data") return cmd_gen_data(ctx);
    if (o.command == "pretrain") return cmd_pretrain(ctx);
    if (o.command == "train-wrangan") return cmd_train_wrangan(ctx);
    if (o.command == "train-encoder") return cmd_train_encoder(ctx);
    if (o.command == "invert") return cmd_invert(ctx);
    if (o.command == "evaluate") return o.protocol == "generation" ? cmd_evaluate_generation(ctx) : cmd_evaluate_compare(ctx);
    if (o.command == "grid") return cmd_grid(ctx);
    if (o.command == "analyze") return cmd_analyze(ctx);
    if (o.command == "edit") return cmd_edit(ctx);
    if (o.command == "interpolate") return cmd_interpolate(ctx);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << std::endl;
    return 1;
  }
  return 2;
}

}  // namespace wrangan::cli
