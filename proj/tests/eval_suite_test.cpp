#include <gtest/gtest.h>

#include <atomic>
#include <cmath>

#include "test_support.hpp"
#include "wrangan/eval_suite.hpp"
#include "wrangan/training.hpp"

using namespace wrangan;
using wrangan::testing::temp_dir;

namespace {

const InversionModels& models() {
  static const InversionModels m = [] {
    InversionModels m;
    m.store = RandomizedParamStore::from_generator(m.spec, initial_generator(m.spec, 1));
    Rng rng(2, "test-sigma");
    for (auto& e : m.store.entries()) {
      for (auto& v : e.log_sigma.data()) v = static_cast<float>(rng.uniform(-4.0, -1.0));
    }
    Rng er(3, "init/encoder");
    m.encoder = init_encoder(m.spec, er);
    m.percep = init_perceptual(1234);
    return m;
  }();
  return m;
}

const Dataset& reals() {
  static const Dataset d = [] {
    SyntheticSpec s;
    s.n_images = 120;
    s.stream = "reference";
    return generate_synthetic(s);
  }();
  return d;
}

CorruptionSetup setup(int n_images = 80, double shift = 1.0) {
  CorruptionSetup s;
  s.spec = models().spec;
  s.base_weights = models().store.mean_weights();
  s.percep = models().percep;
  s.reference = image_features(s.percep, reals().images);
  s.style_scale = characteristic_style_scale(s.spec, s.base_weights, 500, 1);
  s.n_images = n_images;
  s.shift_scale = shift;
  s.seed = 9;
  return s;
}

std::vector<InversionConfig> configs(int iterations) {
  std::vector<InversionConfig> out;
  for (auto s : kAllStrategies) {
    InversionConfig c;
    c.strategy = s;
    c.iterations = iterations;
    c.pivot_iterations = 2;
    out.push_back(c);
  }
  return out;
}

}  // namespace

TEST(ParallelFor, EachIndexOnceAndErrorsPropagate) {
  std::vector<std::atomic<int>> hits(50);
  parallel_for(50, 4, [&](int i) { ++hits[static_cast<std::size_t>(i)]; });
  for (auto& h : hits) EXPECT_EQ(h.load(), 1);
  EXPECT_THROW(parallel_for(10, 3, [](int i) { if (i == 7) throw std::runtime_error("x"); }), std::runtime_error);
  parallel_for(0, 4, [](int) { FAIL(); });
}

TEST(StyleScale, MatchesDirectStandardDeviation) {
  const auto& spec = models().spec;
  const auto mapping = models().store.mean_weights();
  const double got = characteristic_style_scale(spec, mapping, 300, 4);
  // same draws, one sample at a time
  std::vector<std::vector<long double>> cols(static_cast<std::size_t>(spec.w_dim));
  Rng r1(4, "style-scale");
  const auto za = r1.normal_tensor<float>({256, spec.z_dim});
  const auto zb = r1.normal_tensor<float>({44, spec.z_dim});
  for (const auto* z : {&za, &zb}) {
    for (std::int64_t i = 0; i < z->shape()[0]; ++i) {
      Tensor<float> row({1, spec.z_dim});
      for (int k = 0; k < spec.z_dim; ++k) row[k] = (*z)[i * spec.z_dim + k];
      const auto w = map_latent(spec, mapping, row);
      for (int k = 0; k < spec.w_dim; ++k) cols[static_cast<std::size_t>(k)].push_back(w[k]);
    }
  }
  long double total = 0;
  for (const auto& c : cols) {
    long double m = 0;
    for (auto v : c) m += v;
    m /= c.size();
    long double ss = 0;
    for (auto v : c) ss += (v - m) * (v - m);
    total += std::sqrt(ss / (c.size() - 1));
  }
  EXPECT_NEAR(got, static_cast<double>(total / spec.w_dim), 1e-6);
  EXPECT_GT(got, 0.0);
}

TEST(StyleScale, ConstantMappingIsZero) {
  auto mapping = models().store.mean_weights();
  for (auto& [name, t] : mapping) {
    if (name.rfind("map.", 0) == 0 && name.find("weight") != std::string::npos) t = Tensor<float>(t.shape());
  }
  EXPECT_NEAR(characteristic_style_scale(models().spec, mapping, 100, 1), 0.0, 1e-12);
}

TEST(Corruption, ZeroShiftBaseWeightsIsPlainGenerationFid) {
  const auto s = setup(80, 0.0);
  const auto got = corruption_fid(s, s.base_weights);
  // plain generation: f(z) for the same z draws, no shift
  Rng zr(s.seed, "corruption/z");
  const auto z = zr.normal_tensor<float>({80, s.spec.z_dim});
  std::vector<Tensor<float>> imgs;
  const auto batch = synthesize(s.spec, s.base_weights, map_latent(s.spec, s.base_weights, z));
  for (int i = 0; i < 80; ++i) imgs.push_back(batch_item(batch, i).reshaped({3, 32, 32}));
  const auto feats = image_features(s.percep, imgs);
  EXPECT_NEAR(got.fid, frechet_distance(s.reference, feats), 1e-6);
  EXPECT_NEAR(got.kid, kernel_distance(s.reference, feats), 1e-6);
  const auto plain = generation_fid(setup(80, 2.0), s.base_weights);
  EXPECT_EQ(plain.fid, got.fid);
}

TEST(Corruption, PairedDrawsAndShiftMatters) {
  const auto s = setup(80, 3.0);
  const auto a = corruption_fid(s, s.base_weights);
  const auto b = corruption_fid(s, s.base_weights);
  EXPECT_EQ(a.fid, b.fid);
  EXPECT_NE(a.fid, generation_fid(s, s.base_weights).fid);
  EXPECT_GE(a.fid, 0.0);
}

TEST(Corruption, TooFewImagesRejected) {
  const auto s = setup(64);
  EXPECT_THROW(corruption_fid(s, s.base_weights), std::invalid_argument);
}

TEST(StrategyCompare, RowsFlagsAndDeterminism) {
  SyntheticSpec ts;
  ts.n_images = 2;
  ts.stream = "test";
  auto data = generate_synthetic(ts);
  data.images.push_back(data.images[0]);
  data.images.back()[3] = std::nanf("");
  data.ids.push_back("broken");
  CompareOptions opt;
  opt.corruption_images = 1;
  const auto s = setup(70);
  const auto out = strategy_compare(data.images, data.ids, models(), configs(3), s, opt);
  ASSERT_EQ(out.rows.size(), 15u);
  for (std::size_t i = 0; i < 15; ++i) {
    EXPECT_EQ(out.rows[i].strategy, kAllStrategies[i % 5]);
    EXPECT_EQ(out.rows[i].image_id, data.ids[i / 5]);
  }
  for (std::size_t i = 0; i < 5; ++i) EXPECT_FALSE(std::isnan(out.rows[i].corruption_fid)) << i;
  for (std::size_t i = 5; i < 10; ++i) EXPECT_TRUE(std::isnan(out.rows[i].corruption_fid)) << i;
  EXPECT_EQ(out.rows[0].corruption_fid, out.rows[1].corruption_fid);  // latent-only share the mean weights
  for (std::size_t i = 10; i < 15; ++i) EXPECT_EQ(out.rows[i].status.rfind("error:", 0), 0u) << out.rows[i].status;
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(out.rows[i].status, "ok");
  EXPECT_EQ(out.wrangan_epsilon.size(), 2u);

  // direct inversion oracle for one row
  auto c = configs(3)[2];
  EXPECT_EQ(out.rows[7].mse, invert(data.images[1], models(), c).mse);

  opt.jobs = 3;
  const auto par = strategy_compare(data.images, data.ids, models(), configs(3), s, opt);
  const auto dir = temp_dir("compare");
  write_compare_csv(dir / "a.csv", out.rows);
  write_compare_csv(dir / "b.csv", par.rows);
  EXPECT_EQ(read_text(dir / "a.csv"), read_text(dir / "b.csv"));
  const auto text = read_text(dir / "a.csv");
  EXPECT_EQ(text.substr(0, text.find('\n')),
            "image_id,strategy,mse,perceptual,ms_ssim,corruption_fid,corruption_kid,optimized_params,best_iteration,"
            "status");
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 16);
  write_compare_wide_csv(dir / "w.csv", out.rows);
  const auto wide = read_text(dir / "w.csv");
  EXPECT_EQ(wide.substr(0, wide.find('\n')), "image_id,mse_w_only,mse_w_plus,mse_simple_tune,mse_pti_style,mse_wrangan");
  EXPECT_EQ(std::count(wide.begin(), wide.end(), '\n'), 4);
}

TEST(LayerGrid, RowsMatchDirectInversions) {
  SyntheticSpec ts;
  ts.n_images = 2;
  ts.stream = "test";
  const auto data = generate_synthetic(ts);
  InversionConfig base;
  base.iterations = 3;
  const auto rows = layer_grid(data.images, models(), {1, 3}, {0.0, 1e-2}, base);
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0].n_randomized, 1);
  EXPECT_EQ(rows[1].alpha, 1e-2);
  EXPECT_EQ(rows[2].n_randomized, 3);

  InversionModels m = models();
  m.spec.n_randomized = 3;
  m.store = RandomizedParamStore::from_generator(m.spec, models().store.mean_weights());
  auto c = base;
  c.strategy = Strategy::simple_tune;
  c.alpha_reg = 1e-2;
  const double oracle = (invert(data.images[0], m, c).mse + invert(data.images[1], m, c).mse) / 2;
  EXPECT_DOUBLE_EQ(rows[3].mean_mse, oracle);
  EXPECT_EQ(rows[3].randomized_params, count_params(m.store).randomized);
  EXPECT_DOUBLE_EQ(rows[3].relative_increase, count_params(m.store).relative_increase);
  EXPECT_LT(rows[0].randomized_params, rows[2].randomized_params);

  EXPECT_THROW(layer_grid(data.images, models(), {0}, {0.0}, base), std::invalid_argument);
  EXPECT_THROW(layer_grid(data.images, models(), {9}, {0.0}, base), std::invalid_argument);
  EXPECT_THROW(layer_grid(data.images, models(), {1}, {-1.0}, base), std::invalid_argument);
  const auto dir = temp_dir("grid");
  write_grid_csv(dir / "g.csv", rows);
  const auto text = read_text(dir / "g.csv");
  EXPECT_EQ(text.substr(0, text.find('\n')), "n_randomized,alpha,mean_mse,images,randomized_params,relative_memory_increase");
}

TEST(VarianceHistogram, CountsAndSmallFraction) {
  auto store = models().store;
  // conv3: every sigma 2e-4; conv4: half 2e-4, half 1
  for (auto& e : store.entries()) {
    auto ls = e.log_sigma.data();
    for (std::size_t i = 0; i < ls.size(); ++i) {
      if (layer_of(e.name) == "syn.conv3") {
        ls[i] = std::log(2e-4f);
      } else if (layer_of(e.name) == "syn.conv4") {
        ls[i] = i % 2 == 0 ? std::log(2e-4f) : 0.0f;
      } else {
        ls[i] = 0.0f;
      }
    }
  }
  const auto layers = variance_histogram(store);
  ASSERT_EQ(layers.size(), 6u);
  EXPECT_EQ(layers[0].layer, "syn.conv3");
  EXPECT_DOUBLE_EQ(layers[0].frac_small, 1.0);
  EXPECT_NEAR(layers[1].frac_small, 0.5, 1e-3);
  EXPECT_DOUBLE_EQ(layers[5].frac_small, 0.0);
  for (const auto& l : layers) {
    std::int64_t total = 0;
    for (auto c : l.counts) total += c;
    EXPECT_EQ(total, l.n_params);
  }
  // log10(2e-4) falls in [-4, -3.5)
  const auto& l0 = layers[0];
  for (std::size_t b = 0; b < l0.counts.size(); ++b) {
    EXPECT_EQ(l0.counts[b], std::abs(l0.bin_edges[b] + 4.0) < 1e-9 ? l0.n_params : 0) << b;
  }
  EXPECT_NEAR(layers[5].mean_sigma, 1.0, 1e-12);
  const auto dir = temp_dir("var");
  write_variance_csv(dir / "h.csv", dir / "s.csv", layers);
  const auto summary = read_text(dir / "s.csv");
  EXPECT_EQ(std::count(summary.begin(), summary.end(), '\n'), 7);
}

TEST(LayerInfluence, MatchesBruteForce) {
  const auto& store = models().store;
  const auto rows = layer_influence(store, 5, 11);
  ASSERT_EQ(rows.size(), store.layer_names().size());
  const auto mean = store.mean_weights();
  for (const auto& row : rows) {
    Rng rng(11, "influence/" + row.layer);
    double sum = 0;
    for (int k = 0; k < 5; ++k) {
      const auto z = rng.normal_tensor<float>({1, store.spec().z_dim});
      auto eps = make_epsilon(store, 0.0f);
      for (const auto& e : store.entries()) {
        if (layer_of(e.name) == row.layer) eps.at(e.name) = rng.normal_tensor<float>(e.mu.shape());
      }
      const auto w = map_latent(store.spec(), mean, z);
      const auto a = synthesize(store.spec(), realize_weights(store, eps), w);
      const auto b = synthesize(store.spec(), mean, w);
      long double ss = 0;
      for (std::int64_t i = 0; i < a.size(); ++i) ss += (static_cast<long double>(a[i]) - b[i]) * (a[i] - b[i]);
      sum += static_cast<double>(ss / a.size());
    }
    EXPECT_NEAR(row.mse, sum / 5, 1e-6 + 1e-5 * sum / 5) << row.layer;
    EXPECT_GT(row.mse, 0.0);
  }
}

TEST(LayerInfluence, VanishingSigmaHasNoInfluence) {
  auto store = models().store;
  for (auto& e : store.entries())
    for (auto& v : e.log_sigma.data()) v = -40.0f;
  for (const auto& r : layer_influence(store, 2, 1)) EXPECT_LT(r.mse, 1e-20) << r.layer;
}

TEST(EpsilonStatistics, ConstantInitHasZeroVariance) {
  const auto& store = models().store;
  std::vector<EpsilonVector> res(5, make_epsilon(store, 1e-4f));
  const auto stats = epsilon_statistics(store, res);
  ASSERT_EQ(stats.size(), 6u);
  for (const auto& s : stats) {
    EXPECT_NEAR(s.mean, 1e-4, 1e-10);
    EXPECT_NEAR(s.variance, 0.0, 1e-14);
  }
  res.pop_back();
  EXPECT_THROW(epsilon_statistics(store, res), std::invalid_argument);
}

TEST(EpsilonStatistics, PriorSamplesHaveUnitRatio) {
  const auto& store = models().store;
  Rng rng(3, "eps");
  std::vector<EpsilonVector> res;
  for (int i = 0; i < 5; ++i) res.push_back(sample_epsilon(store, rng));
  for (const auto& s : epsilon_statistics(store, res)) {
    EXPECT_NEAR(s.variance_ratio, 1.0, 0.05) << s.layer;
    EXPECT_NEAR(s.mean, 0.0, 0.03);
  }
}

TEST(SignTest, ExactBinomialTail) {
  std::vector<double> a(10, 0.0), b(10, 1.0);
  auto t = paired_sign_test(a, b);
  EXPECT_EQ(t.n_less, 10);
  EXPECT_NEAR(t.p_value, 1.0 / 1024, 1e-12);
  a[0] = 2.0;
  a[1] = 2.0;
  a[2] = 1.0;  // tie, dropped
  t = paired_sign_test(a, b);
  EXPECT_EQ(t.n_less, 7);
  EXPECT_EQ(t.n_greater, 2);
  EXPECT_EQ(t.ties, 1);
  EXPECT_NEAR(t.p_value, (36.0 + 9 + 1) / 512, 1e-12);
  EXPECT_THROW(paired_sign_test({1.0}, {}), std::invalid_argument);
}
