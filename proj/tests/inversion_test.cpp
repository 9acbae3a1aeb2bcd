#include <gtest/gtest.h>

#include <cmath>

#include "test_support.hpp"
#include "wrangan/data_io.hpp"
#include "wrangan/inversion.hpp"
#include "wrangan/metrics.hpp"
#include "wrangan/training.hpp"

using namespace wrangan;

namespace {

const InversionModels& models() {
  static const InversionModels m = [] {
    InversionModels m;
    const auto g = initial_generator(m.spec, 1);
    m.store = RandomizedParamStore::from_generator(m.spec, g);
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

const Dataset& targets() {
  static const Dataset d = [] {
    SyntheticSpec s;
    s.n_images = 4;
    s.stream = "test";
    return generate_synthetic(s);
  }();
  return d;
}

InversionConfig cfg(Strategy s, int iterations, double alpha = -1) {
  InversionConfig c;
  c.strategy = s;
  c.iterations = iterations;
  if (alpha >= 0) {
    c.alpha_reg = alpha;
  } else {
    c.alpha_reg = s == Strategy::simple_tune ? 1e-6 : s == Strategy::pti_style ? 1e-2 : 1e-4;
  }
  return c;
}

}  // namespace

TEST(Inversion, TraceLengthAndBestNotWorseThanInitial) {
  for (auto s : kAllStrategies) {
    const auto r = invert(targets().images[0], models(), cfg(s, 6));
    ASSERT_EQ(r.trace.size(), 6u) << to_string(s);
    for (int i = 0; i < 6; ++i) EXPECT_EQ(r.trace[static_cast<std::size_t>(i)].iteration, i);
    double best = r.trace[0].total;
    for (const auto& p : r.trace) best = std::min(best, p.total);
    EXPECT_LE(best, r.trace[0].total);
    EXPECT_EQ(r.trace[static_cast<std::size_t>(r.best_iteration)].total, best) << to_string(s);
    EXPECT_EQ(r.strategy, s);
  }
}

TEST(Inversion, LossDecreasesOverIterations) {
  for (auto s : kAllStrategies) {
    const auto r = invert(targets().images[1], models(), cfg(s, 30));
    EXPECT_LT(r.trace[static_cast<std::size_t>(r.best_iteration)].total, r.trace[0].total) << to_string(s);
  }
}

TEST(Inversion, ZeroIterationsIsEncoderInit) {
  const auto& x = targets().images[2];
  const auto r = invert(x, models(), cfg(Strategy::w_only, 0));
  EXPECT_TRUE(r.trace.empty());
  EXPECT_EQ(r.best_iteration, -1);
  const auto w = initial_code(models(), x);
  const auto img = synthesize(models().spec, models().store.mean_weights(), w);
  EXPECT_EQ(r.w[0], w);
  EXPECT_NEAR(r.mse, mse(img, x.reshaped({1, 3, 32, 32})), 1e-7);
  const auto rp = invert(x, models(), cfg(Strategy::w_plus, 0));
  EXPECT_NEAR(rp.mse, r.mse, 1e-7);
}

TEST(Inversion, LongerRunsNeverWorse) {
  for (auto s : kAllStrategies) {
    auto c = cfg(s, 8);
    c.pivot_iterations = 4;
    const auto a = invert(targets().images[0], models(), c);
    c.iterations = 16;
    const auto b = invert(targets().images[0], models(), c);
    for (std::size_t i = 0; i < a.trace.size(); ++i) EXPECT_EQ(a.trace[i].total, b.trace[i].total) << to_string(s);
    EXPECT_LE(b.trace[static_cast<std::size_t>(b.best_iteration)].total,
              a.trace[static_cast<std::size_t>(a.best_iteration)].total);
  }
}

TEST(Inversion, StoreNeverMutated) {
  const auto before = models().store.fingerprint();
  invert(targets().images[0], models(), cfg(Strategy::wrangan, 4));
  EXPECT_EQ(models().store.fingerprint(), before);
}

TEST(Inversion, ReportedMseMatchesRecomputation) {
  for (auto s : kAllStrategies) {
    const auto r = invert(targets().images[3], models(), cfg(s, 5));
    const auto img = render(models().spec, r);
    EXPECT_NEAR(r.mse, mse(img, targets().images[3].reshaped({1, 3, 32, 32})), 1e-7) << to_string(s);
    EXPECT_NEAR(r.mse, mse(r.image, targets().images[3].reshaped({1, 3, 32, 32})), 1e-12);
  }
}

TEST(Inversion, OptimizedParameterCounts) {
  const auto& x = targets().images[0];
  EXPECT_EQ(invert(x, models(), cfg(Strategy::w_only, 1)).optimized_params, 32);
  EXPECT_EQ(invert(x, models(), cfg(Strategy::w_plus, 1)).optimized_params, 8 * 32);
  EXPECT_EQ(invert(x, models(), cfg(Strategy::wrangan, 1)).optimized_params,
            32 + count_params(models().store).randomized);
  EXPECT_EQ(invert(x, models(), cfg(Strategy::simple_tune, 1)).optimized_params, 32 + 126944);
  EXPECT_EQ(invert(x, models(), cfg(Strategy::pti_style, 2)).optimized_params, 293024 + 48 + 3);
}

TEST(Inversion, ZeroEpsInitGivesZeroRegularizerGradient) {
  auto c = cfg(Strategy::wrangan, 1);
  c.eps_init = 0;
  const auto r = invert(targets().images[0], models(), c);
  EXPECT_EQ(r.trace[0].reg, 0.0);
  Tape<float> t;
  VarMap<float> eps;
  for (const auto& e : models().store.entries()) eps.emplace(e.name, t.leaf(Tensor<float>(e.mu.shape())));
  const auto g = t.backward(epsilon_regularizer(eps, 1e-4f));
  for (const auto& [name, v] : eps) {
    for (float x : g[v].data()) ASSERT_EQ(x, 0.0f);
  }
}

TEST(Inversion, PivotOnlyPtiEqualsLatent) {
  auto c = cfg(Strategy::pti_style, 7, 0.0);
  c.pivot_iterations = 7;
  const auto p = invert(targets().images[1], models(), c);
  const auto w = invert(targets().images[1], models(), cfg(Strategy::w_only, 7));
  ASSERT_EQ(p.trace.size(), w.trace.size());
  for (std::size_t i = 0; i < p.trace.size(); ++i) EXPECT_EQ(p.trace[i].total, w.trace[i].total);
  EXPECT_EQ(p.w[0], w.w[0]);
  EXPECT_EQ(p.mse, w.mse);
  for (const auto& [name, d] : p.epsilon) {
    for (float v : d.data()) ASSERT_EQ(v, 0.0f);
  }
}

TEST(Inversion, PtiStageTwoFreezesLatent) {
  auto c = cfg(Strategy::pti_style, 10);
  c.pivot_iterations = 4;
  const auto r = invert(targets().images[1], models(), c);
  auto c1 = cfg(Strategy::w_only, 4);
  const auto pivot = invert(targets().images[1], models(), c1);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(r.trace[static_cast<std::size_t>(i)].total, pivot.trace[static_cast<std::size_t>(i)].total);
  EXPECT_EQ(r.trace[4].reg, 0.0);  // theta starts at theta_0
  EXPECT_GT(r.trace[9].reg, 0.0);
}

TEST(Inversion, ZeroResidualTarget) {
  // constant encoder: f(E(x)) is the same code for every input, so the target
  // G(f(E(.)), mu) is reproduced exactly by the initialization at eps = 0
  InversionModels m = models();
  for (auto& [name, t] : m.encoder) {
    if (name == "enc.fc.weight") t = Tensor<float>(t.shape());
  }
  const auto w = initial_code(m, targets().images[0]);
  const auto x = batch_item(synthesize(m.spec, m.store.mean_weights(), w), 0);
  auto c = cfg(Strategy::wrangan, 10);
  const auto r = invert(x, m, c);
  const double dim = static_cast<double>(count_params(m.store).randomized);
  const double reg0 = c.alpha_reg * c.eps_init * c.eps_init * dim;
  EXPECT_NEAR(r.trace[0].reg, reg0, 1e-3 * reg0);
  EXPECT_LT(r.trace[0].l2, 1e-6);
  EXPECT_LE(r.trace[static_cast<std::size_t>(r.best_iteration)].total, r.trace[0].total);
}

TEST(Inversion, HugeAlphaPinsEpsilon) {
  auto c = cfg(Strategy::wrangan, 40, 1e6);
  const auto r = invert(targets().images[2], models(), c);
  double max_abs = 0;
  for (const auto& [name, e] : r.epsilon)
    for (float v : e.data()) max_abs = std::max(max_abs, static_cast<double>(std::abs(v)));
  EXPECT_LT(max_abs, c.eps_init * 10);
  const auto w = invert(targets().images[2], models(), cfg(Strategy::w_only, 40));
  EXPECT_NEAR(r.mse, w.mse, 0.1 * w.mse);
}

TEST(Inversion, NanTargetAbortsWithTrace) {
  auto x = targets().images[0];
  x[5] = std::nanf("");
  try {
    invert(x, models(), cfg(Strategy::wrangan, 3));
    FAIL() << "expected InversionError";
  } catch (const InversionError& e) {
    EXPECT_EQ(e.trace.size(), 1u);
    EXPECT_NE(std::string(e.what()).find("iteration 0"), std::string::npos);
  }
}

TEST(Inversion, ShapeMismatchRejected) {
  EXPECT_THROW(invert(Tensor<float>({3, 16, 16}), models(), cfg(Strategy::w_only, 1)), ShapeError);
  EXPECT_THROW(invert(Tensor<float>({2, 3, 32, 32}), models(), cfg(Strategy::w_only, 1)), ShapeError);
}

TEST(Inversion, TuneDeltaMatchesWeights) {
  const auto r = invert(targets().images[0], models(), cfg(Strategy::simple_tune, 5));
  const auto theta0 = models().store.mean_weights();
  EXPECT_EQ(r.epsilon.size(), 12u);
  for (const auto& [name, d] : r.epsilon) {
    const auto& fin = r.final_weights.at(name);
    for (std::int64_t i = 0; i < d.size(); ++i) ASSERT_NEAR(d[i], fin[i] - theta0.at(name)[i], 1e-6);
  }
  EXPECT_EQ(r.final_weights.at("syn.conv1.weight"), theta0.at("syn.conv1.weight"));
}

TEST(Inversion, WranganFinalWeightsRealizeEpsilon) {
  const auto r = invert(targets().images[0], models(), cfg(Strategy::wrangan, 5));
  const auto direct = realize_weights(models().store, r.epsilon);
  for (const auto& [name, t] : direct) EXPECT_EQ(t, r.final_weights.at(name)) << name;
}

TEST(Inversion, LossTraceCsv) {
  const auto dir = wrangan::testing::temp_dir("trace");
  write_loss_trace(dir / "t.csv", {{0, 3, 1, 1, 0}, {1, 2.5, 0.75, 1, 0}});
  EXPECT_EQ(read_text(dir / "t.csv"), "iteration,total,l2,perceptual,reg\n0,3,1,1,0\n1,2.5,0.75,1,0\n");
}
