#include <gtest/gtest.h>

#include <cmath>

#include "test_support.hpp"
#include "wrangan/log.hpp"
#include "wrangan/training.hpp"

using namespace wrangan;
using wrangan::testing::temp_dir;

namespace {

const Dataset& train_set() {
  static const Dataset d = [] {
    SyntheticSpec s;
    s.n_images = 1000;
    s.seed = 5;
    return generate_synthetic(s);
  }();
  return d;
}

TrainConfig small(int iterations, std::uint64_t seed = 3) {
  TrainConfig c;
  c.iterations = iterations;
  c.batch_size = 4;
  c.r1_every = 2;
  c.log_every = 1000;
  c.seed = seed;
  return c;
}

bool same(const ParamMap<float>& a, const ParamMap<float>& b) { return a == b; }

class Quiet : public ::testing::Environment {
 public:
  void SetUp() override { log::set_level(log::Level::warn); }
};
const auto* const kQuiet = ::testing::AddGlobalTestEnvironment(new Quiet);

}  // namespace

TEST(Pretrain, ZeroIterationsReturnsInitialization) {
  GeneratorSpec spec;
  const auto r = pretrain_base(spec, train_set(), small(0));
  EXPECT_TRUE(same(r.generator, initial_generator(spec, 3)));
  EXPECT_TRUE(same(r.discriminator, initial_discriminator(3)));
  EXPECT_TRUE(r.log.empty());
}

TEST(Pretrain, LogLengthMatchesIterations) {
  const auto r = pretrain_base(GeneratorSpec{}, train_set(), small(5));
  ASSERT_EQ(r.log.size(), 5u);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(r.log[static_cast<std::size_t>(i)].iteration, i);
  // lazy R1 on even iterations only
  EXPECT_GT(r.log[0].r1, 0.0);
  EXPECT_EQ(r.log[1].r1, 0.0);
  EXPECT_GT(r.log[2].r1, 0.0);
}

TEST(Pretrain, ChangesWeightsAndIsDeterministic) {
  GeneratorSpec spec;
  const auto a = pretrain_base(spec, train_set(), small(3));
  const auto b = pretrain_base(spec, train_set(), small(3));
  EXPECT_FALSE(same(a.generator, initial_generator(spec, 3)));
  EXPECT_TRUE(same(a.generator, b.generator));
  EXPECT_TRUE(same(a.discriminator, b.discriminator));
  const auto c = pretrain_base(spec, train_set(), small(3, 4));
  EXPECT_FALSE(same(a.generator, c.generator));
}

TEST(Pretrain, RejectsSmallDataset) {
  SyntheticSpec s;
  s.n_images = 50;
  EXPECT_THROW(pretrain_base(GeneratorSpec{}, generate_synthetic(s), small(1)), std::invalid_argument);
}

TEST(Pretrain, NanAbortsWithIteration) {
  Dataset d = train_set();
  for (auto& img : d.images) img[0] = std::nanf("");
  try {
    pretrain_base(GeneratorSpec{}, d, small(3));
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("iteration 0"), std::string::npos) << e.what();
  }
}

TEST(Pretrain, LossLogCsv) {
  const auto dir = temp_dir("loss_log");
  LossLog log = {{0, 1.5, 0.5, 0.25}, {1, 1.25, 0.75, 0}};
  write_loss_log(dir / "loss.csv", log);
  EXPECT_EQ(read_text(dir / "loss.csv"), "iteration,d_loss,g_loss,r1\n0,1.5,0.5,0.25\n1,1.25,0.75,0\n");
}

namespace {

double r1_value_double(const ParamMap<double>& disc, const Tensor<double>& real, double gamma) {
  Tape<double> t;
  auto dc = bind_constants(t, disc);
  auto x = t.leaf(real);
  const auto g = t.backward(ops::sum(discriminate(dc, x)))[x];
  double sq = 0;
  for (double v : g.data()) sq += v * v;
  return 0.5 * gamma * sq / static_cast<double>(real.dim(0));
}

ParamMap<double> to_double(const ParamMap<float>& p) {
  ParamMap<double> out;
  for (const auto& [k, v] : p) out.emplace(k, v.cast<double>());
  return out;
}

template <class T>
double directional(const ParamMap<T>& grad, const ParamMap<double>& dir) {
  double s = 0;
  for (const auto& [k, g] : grad)
    for (std::int64_t i = 0; i < g.size(); ++i) s += static_cast<double>(g[i]) * dir.at(k)[i];
  return s;
}

ParamMap<double> random_direction(const ParamMap<double>& like, std::uint64_t seed) {
  Rng rng(seed, "r1-direction");
  ParamMap<double> dir;
  for (const auto& [k, v] : like) dir.emplace(k, rng.normal_tensor<double>(v.shape()));
  return dir;
}

}  // namespace

TEST(R1, ValueIsHalfGammaMeanSquaredInputGradient) {
  const auto disc = to_double(initial_discriminator(2));
  const auto real = train_set().batch({0, 1, 2}).cast<double>();
  const auto r = r1_penalty(disc, real, 2.0);
  EXPECT_NEAR(r.value, r1_value_double(disc, real, 2.0), 1e-12 * r.value);
  // the value itself against per-coordinate differences of the logits
  Tape<double> t;
  auto dc = bind_constants(t, disc);
  auto x = t.leaf(real);
  const auto g = t.backward(ops::sum(discriminate(dc, x)))[x];
  Rng rng(1, "r1-probe");
  for (int probe = 0; probe < 8; ++probe) {
    const auto i = rng.below(real.size());
    auto xp = real, xm = real;
    xp[i] += 1e-7;
    xm[i] -= 1e-7;
    const auto item = static_cast<std::size_t>(i / (3 * 32 * 32));
    const double fd = (discriminate(dc, t.constant(xp)).value()[static_cast<std::int64_t>(item)] -
                       discriminate(dc, t.constant(xm)).value()[static_cast<std::int64_t>(item)]) /
                      2e-7;
    EXPECT_NEAR(fd, g[i], 1e-6 * (std::abs(g[i]) + 1e-4));
  }
}

TEST(R1, GradientConvergesToExactAsStepShrinks) {
  const auto disc = to_double(initial_discriminator(2));
  const auto real = train_set().batch({3, 4, 5, 6}).cast<double>();
  const auto r = r1_penalty(disc, real, 1.0, 1e-6);
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto dir = random_direction(disc, seed);
    auto shifted = [&](double s) {
      auto p = disc;
      for (auto& [k, v] : p)
        for (std::int64_t i = 0; i < v.size(); ++i) v[i] += s * dir.at(k)[i];
      return p;
    };
    const double delta = 1e-6;
    const double fd = (r1_value_double(shifted(delta), real, 1.0) - r1_value_double(shifted(-delta), real, 1.0)) / (2 * delta);
    EXPECT_NEAR(directional(r.gradient, dir), fd, 1e-4 * std::abs(fd) + 1e-9) << "seed " << seed;
  }
}

TEST(R1, FloatMatchesDoubleAtTrainingStep) {
  const auto disc = initial_discriminator(2);
  const auto real = train_set().batch({3, 4, 5, 6});
  const auto rf = r1_penalty(disc, real, 1.0);
  const auto rd = r1_penalty(to_double(disc), real.cast<double>(), 1.0);
  EXPECT_NEAR(rf.value, rd.value, 1e-4 * rd.value);
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto dir = random_direction(rd.gradient, seed);
    const double a = directional(rf.gradient, dir), b = directional(rd.gradient, dir);
    EXPECT_NEAR(a, b, 2e-2 * std::abs(b)) << "seed " << seed;
  }
}

TEST(Wrangan, ZeroIterationsIsInitializationContract) {
  GeneratorSpec spec;
  const auto g0 = initial_generator(spec, 9);
  const auto d0 = initial_discriminator(9);
  const auto r = train_wrangan(spec, g0, d0, train_set(), small(0));
  ASSERT_EQ(r.store.entries().size(), 12u);
  for (const auto& e : r.store.entries()) {
    EXPECT_EQ(e.mu, g0.at(e.name)) << e.name;
    const auto sigma = e.sigma();
    for (float s : sigma.data()) EXPECT_EQ(s, 1.0f);
  }
  EXPECT_TRUE(same(r.store.mean_weights(), g0));
  EXPECT_TRUE(same(r.discriminator, d0));
}

TEST(Wrangan, EpsilonResampledEveryDraw) {
  GeneratorSpec spec;
  std::vector<EpsilonVector> draws;
  TrainObserver obs;
  obs.on_epsilon = [&](int, const std::string&, const EpsilonVector& e) { draws.push_back(e); };
  train_wrangan(spec, initial_generator(spec, 1), initial_discriminator(1), train_set(), small(2), &obs);
  ASSERT_EQ(draws.size(), 4u);
  for (std::size_t i = 1; i < draws.size(); ++i) EXPECT_NE(draws[i], draws[i - 1]);
  EXPECT_EQ(draws[0].size(), 12u);
}

TEST(Wrangan, StepStructure) {
  GeneratorSpec spec;
  RandomizedParamStore last_store;
  ParamMap<float> last_disc;
  std::vector<std::string> phases;
  bool first = true;
  TrainObserver obs;
  obs.after_step = [&](int, const std::string& phase, const RandomizedParamStore& store, const ParamMap<float>& disc) {
    if (!first) {
      if (phase == "d") {
        EXPECT_EQ(store.fingerprint(), last_store.fingerprint()) << "D step changed the generator";
        EXPECT_FALSE(same(disc, last_disc));
      } else {
        EXPECT_TRUE(same(disc, last_disc)) << "G step changed the discriminator";
        EXPECT_NE(store.fingerprint(), last_store.fingerprint());
      }
    }
    first = false;
    phases.push_back(phase);
    last_store = store;
    last_disc = disc;
  };
  const auto g0 = initial_generator(spec, 1);
  const auto d0 = initial_discriminator(1);
  last_store = RandomizedParamStore::from_generator(spec, g0);
  last_disc = d0;
  first = false;
  train_wrangan(spec, g0, d0, train_set(), small(3), &obs);
  EXPECT_EQ(phases, (std::vector<std::string>{"d", "g", "d", "g", "d", "g"}));
}

TEST(Wrangan, TrainsMuSigmaAndNonRandomizedLayers) {
  GeneratorSpec spec;
  const auto g0 = initial_generator(spec, 1);
  const auto r = train_wrangan(spec, g0, initial_discriminator(1), train_set(), small(2));
  r.store.validate();
  for (const auto& e : r.store.entries()) {
    EXPECT_NE(e.mu, g0.at(e.name));
    EXPECT_NE(e.log_sigma, Tensor<float>(e.mu.shape()));
  }
  EXPECT_NE(r.store.frozen().at("syn.conv1.weight"), g0.at("syn.conv1.weight"));
  EXPECT_NE(r.store.frozen().at("map.fc1.weight"), g0.at("map.fc1.weight"));
}

TEST(Wrangan, NoRandomizedLayersEqualsPretraining) {
  GeneratorSpec spec;
  spec.n_randomized = 0;
  const auto g0 = initial_generator(spec, 1);
  const auto d0 = initial_discriminator(1);
  const auto w = train_wrangan(spec, g0, d0, train_set(), small(3));
  const auto p = pretrain_base(spec, train_set(), small(3), &g0, &d0);
  EXPECT_TRUE(w.store.entries().empty());
  ASSERT_EQ(w.log.size(), p.log.size());
  for (std::size_t i = 0; i < w.log.size(); ++i) {
    EXPECT_EQ(w.log[i].d_loss, p.log[i].d_loss);
    EXPECT_EQ(w.log[i].g_loss, p.log[i].g_loss);
    EXPECT_EQ(w.log[i].r1, p.log[i].r1);
  }
  EXPECT_TRUE(same(w.store.mean_weights(), p.generator));
}

TEST(Wrangan, Deterministic) {
  GeneratorSpec spec;
  const auto g0 = initial_generator(spec, 1);
  const auto d0 = initial_discriminator(1);
  const auto a = train_wrangan(spec, g0, d0, train_set(), small(2));
  const auto b = train_wrangan(spec, g0, d0, train_set(), small(2));
  EXPECT_EQ(a.store.fingerprint(), b.store.fingerprint());
  EXPECT_TRUE(same(a.discriminator, b.discriminator));
}

TEST(Wrangan, SigmaOverflowNamesLayer) {
  GeneratorSpec spec;
  auto cfg = small(1);
  cfg.lr_g = 11.0;
  try {
    train_wrangan(spec, initial_generator(spec, 1), initial_discriminator(1), train_set(), cfg);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("syn.conv"), std::string::npos) << e.what();
  }
}

TEST(Encoder, ZeroIterationsReturnsInit) {
  GeneratorSpec spec;
  EncoderConfig c;
  c.iterations = 0;
  c.seed = 4;
  const auto r = train_encoder(spec, initial_generator(spec, 1), init_perceptual(1234), train_set(), c);
  Rng rng(4, "init/encoder");
  EXPECT_TRUE(same(r.encoder, init_encoder(spec, rng)));
}

TEST(Encoder, DeterministicAndReducesReconstruction) {
  GeneratorSpec spec;
  const auto gen = initial_generator(spec, 1);
  const auto percep = init_perceptual(1234);
  EncoderConfig c;
  c.iterations = 60;
  c.log_every = 1000;
  const auto a = train_encoder(spec, gen, percep, train_set(), c);
  const auto b = train_encoder(spec, gen, percep, train_set(), c);
  EXPECT_TRUE(same(a.encoder, b.encoder));
  ASSERT_EQ(a.loss.size(), 60u);
  double head = 0, tail = 0;
  for (int i = 0; i < 10; ++i) {
    head += a.loss[static_cast<std::size_t>(i)];
    tail += a.loss[a.loss.size() - 1 - static_cast<std::size_t>(i)];
  }
  EXPECT_LT(tail, head);
}
