#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "wrangan/latent_tools.hpp"
#include "wrangan/metrics.hpp"
#include "wrangan/training.hpp"

using namespace wrangan;

namespace {

Tensor<float> code(Rng& rng, int d = 32) { return rng.normal_tensor<float>({1, d}); }

// Gaussian codes labeled by the side of a known plane, with a margin.
void separable(int n, std::vector<Tensor<float>>& codes, std::vector<int>& labels, std::vector<double>& dir) {
  Rng rng(7, "separable");
  dir.assign(32, 0.0);
  double norm = 0;
  for (auto& v : dir) {
    v = rng.normal();
    norm += v * v;
  }
  for (auto& v : dir) v /= std::sqrt(norm);
  while (static_cast<int>(codes.size()) < n) {
    auto c = code(rng);
    double t = 0.2;
    for (int k = 0; k < 32; ++k) t += dir[static_cast<std::size_t>(k)] * c[k];
    if (std::abs(t) < 0.3) continue;
    codes.push_back(c);
    labels.push_back(t > 0 ? 1 : 0);
  }
}

// Cyclic Jacobi eigenvalues of a symmetric matrix.
std::vector<double> jacobi_eigenvalues(std::vector<std::vector<double>> a) {
  const std::size_t n = a.size();
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a[p][q]) < 1e-300) continue;
        const double theta = (a[q][q] - a[p][p]) / (2 * a[p][q]);
        const double t = (theta >= 0 ? 1 : -1) / (std::abs(theta) + std::sqrt(theta * theta + 1));
        const double c = 1 / std::sqrt(t * t + 1), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
      }
    }
  }
  std::vector<double> ev(n);
  for (std::size_t i = 0; i < n; ++i) ev[i] = a[i][i];
  std::sort(ev.rbegin(), ev.rend());
  return ev;
}

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

InversionResult inverted(int index, Strategy s) {
  SyntheticSpec ts;
  ts.n_images = 2;
  ts.stream = "test";
  const auto data = generate_synthetic(ts);
  InversionConfig c;
  c.strategy = s;
  c.iterations = 4;
  c.pivot_iterations = 2;
  return invert(data.images[static_cast<std::size_t>(index)], models(), c);
}

}  // namespace

TEST(Hyperplane, SeparableAttributeIsRecovered) {
  std::vector<Tensor<float>> codes;
  std::vector<int> labels;
  std::vector<double> dir;
  separable(600, codes, labels, dir);
  const auto fit = fit_hyperplane(codes, labels);
  EXPECT_GE(fit.held_out_accuracy, 0.95);
  EXPECT_EQ(fit.n_train + fit.n_held_out, 600);
  EXPECT_NEAR(fit.n_held_out, 120, 40);
  double norm = 0, cosine = 0;
  for (std::size_t k = 0; k < 32; ++k) {
    norm += fit.plane.normal[k] * fit.plane.normal[k];
    cosine += fit.plane.normal[k] * dir[k];
  }
  EXPECT_NEAR(std::sqrt(norm), 1.0, 1e-6);
  EXPECT_GT(cosine, 0.9);
  EXPECT_LE(fit.steps, 5000);
}

TEST(Hyperplane, InvariantToSampleOrder) {
  std::vector<Tensor<float>> codes;
  std::vector<int> labels;
  std::vector<double> dir;
  separable(300, codes, labels, dir);
  const auto a = fit_hyperplane(codes, labels);
  std::vector<std::size_t> perm(codes.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = (i * 97) % perm.size();
  std::vector<Tensor<float>> pc;
  std::vector<int> pl;
  for (auto i : perm) {
    pc.push_back(codes[i]);
    pl.push_back(labels[i]);
  }
  const auto b = fit_hyperplane(pc, pl);
  EXPECT_EQ(a.plane.normal, b.plane.normal);
  EXPECT_EQ(a.plane.offset, b.plane.offset);
  EXPECT_EQ(a.held_out_accuracy, b.held_out_accuracy);
}

TEST(Hyperplane, FlippedLabelsNegateThePlane) {
  std::vector<Tensor<float>> codes;
  std::vector<int> labels;
  std::vector<double> dir;
  separable(300, codes, labels, dir);
  const auto a = fit_hyperplane(codes, labels);
  for (auto& l : labels) l = 1 - l;
  const auto b = fit_hyperplane(codes, labels);
  for (std::size_t k = 0; k < 32; ++k) EXPECT_EQ(b.plane.normal[k], -a.plane.normal[k]);
  EXPECT_EQ(b.plane.offset, -a.plane.offset);
  EXPECT_EQ(a.held_out_accuracy, b.held_out_accuracy);
}

TEST(Hyperplane, Preconditions) {
  Rng rng(1, "x");
  std::vector<Tensor<float>> codes;
  for (int i = 0; i < 120; ++i) codes.push_back(code(rng));
  EXPECT_THROW(fit_hyperplane(codes, std::vector<int>(120, 1)), std::invalid_argument);
  std::vector<int> few(120, 0);
  for (int i = 0; i < 40; ++i) few[static_cast<std::size_t>(i)] = 1;
  EXPECT_THROW(fit_hyperplane(codes, few), std::invalid_argument);
  std::vector<int> bad(120, 0);
  bad[0] = 2;
  EXPECT_THROW(fit_hyperplane(codes, bad), std::invalid_argument);
}

TEST(Pca, SingleAxisData) {
  Rng rng(2, "pca");
  std::vector<Tensor<float>> codes;
  for (int i = 0; i < 200; ++i) {
    Tensor<float> c({1, 32});
    c[0] = static_cast<float>(rng.normal() * 3);
    codes.push_back(c);
  }
  const auto p = pca_directions(codes, 1);
  EXPECT_NEAR(p.directions[0][0], 1.0, 1e-9);
  for (std::size_t k = 1; k < 32; ++k) EXPECT_NEAR(p.directions[0][k], 0.0, 1e-9);
}

TEST(Pca, OrthonormalAndMatchesJacobi) {
  Rng rng(3, "pca");
  std::vector<Tensor<float>> codes;
  for (int i = 0; i < 300; ++i) {
    auto c = code(rng);
    for (int k = 0; k < 32; ++k) c[k] *= static_cast<float>(1 + k % 5);
    c[1] += 2 * c[0];
    codes.push_back(c);
  }
  const auto p = pca_directions(codes, 6);
  for (int i = 0; i < 6; ++i) {
    for (int j = 0; j < 6; ++j) {
      double dot = 0;
      for (std::size_t k = 0; k < 32; ++k) dot += p.directions[static_cast<std::size_t>(i)][k] * p.directions[static_cast<std::size_t>(j)][k];
      EXPECT_NEAR(dot, i == j ? 1.0 : 0.0, 1e-6);
    }
    const auto& d = p.directions[static_cast<std::size_t>(i)];
    const auto arg = std::max_element(d.begin(), d.end(), [](double a, double b) { return std::abs(a) < std::abs(b); });
    EXPECT_GT(*arg, 0.0);
  }
  const auto m = code_matrix(codes);
  const auto cov = feature_stats(m).covariance;
  std::vector<std::vector<double>> a(32, std::vector<double>(32));
  for (std::size_t i = 0; i < 32; ++i)
    for (std::size_t j = 0; j < 32; ++j) a[i][j] = cov[i * 32 + j];
  const auto ev = jacobi_eigenvalues(a);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(p.explained_variance[i], ev[i], 1e-8 * std::max(1.0, ev[i]));
  for (std::size_t i = 1; i < 6; ++i) EXPECT_GE(p.explained_variance[i - 1], p.explained_variance[i]);
}

TEST(Pca, WhitenedDataHasUnitEigenvalues) {
  Rng rng(4, "pca");
  const int n = 10000, d = 32;
  std::vector<Tensor<float>> raw;
  for (int i = 0; i < n; ++i) {
    auto c = code(rng);
    for (int k = 1; k < d; ++k) c[k] += 0.5f * c[k - 1];
    raw.push_back(c);
  }
  // whiten with the inverse Cholesky factor of the sample covariance
  const auto stats = feature_stats(code_matrix(raw));
  std::vector<double> l(static_cast<std::size_t>(d * d), 0.0);
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j <= i; ++j) {
      double s = stats.covariance[static_cast<std::size_t>(i * d + j)];
      for (int k = 0; k < j; ++k) s -= l[static_cast<std::size_t>(i * d + k)] * l[static_cast<std::size_t>(j * d + k)];
      l[static_cast<std::size_t>(i * d + j)] = i == j ? std::sqrt(s) : s / l[static_cast<std::size_t>(j * d + j)];
    }
  }
  std::vector<Tensor<float>> white;
  for (const auto& c : raw) {
    Tensor<float> out({1, d});
    std::vector<double> y(static_cast<std::size_t>(d));
    for (int i = 0; i < d; ++i) {
      double s = c[i] - stats.mean[static_cast<std::size_t>(i)];
      for (int k = 0; k < i; ++k) s -= l[static_cast<std::size_t>(i * d + k)] * y[static_cast<std::size_t>(k)];
      y[static_cast<std::size_t>(i)] = s / l[static_cast<std::size_t>(i * d + i)];
      out[i] = static_cast<float>(y[static_cast<std::size_t>(i)]);
    }
    white.push_back(out);
  }
  const auto p = pca_directions(white, 32);
  for (double v : p.explained_variance) EXPECT_NEAR(v, 1.0, 1e-4);
}

TEST(Pca, Preconditions) {
  Rng rng(5, "pca");
  std::vector<Tensor<float>> codes;
  for (int i = 0; i < 40; ++i) codes.push_back(code(rng));
  EXPECT_THROW(pca_directions(codes, 33), std::invalid_argument);
  EXPECT_THROW(pca_directions(codes, 0), std::invalid_argument);
  codes.resize(4);
  EXPECT_THROW(pca_directions(codes, 4), std::invalid_argument);
  EXPECT_NO_THROW(pca_directions(codes, 3));
}

TEST(Edit, StepZeroIsReconstructionAndContinuous) {
  for (auto s : {Strategy::wrangan, Strategy::w_plus}) {
    const auto r = inverted(0, s);
    std::vector<double> dir(32, 0.0);
    dir[3] = 0.6;
    dir[7] = -0.8;
    EXPECT_EQ(edit(models().spec, r, dir, 0.0), r.image);
    const auto a = edit(models().spec, r, dir, 1.0);
    const auto b = edit(models().spec, r, dir, 1.0 + 1e-3);
    EXPECT_LT(mse(a, b), 1e-3);
    EXPECT_GT(mse(a, r.image), 0.0);
  }
}

TEST(Edit, OppositeStepsMoveLogitOppositely) {
  Hyperplane h;
  h.normal.assign(32, 0.0);
  h.normal[2] = 1.0;
  const auto r = inverted(0, Strategy::w_only);
  const double base = h.signed_distance(r.w[0]);
  auto shifted = [&](double step) {
    auto w = r.w[0];
    for (int k = 0; k < 32; ++k) w[k] += static_cast<float>(step * h.normal[static_cast<std::size_t>(k)]);
    return h.signed_distance(w);
  };
  EXPECT_GT(shifted(0.5) - base, 0.0);
  EXPECT_LT(shifted(-0.5) - base, 0.0);
}

TEST(Edit, RejectsNonUnitDirection) {
  const auto r = inverted(0, Strategy::w_only);
  EXPECT_THROW(edit(models().spec, r, std::vector<double>(32, 1.0), 1.0), std::invalid_argument);
  EXPECT_THROW(edit(models().spec, r, std::vector<double>(3, 0.0), 1.0), ShapeError);
}

TEST(Interpolate, EndpointsAndMidpoint) {
  for (auto s : {Strategy::wrangan, Strategy::simple_tune}) {
    const auto a = inverted(0, s);
    const auto b = inverted(1, s);
    const auto imgs = interpolate(models().store, a, b, {0.0, 0.5, 1.0});
    ASSERT_EQ(imgs.size(), 3u);
    EXPECT_EQ(imgs[0], a.image) << to_string(s);
    EXPECT_EQ(imgs[2], b.image) << to_string(s);
    EXPECT_GT(mse(imgs[1], a.image), 0.0);
    EXPECT_GT(mse(imgs[1], b.image), 0.0);
  }
}

TEST(Interpolate, MismatchedStoresRejected) {
  const auto a = inverted(0, Strategy::wrangan);
  auto b = inverted(1, Strategy::wrangan);
  auto other = models().store;
  other.entries()[0].log_sigma[0] += 1.0f;
  EXPECT_THROW(interpolate(other, a, b, {0.5}), std::invalid_argument);
  b.store_fingerprint ^= 1;
  EXPECT_THROW(interpolate(models().store, a, b, {0.5}), std::invalid_argument);
  EXPECT_THROW(interpolate(models().store, a, inverted(1, Strategy::w_plus), {0.5}), std::invalid_argument);
}

TEST(Hyperplane, SeparationAndFlipRates) {
  Hyperplane h;
  h.normal.assign(32, 0.0);
  h.normal[0] = 1.0;
  h.offset = -0.5;
  std::vector<Tensor<float>> codes;
  std::vector<int> labels;
  for (float x : {-1.0f, 0.0f, 1.0f, 3.0f}) {
    Tensor<float> c({1, 32});
    c[0] = x;
    codes.push_back(c);
    labels.push_back(x > 0.5f ? 1 : 0);
  }
  EXPECT_DOUBLE_EQ(class_center_separation(h, codes, labels), 2.0 - (-0.5));
  // distances to the plane: 1.5, 0.5, 0.5, 2.5
  EXPECT_DOUBLE_EQ(edit_flip_rate(h, codes, 0.6), 0.5);
  EXPECT_DOUBLE_EQ(edit_flip_rate(h, codes, 1.6), 0.75);
  EXPECT_DOUBLE_EQ(edit_flip_rate(h, codes, 3.0), 1.0);
  EXPECT_DOUBLE_EQ(edit_flip_rate(h, codes, 0.0), 0.0);
  const double r = round_trip_flip_rate(models(), h, codes, 1.0);
  EXPECT_GE(r, 0.0);
  EXPECT_LE(r, 1.0);
}
