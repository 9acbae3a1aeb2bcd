#include "wrangan/metrics.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>
#include <fmt/format.h>
#include <json.hpp>

namespace wrangan {

double mse(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(fmt::format("mse: shape mismatch {} vs {}", to_string(a.shape()), to_string(b.shape())));
  }
  double acc = 0;
  for (std::int64_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

namespace {

using Plane = Eigen::MatrixXd;

std::vector<Plane> to_planes(const Tensor<float>& t, const char* which) {
  const auto& s = t.shape();
  const bool batched = s.size() == 4;
  if (!(s.size() == 3 || (batched && s[0] == 1))) {
    throw ShapeError(fmt::format("ms_ssim: {} must be [C,H,W] or [1,C,H,W], got {}", which, to_string(s)));
  }
  const auto c = s[batched ? 1 : 0], h = s[s.size() - 2], w = s[s.size() - 1];
  std::vector<Plane> planes;
  for (std::int64_t k = 0; k < c; ++k) {
    Plane p(h, w);
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        const double v = std::clamp(static_cast<double>(t[(k * h + y) * w + x]), -1.0, 1.0);
        p(y, x) = (v + 1.0) / 2.0;
      }
    planes.push_back(std::move(p));
  }
  return planes;
}

std::vector<double> gauss_taps(int size, double sigma) {
  std::vector<double> g(static_cast<std::size_t>(size));
  const double c = (size - 1) / 2.0;
  double s = 0;
  for (int i = 0; i < size; ++i) {
    g[static_cast<std::size_t>(i)] = std::exp(-(i - c) * (i - c) / (2 * sigma * sigma));
    s += g[static_cast<std::size_t>(i)];
  }
  for (auto& v : g) v /= s;
  return g;
}

// Separable Gaussian filter, valid region only.
Plane filter_valid(const Plane& p, const std::vector<double>& g) {
  const auto k = static_cast<Eigen::Index>(g.size());
  Plane rows(p.rows(), p.cols() - k + 1);
  for (Eigen::Index y = 0; y < p.rows(); ++y)
    for (Eigen::Index x = 0; x < rows.cols(); ++x) {
      double acc = 0;
      for (Eigen::Index i = 0; i < k; ++i) acc += g[static_cast<std::size_t>(i)] * p(y, x + i);
      rows(y, x) = acc;
    }
  Plane out(p.rows() - k + 1, rows.cols());
  for (Eigen::Index y = 0; y < out.rows(); ++y)
    for (Eigen::Index x = 0; x < out.cols(); ++x) {
      double acc = 0;
      for (Eigen::Index i = 0; i < k; ++i) acc += g[static_cast<std::size_t>(i)] * rows(y + i, x);
      out(y, x) = acc;
    }
  return out;
}

Plane downsample(const Plane& p) {
  Plane out(p.rows() / 2, p.cols() / 2);
  for (Eigen::Index y = 0; y < out.rows(); ++y)
    for (Eigen::Index x = 0; x < out.cols(); ++x)
      out(y, x) = 0.25 * (p(2 * y, 2 * x) + p(2 * y + 1, 2 * x) + p(2 * y, 2 * x + 1) + p(2 * y + 1, 2 * x + 1));
  return out;
}

// Mean contrast-structure term and mean full SSIM of one plane pair.
std::pair<double, double> ssim_terms(const Plane& x, const Plane& y, int window, const MsSsimOptions& o) {
  const auto g = gauss_taps(window, o.sigma);
  const double c1 = o.k1 * o.k1, c2 = o.k2 * o.k2;
  const Plane mx = filter_valid(x, g), my = filter_valid(y, g);
  const Plane sxx = filter_valid(x.cwiseProduct(x), g) - mx.cwiseProduct(mx);
  const Plane syy = filter_valid(y.cwiseProduct(y), g) - my.cwiseProduct(my);
  const Plane sxy = filter_valid(x.cwiseProduct(y), g) - mx.cwiseProduct(my);
  const Plane cs = (2 * sxy.array() + c2) / (sxx.array() + syy.array() + c2);
  const Plane lum = (2 * mx.array() * my.array() + c1) / (mx.array().square() + my.array().square() + c1);
  return {cs.mean(), (lum.array() * cs.array()).mean()};
}

}  // namespace

double ms_ssim(const Tensor<float>& a, const Tensor<float>& b, const MsSsimOptions& o) {
  if (a.shape() != b.shape()) {
    throw ShapeError(fmt::format("ms_ssim: shape mismatch {} vs {}", to_string(a.shape()), to_string(b.shape())));
  }
  auto pa = to_planes(a, "first image");
  auto pb = to_planes(b, "second image");
  const int scales = static_cast<int>(o.weights.size());
  double wsum = 0;
  for (double w : o.weights) wsum += w;

  double result = 1.0;
  for (int s = 0; s < scales; ++s) {
    const auto side = std::min(pa[0].rows(), pa[0].cols());
    int window = o.window;
    if (side < window) window = static_cast<int>(side % 2 ? side : side - 1);
    if (window < o.min_window) {
      throw ShapeError(fmt::format("ms_ssim: scale {} is {}x{}, smaller than the {}x{} minimum window", s + 1,
                                   pa[0].rows(), pa[0].cols(), o.min_window, o.min_window));
    }
    double term = 0;
    for (std::size_t c = 0; c < pa.size(); ++c) {
      auto [cs, full] = ssim_terms(pa[c], pb[c], window, o);
      term += (s == scales - 1) ? full : cs;
    }
    term /= static_cast<double>(pa.size());
    result *= std::pow(std::max(term, 0.0), o.weights[static_cast<std::size_t>(s)] / wsum);
    if (s + 1 < scales) {
      for (auto& p : pa) p = downsample(p);
      for (auto& p : pb) p = downsample(p);
    }
  }
  return std::clamp(result, 0.0, 1.0);
}

namespace {

Eigen::MatrixXd as_matrix(const Tensor<double>& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(fmt::format("{}: features must be [N, D], got {}", op, to_string(t.shape())));
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(t.ptr(), t.dim(0), t.dim(1));
}

void check_same_dim(const Tensor<double>& a, const Tensor<double>& b, const char* op) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw ShapeError(fmt::format("{}: feature shapes {} and {} differ", op, to_string(a.shape()), to_string(b.shape())));
  }
}

}  // namespace

FeatureStats feature_stats(const Tensor<double>& features) {
  const auto x = as_matrix(features, "feature_stats");
  if (x.rows() < 2) throw std::invalid_argument("feature_stats: need at least 2 samples");
  FeatureStats s;
  s.n = x.rows();
  s.dim = static_cast<int>(x.cols());
  const Eigen::VectorXd mu = x.colwise().mean();
  const Eigen::MatrixXd centered = x.rowwise() - mu.transpose();
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(x.rows() - 1);
  s.mean.assign(mu.data(), mu.data() + mu.size());
  s.covariance.resize(static_cast<std::size_t>(cov.size()));
  for (Eigen::Index i = 0; i < cov.rows(); ++i)
    for (Eigen::Index j = 0; j < cov.cols(); ++j) s.covariance[static_cast<std::size_t>(i * cov.cols() + j)] = cov(i, j);
  return s;
}

double frechet_distance(const FeatureStats& a, const FeatureStats& b) {
  if (a.dim != b.dim) throw ShapeError(fmt::format("frechet_distance: dims {} vs {}", a.dim, b.dim));
  const int d = a.dim;
  auto load = [d](const FeatureStats& s) {
    Eigen::MatrixXd m(d, d);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) m(i, j) = s.covariance[static_cast<std::size_t>(i * d + j)];
    if (!m.allFinite()) throw std::runtime_error("frechet_distance: non-finite covariance");
    if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-10 * std::max(1.0, m.cwiseAbs().maxCoeff())) {
      throw std::runtime_error("frechet_distance: covariance is not symmetric");
    }
    return Eigen::MatrixXd(0.5 * (m + m.transpose()));
  };
  const Eigen::MatrixXd s1 = load(a), s2 = load(b);
  const Eigen::Map<const Eigen::VectorXd> m1(a.mean.data(), d), m2(b.mean.data(), d);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> e1(s1);
  const Eigen::VectorXd r1 = e1.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const Eigen::MatrixXd s1h = e1.eigenvectors() * r1.asDiagonal() * e1.eigenvectors().transpose();
  Eigen::MatrixXd inner = s1h * s2 * s1h;
  inner = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> e2(inner, Eigen::EigenvaluesOnly);
  const double tr_sqrt = e2.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double value = (m1 - m2).squaredNorm() + s1.trace() + s2.trace() - 2 * tr_sqrt;
  return std::max(value, 0.0);
}

double frechet_distance(const Tensor<double>& real, const Tensor<double>& gen) {
  check_same_dim(real, gen, "frechet_distance");
  const auto d = real.dim(1);
  if (real.dim(0) <= d || gen.dim(0) <= d) {
    throw std::invalid_argument(
        fmt::format("frechet_distance: need more than {} samples per set, got {} and {}", d, real.dim(0), gen.dim(0)));
  }
  return frechet_distance(feature_stats(real), feature_stats(gen));
}

double kernel_distance(const Tensor<double>& real, const Tensor<double>& gen) {
  check_same_dim(real, gen, "kernel_distance");
  const auto x = as_matrix(real, "kernel_distance"), y = as_matrix(gen, "kernel_distance");
  const double m = static_cast<double>(x.rows()), n = static_cast<double>(y.rows());
  if (m < 2 || n < 2) throw std::invalid_argument("kernel_distance: need at least 2 samples per set");
  const double d = static_cast<double>(x.cols());
  auto kernel = [d](const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    return Eigen::MatrixXd(((a * b.transpose()).array() / d + 1.0).cube());
  };
  const Eigen::MatrixXd kxx = kernel(x, x), kyy = kernel(y, y), kxy = kernel(x, y);
  const double sxx = (kxx.sum() - kxx.trace()) / (m * (m - 1));
  const double syy = (kyy.sum() - kyy.trace()) / (n * (n - 1));
  return sxx + syy - 2 * kxy.sum() / (m * n);
}

namespace {

double sq_dist(const double* a, const double* b, std::int64_t d) {
  double s = 0;
  for (std::int64_t i = 0; i < d; ++i) {
    const double t = a[i] - b[i];
    s += t * t;
  }
  return s;
}

// Squared distance of every row to its k-th nearest other row.
std::vector<double> knn_radii(const Tensor<double>& x, int k) {
  const auto n = x.dim(0), d = x.dim(1);
  std::vector<double> radii(static_cast<std::size_t>(n));
  std::vector<double> dist;
  for (std::int64_t i = 0; i < n; ++i) {
    dist.clear();
    for (std::int64_t j = 0; j < n; ++j) {
      if (j != i) dist.push_back(sq_dist(x.ptr() + i * d, x.ptr() + j * d, d));
    }
    std::nth_element(dist.begin(), dist.begin() + (k - 1), dist.end());
    radii[static_cast<std::size_t>(i)] = dist[static_cast<std::size_t>(k - 1)];
  }
  return radii;
}

double coverage(const Tensor<double>& manifold, const std::vector<double>& radii, const Tensor<double>& probes) {
  const auto d = manifold.dim(1);
  std::int64_t inside = 0;
  for (std::int64_t p = 0; p < probes.dim(0); ++p) {
    for (std::int64_t m = 0; m < manifold.dim(0); ++m) {
      if (sq_dist(probes.ptr() + p * d, manifold.ptr() + m * d, d) <= radii[static_cast<std::size_t>(m)]) {
        ++inside;
        break;
      }
    }
  }
  return static_cast<double>(inside) / static_cast<double>(probes.dim(0));
}

}  // namespace

PrecisionRecall precision_recall(const Tensor<double>& real, const Tensor<double>& gen, int k) {
  check_same_dim(real, gen, "precision_recall");
  if (k < 1 || k >= real.dim(0) || k >= gen.dim(0)) {
    throw std::invalid_argument(
        fmt::format("precision_recall: k = {} needs more than k samples per set ({} and {})", k, real.dim(0), gen.dim(0)));
  }
  PrecisionRecall pr;
  pr.precision = coverage(real, knn_radii(real, k), gen);
  pr.recall = coverage(gen, knn_radii(gen, k), real);
  return pr;
}

void EvalReport::set(const std::string& name, double value) {
  for (auto& [k, v] : values) {
    if (k == name) {
      v = value;
      return;
    }
  }
  values.emplace_back(name, value);
}

double EvalReport::get(const std::string& name) const {
  for (const auto& [k, v] : values) {
    if (k == name) return v;
  }
  throw std::out_of_range(fmt::format("report: no value '{}'", name));
}

bool EvalReport::has(const std::string& name) const {
  for (const auto& [k, v] : values) {
    if (k == name) return true;
  }
  return false;
}

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["config_hash"] = config_hash;
  j["seed"] = seed;
  auto& v = j["values"];
  v = nlohmann::ordered_json::object();
  for (const auto& [k, x] : values) v[k] = std::isfinite(x) ? nlohmann::ordered_json(x) : nlohmann::ordered_json(fmt::format("{}", x));
  return j.dump(2) + "\n";
}

}  // namespace wrangan
