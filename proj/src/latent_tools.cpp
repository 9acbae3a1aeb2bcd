#include "wrangan/latent_tools.hpp"

#include <fmt/format.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <stdexcept>
#include <string_view>

namespace wrangan {

namespace {

std::string_view bytes_of(const Tensor<float>& t) {
  return {reinterpret_cast<const char*>(t.data().data()), t.data().size() * sizeof(float)};
}

double softplus(double u) { return std::max(u, 0.0) + std::log1p(std::exp(-std::abs(u))); }

double sigmoid(double u) {
  if (u >= 0) return 1.0 / (1.0 + std::exp(-u));
  const double e = std::exp(u);
  return e / (1.0 + e);
}

std::int64_t check_codes(const std::vector<Tensor<float>>& codes) {
  if (codes.empty()) throw std::invalid_argument("no codes");
  const auto d = codes.front().size();
  for (const auto& c : codes) {
    if (c.size() != d) throw ShapeError(fmt::format("codes differ in size: {} vs {}", c.size(), d));
  }
  return d;
}

}  // namespace

double Hyperplane::signed_distance(const Tensor<float>& w) const {
  if (static_cast<std::size_t>(w.size()) != normal.size()) {
    throw ShapeError(fmt::format("hyperplane of dimension {} vs code of {}", normal.size(), w.size()));
  }
  double t = offset;
  for (std::size_t k = 0; k < normal.size(); ++k) t += normal[k] * w[static_cast<std::int64_t>(k)];
  return t;
}

Tensor<double> code_matrix(const std::vector<Tensor<float>>& codes) {
  const auto d = check_codes(codes);
  Tensor<double> m({static_cast<std::int64_t>(codes.size()), d});
  for (std::size_t i = 0; i < codes.size(); ++i) {
    for (std::int64_t k = 0; k < d; ++k) m[static_cast<std::int64_t>(i) * d + k] = codes[i][k];
  }
  return m;
}

HyperplaneFit fit_hyperplane(const std::vector<Tensor<float>>& codes, const std::vector<int>& labels,
                             const HyperplaneOptions& options) {
  if (codes.size() != labels.size()) throw std::invalid_argument("fit_hyperplane: codes and labels differ in length");
  const auto d = static_cast<std::size_t>(check_codes(codes));
  std::int64_t count[2] = {0, 0};
  for (int l : labels) {
    if (l != 0 && l != 1) throw std::invalid_argument(fmt::format("fit_hyperplane: label {} is not binary", l));
    ++count[l];
  }
  if (count[0] == 0 || count[1] == 0) throw std::invalid_argument("fit_hyperplane: single-class input");
  if (count[0] < options.min_per_class || count[1] < options.min_per_class) {
    throw std::invalid_argument(fmt::format("fit_hyperplane: need {} samples per class, got {} and {}",
                                            options.min_per_class, count[0], count[1]));
  }

  std::vector<std::size_t> order(codes.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto ba = bytes_of(codes[a]), bb = bytes_of(codes[b]);
    return ba != bb ? ba < bb : labels[a] < labels[b];
  });
  std::vector<std::size_t> train, held;
  for (auto i : order) (fnv1a64(bytes_of(codes[i])) % 5 == 0 ? held : train).push_back(i);
  int train_count[2] = {0, 0};
  for (auto i : train) ++train_count[labels[i]];
  if (train_count[0] == 0 || train_count[1] == 0) throw std::invalid_argument("fit_hyperplane: single-class training split");

  // whitening keeps the descent well conditioned for correlated codes
  const std::size_t n = train.size();
  Eigen::MatrixXd raw(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t k = 0; k < d; ++k) raw(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = codes[train[r]][static_cast<std::int64_t>(k)];
  const Eigen::RowVectorXd mean = raw.colwise().mean();
  raw.rowwise() -= mean;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver((raw.transpose() * raw) / static_cast<double>(n));
  const double top = std::max(solver.eigenvalues().maxCoeff(), 1e-300);
  Eigen::MatrixXd whiten = solver.eigenvectors();
  for (Eigen::Index c = 0; c < whiten.cols(); ++c) {
    const double ev = solver.eigenvalues()(c);
    whiten.col(c) *= ev > 1e-12 * top ? 1.0 / std::sqrt(ev) : 0.0;
  }
  const Eigen::MatrixXd white = raw * whiten;
  std::vector<double> x(n * d), y(n);
  for (std::size_t r = 0; r < n; ++r) {
    y[r] = labels[train[r]] == 1 ? 1.0 : -1.0;
    for (std::size_t k = 0; k < d; ++k) x[r * d + k] = white(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k));
  }

  std::vector<double> a(d, 0.0), ga(d);
  double b = 0;
  auto loss_and_grad = [&](bool want_grad, double& gb) {
    double loss = 0;
    if (want_grad) {
      std::fill(ga.begin(), ga.end(), 0.0);
      gb = 0;
    }
    for (std::size_t r = 0; r < n; ++r) {
      double t = b;
      for (std::size_t k = 0; k < d; ++k) t += a[k] * x[r * d + k];
      const double m = -y[r] * t;
      loss += softplus(m);
      if (want_grad) {
        const double g = -y[r] * sigmoid(m);
        for (std::size_t k = 0; k < d; ++k) ga[k] += g * x[r * d + k];
        gb += g;
      }
    }
    const double inv = 1.0 / static_cast<double>(n);
    if (want_grad) {
      for (auto& g : ga) g *= inv;
      gb *= inv;
    }
    return loss * inv;
  };

  HyperplaneFit fit;
  double gb = 0;
  double loss = loss_and_grad(true, gb);
  for (int step = 0; step < options.max_steps; ++step) {
    for (std::size_t k = 0; k < d; ++k) a[k] -= options.learning_rate * ga[k];
    b -= options.learning_rate * gb;
    const double next = loss_and_grad(true, gb);
    fit.steps = step + 1;
    const double delta = std::abs(loss - next);
    loss = next;
    if (delta < options.tolerance) break;
  }

  const Eigen::VectorXd raw_normal = whiten * Eigen::Map<const Eigen::VectorXd>(a.data(), static_cast<Eigen::Index>(d));
  std::vector<double> normal(raw_normal.data(), raw_normal.data() + d);
  double offset = b - raw_normal.dot(mean.transpose()), norm = raw_normal.norm();
  if (!(norm > 0) || !std::isfinite(norm)) throw std::runtime_error("fit_hyperplane: degenerate normal");
  for (auto& v : normal) v /= norm;
  fit.plane.normal = std::move(normal);
  fit.plane.offset = offset / norm;

  auto accuracy = [&](const std::vector<std::size_t>& idx) {
    if (idx.empty()) return 0.0;
    int hit = 0;
    for (auto i : idx) hit += fit.plane.classify(codes[i]) == labels[i];
    return static_cast<double>(hit) / static_cast<double>(idx.size());
  };
  fit.train_accuracy = accuracy(train);
  fit.held_out_accuracy = accuracy(held);
  fit.n_train = static_cast<int>(train.size());
  fit.n_held_out = static_cast<int>(held.size());
  return fit;
}

PcaResult pca_directions(const std::vector<Tensor<float>>& codes, int k) {
  const auto d = check_codes(codes);
  if (k < 1 || k > d) throw std::invalid_argument(fmt::format("pca_directions: k must be in [1, {}], got {}", d, k));
  if (static_cast<std::int64_t>(codes.size()) < k + 1) {
    throw std::invalid_argument(fmt::format("pca_directions: need at least {} samples, got {}", k + 1, codes.size()));
  }
  const auto n = static_cast<Eigen::Index>(codes.size());
  Eigen::MatrixXd x(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = codes[static_cast<std::size_t>(i)][j];
  const Eigen::RowVectorXd mean = x.colwise().mean();
  x.rowwise() -= mean;
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw std::runtime_error("pca_directions: eigensolver failed");
  PcaResult out;
  for (int c = 0; c < k; ++c) {
    const Eigen::Index col = d - 1 - c;  // ascending order from the solver
    Eigen::VectorXd v = solver.eigenvectors().col(col);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    out.directions.emplace_back(v.data(), v.data() + d);
    out.explained_variance.push_back(std::max(0.0, solver.eigenvalues()(col)));
  }
  return out;
}

Tensor<float> edit(const GeneratorSpec& spec, const InversionResult& result, const std::vector<double>& direction,
                   double step) {
  if (static_cast<int>(direction.size()) != spec.w_dim) {
    throw ShapeError(fmt::format("edit: direction of dimension {} for w_dim {}", direction.size(), spec.w_dim));
  }
  double norm = 0;
  for (double v : direction) norm += v * v;
  if (std::abs(std::sqrt(norm) - 1.0) > 1e-6) {
    throw std::invalid_argument(fmt::format("edit: direction norm {} is not 1", std::sqrt(norm)));
  }
  InversionResult moved;
  moved.final_weights = result.final_weights;
  for (auto w : result.w) {
    for (int k = 0; k < spec.w_dim; ++k) w[k] += static_cast<float>(step * direction[static_cast<std::size_t>(k)]);
    moved.w.push_back(std::move(w));
  }
  return render(spec, moved);
}

std::vector<Tensor<float>> interpolate(const RandomizedParamStore& store, const InversionResult& a,
                                       const InversionResult& b, const std::vector<double>& alphas) {
  const auto fp = store.fingerprint();
  if (a.store_fingerprint != fp || b.store_fingerprint != fp) {
    throw std::invalid_argument("interpolate: results were inverted against a different store");
  }
  if (a.strategy != b.strategy || a.w.size() != b.w.size()) {
    throw std::invalid_argument(
        fmt::format("interpolate: strategies differ ({} vs {})", to_string(a.strategy), to_string(b.strategy)));
  }
  auto lerp = [](const Tensor<float>& x, const Tensor<float>& y, double t) {
    if (x.shape() != y.shape()) throw ShapeError("interpolate: shape mismatch");
    Tensor<float> out(x.shape());
    const auto ta = static_cast<float>(1.0 - t), tb = static_cast<float>(t);
    for (std::int64_t i = 0; i < x.size(); ++i) out[i] = ta * x[i] + tb * y[i];
    return out;
  };
  std::vector<Tensor<float>> images;
  for (double t : alphas) {
    InversionResult mid;
    for (std::size_t i = 0; i < a.w.size(); ++i) mid.w.push_back(lerp(a.w[i], b.w[i], t));
    if (a.strategy == Strategy::wrangan) {
      EpsilonVector eps;
      for (const auto& [name, e] : a.epsilon) eps.emplace(name, lerp(e, b.epsilon.at(name), t));
      mid.final_weights = realize_weights(store, eps);
    } else {
      for (const auto& [name, wa] : a.final_weights) mid.final_weights.emplace(name, lerp(wa, b.final_weights.at(name), t));
    }
    images.push_back(render(store.spec(), mid));
  }
  return images;
}

double class_center_separation(const Hyperplane& plane, const std::vector<Tensor<float>>& codes,
                               const std::vector<int>& labels) {
  if (codes.size() != labels.size()) throw std::invalid_argument("class_center_separation: size mismatch");
  double sum[2] = {0, 0};
  int count[2] = {0, 0};
  for (std::size_t i = 0; i < codes.size(); ++i) {
    const int l = labels[i] == 1 ? 1 : 0;
    sum[l] += plane.signed_distance(codes[i]);
    ++count[l];
  }
  if (count[0] == 0 || count[1] == 0) throw std::invalid_argument("class_center_separation: single-class input");
  return std::abs(sum[1] / count[1] - sum[0] / count[0]);
}

double edit_flip_rate(const Hyperplane& plane, const std::vector<Tensor<float>>& codes, double step) {
  if (codes.empty()) throw std::invalid_argument("edit_flip_rate: no codes");
  int flipped = 0;
  for (const auto& c : codes) {
    auto w = c;
    const int side = plane.classify(w);
    const double s = side == 1 ? -step : step;
    for (std::size_t k = 0; k < plane.normal.size(); ++k) w[static_cast<std::int64_t>(k)] += static_cast<float>(s * plane.normal[k]);
    flipped += plane.classify(w) != side;
  }
  return static_cast<double>(flipped) / static_cast<double>(codes.size());
}

double round_trip_flip_rate(const InversionModels& models, const Hyperplane& plane,
                            const std::vector<Tensor<float>>& codes, double step) {
  if (codes.empty()) throw std::invalid_argument("round_trip_flip_rate: no codes");
  const auto& spec = models.spec;
  const auto weights = models.store.mean_weights();
  constexpr std::size_t kChunk = 32;
  int flipped = 0;
  for (std::size_t start = 0; start < codes.size(); start += kChunk) {
    const auto end = std::min(codes.size(), start + kChunk);
    std::vector<Tensor<float>> moved;
    std::vector<int> before;
    for (std::size_t i = start; i < end; ++i) {
      auto w = codes[i].reshaped({1, spec.w_dim});
      const int side = plane.classify(w);
      const double s = side == 1 ? -step : step;
      for (int k = 0; k < spec.w_dim; ++k) w[k] += static_cast<float>(s * plane.normal[static_cast<std::size_t>(k)]);
      moved.push_back(w);
      before.push_back(side);
    }
    const auto images = synthesize(spec, weights, stack_batch(moved));
    const auto back = map_latent(spec, weights, encode(models.encoder, images));
    for (std::size_t j = 0; j < before.size(); ++j) {
      flipped += plane.classify(batch_item(back, static_cast<std::int64_t>(j)).reshaped({spec.w_dim})) != before[j];
    }
  }
  return static_cast<double>(flipped) / static_cast<double>(codes.size());
}

}  // namespace wrangan
