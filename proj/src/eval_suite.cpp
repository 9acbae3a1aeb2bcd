#include "wrangan/eval_suite.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <limits>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "wrangan/log.hpp"

namespace wrangan {

namespace fs = std::filesystem;

void parallel_for(int n, int jobs, const std::function<void(int)>& fn) {
  if (n <= 0) return;
  jobs = std::clamp(jobs, 1, n);
  if (jobs == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::thread> workers;
  for (int j = 0; j < jobs; ++j) {
    workers.emplace_back([&] {
      for (int i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  }
  for (auto& w : workers) w.join();
  if (first_error) std::rethrow_exception(first_error);
}

namespace {

constexpr int kFeatureBatch = 32;

void append_features(const ParamMap<float>& percep, const Tensor<float>& batch, std::vector<double>& out) {
  const auto f = pooled_features(percep, batch);
  for (float v : f.data()) out.push_back(v);
}

Tensor<double> to_feature_tensor(std::vector<double> values) {
  const auto n = static_cast<std::int64_t>(values.size()) / kFeatureDim;
  Tensor<double> t({n, kFeatureDim});
  std::copy(values.begin(), values.end(), t.data().begin());
  return t;
}

// Paired draws: z for sample i and its unit direction.
struct LatentDraws {
  Tensor<float> z;
  Tensor<float> directions;
};

LatentDraws corruption_draws(const CorruptionSetup& s) {
  Rng zr(s.seed, "corruption/z");
  Rng dr(s.seed, "corruption/direction");
  LatentDraws d{zr.normal_tensor<float>({s.n_images, s.spec.z_dim}), Tensor<float>({s.n_images, s.spec.w_dim})};
  for (std::int64_t i = 0; i < s.n_images; ++i) {
    std::vector<double> v(static_cast<std::size_t>(s.spec.w_dim));
    double norm = 0;
    while (norm < 1e-12) {
      norm = 0;
      for (auto& x : v) {
        x = dr.normal();
        norm += x * x;
      }
    }
    norm = std::sqrt(norm);
    for (int k = 0; k < s.spec.w_dim; ++k) {
      d.directions[i * s.spec.w_dim + k] = static_cast<float>(v[static_cast<std::size_t>(k)] / norm);
    }
  }
  return d;
}

DistributionDistance shifted_distance(const CorruptionSetup& s, const ParamMap<float>& weights, double shift) {
  if (s.n_images <= kFeatureDim) {
    throw std::invalid_argument(fmt::format("corruption set needs more than {} images, got {}", kFeatureDim, s.n_images));
  }
  const auto draws = corruption_draws(s);
  const int wd = s.spec.w_dim;
  const double scale = shift * s.style_scale;
  std::vector<double> feats;
  feats.reserve(static_cast<std::size_t>(s.n_images) * kFeatureDim);
  for (int start = 0; start < s.n_images; start += kFeatureBatch) {
    const int b = std::min(kFeatureBatch, s.n_images - start);
    Tensor<float> z({b, s.spec.z_dim});
    std::copy_n(draws.z.data().begin() + static_cast<std::ptrdiff_t>(start) * s.spec.z_dim, z.size(), z.data().begin());
    auto w = map_latent(s.spec, s.base_weights, z);
    if (scale != 0) {
      for (std::int64_t i = 0; i < w.size(); ++i) {
        w[i] += static_cast<float>(scale * draws.directions[static_cast<std::int64_t>(start) * wd + i]);
      }
    }
    append_features(s.percep, synthesize(s.spec, weights, w), feats);
  }
  const auto gen = to_feature_tensor(std::move(feats));
  return {frechet_distance(s.reference, gen), kernel_distance(s.reference, gen)};
}

std::string csv_real(double v) { return std::isnan(v) ? std::string() : fmt_real(v); }

}  // namespace

Tensor<double> image_features(const ParamMap<float>& percep, const std::vector<Tensor<float>>& images) {
  std::vector<double> feats;
  feats.reserve(images.size() * kFeatureDim);
  for (std::size_t start = 0; start < images.size(); start += kFeatureBatch) {
    const auto end = std::min(images.size(), start + kFeatureBatch);
    std::vector<Tensor<float>> chunk(images.begin() + static_cast<std::ptrdiff_t>(start),
                                     images.begin() + static_cast<std::ptrdiff_t>(end));
    append_features(percep, stack_batch(chunk), feats);
  }
  return to_feature_tensor(std::move(feats));
}

double characteristic_style_scale(const GeneratorSpec& spec, const ParamMap<float>& mapping, int n_samples,
                                  std::uint64_t seed) {
  if (n_samples < 2) throw std::invalid_argument("characteristic_style_scale: need at least 2 samples");
  Rng rng(seed, "style-scale");
  const int wd = spec.w_dim;
  std::vector<double> sum(static_cast<std::size_t>(wd)), sum_sq(static_cast<std::size_t>(wd));
  constexpr int kChunk = 256;
  for (int start = 0; start < n_samples; start += kChunk) {
    const int b = std::min(kChunk, n_samples - start);
    const auto w = map_latent(spec, mapping, rng.normal_tensor<float>({b, spec.z_dim}));
    for (int i = 0; i < b; ++i) {
      for (int k = 0; k < wd; ++k) {
        const double v = w[static_cast<std::int64_t>(i) * wd + k];
        sum[static_cast<std::size_t>(k)] += v;
        sum_sq[static_cast<std::size_t>(k)] += v * v;
      }
    }
  }
  double total = 0;
  const double n = n_samples;
  for (int k = 0; k < wd; ++k) {
    const double mean = sum[static_cast<std::size_t>(k)] / n;
    const double var = std::max(0.0, (sum_sq[static_cast<std::size_t>(k)] - n * mean * mean) / (n - 1));
    total += std::sqrt(var);
  }
  return total / wd;
}

DistributionDistance corruption_fid(const CorruptionSetup& setup, const ParamMap<float>& tuned) {
  return shifted_distance(setup, tuned, setup.shift_scale);
}

DistributionDistance generation_fid(const CorruptionSetup& setup, const ParamMap<float>& weights) {
  return shifted_distance(setup, weights, 0.0);
}

CompareOutput strategy_compare(const std::vector<Tensor<float>>& images, const std::vector<std::string>& ids,
                               const InversionModels& models, const std::vector<InversionConfig>& configs,
                               const CorruptionSetup& corruption, const CompareOptions& options) {
  if (ids.size() != images.size()) throw std::invalid_argument("strategy_compare: ids and images differ in length");
  if (configs.size() != options.strategies.size()) {
    throw std::invalid_argument("strategy_compare: one config per strategy expected");
  }
  const int n_img = static_cast<int>(images.size());
  const int n_str = static_cast<int>(options.strategies.size());
  CompareOutput out;
  out.rows.resize(static_cast<std::size_t>(n_img * n_str));
  std::vector<EpsilonVector> eps(images.size());
  std::vector<char> has_eps(images.size(), 0);

  // latent-only strategies keep the mean weights, so their corruption
  // distance is shared by every image
  DistributionDistance mean_distance{std::nan(""), std::nan("")};
  const bool any_latent = std::any_of(options.strategies.begin(), options.strategies.end(), [](Strategy s) {
    return s == Strategy::w_only || s == Strategy::w_plus;
  });
  if (any_latent && options.corruption_images > 0 && n_img > 0) {
    mean_distance = corruption_fid(corruption, models.store.mean_weights());
  }

  parallel_for(n_img * n_str, options.jobs, [&](int task) {
    const int i = task / n_str;
    const int s = task % n_str;
    auto& row = out.rows[static_cast<std::size_t>(task)];
    row.image_id = ids[static_cast<std::size_t>(i)];
    row.strategy = options.strategies[static_cast<std::size_t>(s)];
    auto cfg = configs[static_cast<std::size_t>(s)];
    cfg.strategy = row.strategy;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      auto r = invert(images[static_cast<std::size_t>(i)], models, cfg);
      row.mse = r.mse;
      row.perceptual = r.perceptual;
      row.ms_ssim = r.ms_ssim;
      row.optimized_params = r.optimized_params;
      row.best_iteration = r.best_iteration;
      if (i < options.corruption_images) {
        if (row.strategy == Strategy::w_only || row.strategy == Strategy::w_plus) {
          row.corruption_fid = mean_distance.fid;
          row.corruption_kid = mean_distance.kid;
        } else {
          const auto d = corruption_fid(corruption, r.final_weights);
          row.corruption_fid = d.fid;
          row.corruption_kid = d.kid;
        }
      }
      if (row.strategy == Strategy::wrangan) {
        eps[static_cast<std::size_t>(i)] = std::move(r.epsilon);
        has_eps[static_cast<std::size_t>(i)] = 1;
      }
    } catch (const std::exception& e) {
      row.status = fmt::format("error: {}", e.what());
      row.mse = row.perceptual = row.ms_ssim = std::nan("");
      log::warn(fmt::format("{} on {} aborted: {}", to_string(row.strategy), row.image_id, e.what()));
    }
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  });
  for (std::size_t i = 0; i < eps.size(); ++i) {
    if (has_eps[i]) out.wrangan_epsilon.push_back(std::move(eps[i]));
  }
  return out;
}

void write_compare_csv(const fs::path& path, const std::vector<CompareRow>& rows) {
  std::ostringstream o;
  o << "image_id,strategy,mse,perceptual,ms_ssim,corruption_fid,corruption_kid,optimized_params,best_iteration,"
       "status\n";
  for (const auto& r : rows) {
    std::string status = r.status;
    std::replace(status.begin(), status.end(), ',', ';');
    std::replace(status.begin(), status.end(), '\n', ' ');
    o << r.image_id << ',' << to_string(r.strategy) << ',' << csv_real(r.mse) << ',' << csv_real(r.perceptual) << ','
      << csv_real(r.ms_ssim) << ',' << csv_real(r.corruption_fid) << ',' << csv_real(r.corruption_kid) << ','
      << r.optimized_params << ',' << r.best_iteration << ',' << status << '\n';
  }
  write_text(path, o.str());
}

void write_compare_wide_csv(const fs::path& path, const std::vector<CompareRow>& rows) {
  std::vector<Strategy> strategies;
  std::vector<std::string> images;
  std::map<std::pair<std::string, Strategy>, double> value;
  for (const auto& r : rows) {
    if (std::find(strategies.begin(), strategies.end(), r.strategy) == strategies.end()) strategies.push_back(r.strategy);
    if (std::find(images.begin(), images.end(), r.image_id) == images.end()) images.push_back(r.image_id);
    value[{r.image_id, r.strategy}] = r.mse;
  }
  std::ostringstream o;
  o << "image_id";
  for (auto s : strategies) o << ",mse_" << to_string(s);
  o << '\n';
  for (const auto& id : images) {
    o << id;
    for (auto s : strategies) {
      auto it = value.find({id, s});
      o << ',' << (it == value.end() ? std::string() : csv_real(it->second));
    }
    o << '\n';
  }
  write_text(path, o.str());
}

void write_timing_csv(const fs::path& path, const std::vector<CompareRow>& rows) {
  std::ostringstream o;
  o << "image_id,strategy,seconds\n";
  for (const auto& r : rows) o << r.image_id << ',' << to_string(r.strategy) << ',' << fmt_real(r.seconds) << '\n';
  write_text(path, o.str());
}

std::vector<GridRow> layer_grid(const std::vector<Tensor<float>>& images, const InversionModels& models,
                                const std::vector<int>& n_values, const std::vector<double>& alpha_values,
                                const InversionConfig& base_config, int jobs) {
  if (images.empty()) throw std::invalid_argument("layer_grid: no images");
  const auto theta0 = models.store.mean_weights();
  const int n_layers = models.spec.num_conv_layers();
  std::vector<GridRow> rows;
  for (int n : n_values) {
    if (n < 1 || n > n_layers) {
      throw std::invalid_argument(fmt::format("layer_grid: N must be in [1, {}], got {}", n_layers, n));
    }
    for (double a : alpha_values) {
      if (!(a >= 0) || !std::isfinite(a)) throw std::invalid_argument(fmt::format("layer_grid: bad alpha {}", a));
    }
  }
  for (int n : n_values) {
    InversionModels m = models;
    m.spec.n_randomized = n;
    m.store = RandomizedParamStore::from_generator(m.spec, theta0);
    const auto counts = count_params(m.store);
    for (double a : alpha_values) {
      auto cfg = base_config;
      cfg.strategy = Strategy::simple_tune;
      cfg.alpha_reg = a;
      std::vector<double> mses(images.size());
      parallel_for(static_cast<int>(images.size()), jobs,
                   [&](int i) { mses[static_cast<std::size_t>(i)] = invert(images[static_cast<std::size_t>(i)], m, cfg).mse; });
      GridRow row;
      row.n_randomized = n;
      row.alpha = a;
      row.images = static_cast<int>(images.size());
      double sum = 0;
      for (double v : mses) sum += v;
      row.mean_mse = sum / static_cast<double>(mses.size());
      row.randomized_params = counts.randomized;
      row.relative_increase = counts.relative_increase;
      rows.push_back(row);
    }
  }
  return rows;
}

void write_grid_csv(const fs::path& path, const std::vector<GridRow>& rows) {
  std::ostringstream o;
  o << "n_randomized,alpha,mean_mse,images,randomized_params,relative_memory_increase\n";
  for (const auto& r : rows) {
    o << r.n_randomized << ',' << fmt_real(r.alpha) << ',' << fmt_real(r.mean_mse) << ',' << r.images << ','
      << r.randomized_params << ',' << fmt_real(r.relative_increase) << '\n';
  }
  write_text(path, o.str());
}

std::vector<VarianceLayer> variance_histogram(const RandomizedParamStore& store) {
  std::vector<double> edges;
  for (int k = -12; k <= 2; ++k) edges.push_back(0.5 * k);  // log10 sigma from -6 to 1
  std::vector<VarianceLayer> out;
  for (const auto& layer : store.layer_names()) {
    VarianceLayer v;
    v.layer = layer;
    v.bin_edges = edges;
    v.counts.assign(edges.size() - 1, 0);
    v.min_sigma = std::numeric_limits<double>::infinity();
    v.max_sigma = 0;
    double sum = 0;
    std::int64_t small = 0;
    for (const auto& e : store.entries()) {
      if (layer_of(e.name) != layer) continue;
      for (float ls : e.log_sigma.data()) {
        const double s = std::exp(static_cast<double>(ls));
        ++v.n_params;
        sum += s;
        if (s < kSmallSigma) ++small;
        v.min_sigma = std::min(v.min_sigma, s);
        v.max_sigma = std::max(v.max_sigma, s);
        // out-of-range values land in the end bins
        const double l = std::log10(s);
        auto bin = static_cast<std::ptrdiff_t>(std::floor((l - edges.front()) / 0.5));
        bin = std::clamp<std::ptrdiff_t>(bin, 0, static_cast<std::ptrdiff_t>(v.counts.size()) - 1);
        ++v.counts[static_cast<std::size_t>(bin)];
      }
    }
    if (v.n_params > 0) {
      v.mean_sigma = sum / static_cast<double>(v.n_params);
      v.frac_small = static_cast<double>(small) / static_cast<double>(v.n_params);
    }
    out.push_back(std::move(v));
  }
  return out;
}

void write_variance_csv(const fs::path& hist_path, const fs::path& summary_path,
                        const std::vector<VarianceLayer>& layers) {
  std::ostringstream h;
  h << "layer,log10_sigma_lo,log10_sigma_hi,count\n";
  for (const auto& l : layers) {
    for (std::size_t b = 0; b < l.counts.size(); ++b) {
      h << l.layer << ',' << fmt_real(l.bin_edges[b]) << ',' << fmt_real(l.bin_edges[b + 1]) << ',' << l.counts[b]
        << '\n';
    }
  }
  write_text(hist_path, h.str());
  std::ostringstream s;
  s << "layer,n_params,frac_sigma_below_1e-3,mean_sigma,min_sigma,max_sigma\n";
  for (const auto& l : layers) {
    s << l.layer << ',' << l.n_params << ',' << fmt_real(l.frac_small) << ',' << fmt_real(l.mean_sigma) << ','
      << fmt_real(l.min_sigma) << ',' << fmt_real(l.max_sigma) << '\n';
  }
  write_text(summary_path, s.str());
}

std::vector<InfluenceRow> layer_influence(const RandomizedParamStore& store, int n_samples, std::uint64_t seed) {
  if (n_samples < 1) throw std::invalid_argument("layer_influence: need at least one sample");
  const auto& spec = store.spec();
  const auto mean = store.mean_weights();
  std::vector<InfluenceRow> out;
  for (const auto& layer : store.layer_names()) {
    Rng rng(seed, "influence/" + layer);
    double sum = 0;
    for (int k = 0; k < n_samples; ++k) {
      const auto z = rng.normal_tensor<float>({1, spec.z_dim});
      auto perturbed = mean;
      for (const auto& e : store.entries()) {
        if (layer_of(e.name) != layer) continue;
        const auto eps = rng.normal_tensor<float>(e.mu.shape());
        const auto sigma = e.sigma();
        auto& t = perturbed.at(e.name);
        for (std::int64_t i = 0; i < t.size(); ++i) t[i] = e.mu[i] + sigma[i] * eps[i];
      }
      const auto w = map_latent(spec, mean, z);
      sum += mse(synthesize(spec, perturbed, w), synthesize(spec, mean, w));
    }
    out.push_back({layer, sum / n_samples});
  }
  return out;
}

void write_influence_csv(const fs::path& path, const std::vector<InfluenceRow>& rows) {
  std::ostringstream o;
  o << "layer,mse\n";
  for (const auto& r : rows) o << r.layer << ',' << fmt_real(r.mse) << '\n';
  write_text(path, o.str());
}

std::vector<EpsilonLayerStats> epsilon_statistics(const RandomizedParamStore& store,
                                                  const std::vector<EpsilonVector>& results) {
  if (results.size() < 5) {
    throw std::invalid_argument(fmt::format("epsilon_statistics: need at least 5 results, got {}", results.size()));
  }
  std::vector<EpsilonLayerStats> out;
  for (const auto& layer : store.layer_names()) {
    EpsilonLayerStats s;
    s.layer = layer;
    long double sum = 0, sum_sq = 0;
    for (const auto& eps : results) {
      for (const auto& e : store.entries()) {
        if (layer_of(e.name) != layer) continue;
        const auto it = eps.find(e.name);
        if (it == eps.end()) throw std::invalid_argument(fmt::format("epsilon_statistics: missing '{}'", e.name));
        for (float v : it->second.data()) {
          sum += v;
          sum_sq += static_cast<long double>(v) * v;
          ++s.n_values;
        }
      }
    }
    const long double n = static_cast<long double>(s.n_values);
    s.mean = static_cast<double>(sum / n);
    s.variance = std::max(0.0, static_cast<double>(sum_sq / n - (sum / n) * (sum / n)));
    s.variance_ratio = s.variance / 1.0;
    out.push_back(s);
  }
  return out;
}

void write_epsilon_csv(const fs::path& path, const std::vector<EpsilonLayerStats>& rows) {
  std::ostringstream o;
  o << "layer,n_values,mean,variance,variance_ratio\n";
  for (const auto& r : rows) {
    o << r.layer << ',' << r.n_values << ',' << fmt_real(r.mean) << ',' << fmt_real(r.variance) << ','
      << fmt_real(r.variance_ratio) << '\n';
  }
  write_text(path, o.str());
}

SignTest paired_sign_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("paired_sign_test: sizes differ");
  SignTest t;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] < b[i]) {
      ++t.n_less;
    } else if (a[i] > b[i]) {
      ++t.n_greater;
    } else {
      ++t.ties;
    }
  }
  // P(X >= n_less) for X ~ Binomial(n, 1/2), summed in log space
  const int n = t.n_less + t.n_greater;
  double p = 0;
  for (int k = t.n_less; k <= n; ++k) {
    p += std::exp(std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) - n * std::log(2.0));
  }
  t.p_value = std::min(1.0, p);
  return t;
}

}  // namespace wrangan
