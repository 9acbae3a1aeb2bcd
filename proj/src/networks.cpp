#include "wrangan/networks.hpp"

#include <cmath>

#include <fmt/format.h>

namespace wrangan {

namespace {

constexpr float kLeak = 0.2f;
constexpr int kDiscChannels[] = {16, 32, 64, 64};
constexpr int kPercepChannels[] = {16, 32, 64};

template <class T>
const Var<T>& need(const VarMap<T>& p, const std::string& name) {
  auto it = p.find(name);
  if (it == p.end()) throw std::out_of_range(fmt::format("networks: missing parameter '{}'", name));
  return it->second;
}

template <class T>
T inv_sqrt(std::int64_t fan_in) {
  return T(1) / std::sqrt(static_cast<T>(fan_in));
}

// Equalized-learning-rate dense layer: x [B, in] @ W [in, out] / sqrt(in) + b.
template <class T>
Var<T> dense(const VarMap<T>& p, const std::string& prefix, const Var<T>& x) {
  const auto& w = need(p, prefix + ".weight");
  auto y = ops::matmul(x, ops::mul_scalar(w, inv_sqrt<T>(w.value().dim(0))));
  return ops::add_bias(y, need(p, prefix + ".bias"));
}

template <class T>
Var<T> conv(const VarMap<T>& p, const std::string& prefix, const Var<T>& x, int stride, int padding) {
  const auto& w = need(p, prefix + ".weight");
  const auto fan_in = w.value().dim(1) * w.value().dim(2) * w.value().dim(3);
  auto y = ops::conv2d(x, ops::mul_scalar(w, inv_sqrt<T>(fan_in)), stride, padding);
  return ops::add_bias(y, need(p, prefix + ".bias"));
}

template <class T>
Var<T> trunk(const VarMap<T>& p, const std::string& prefix, const Var<T>& x) {
  if (x.value().rank() != 4 || x.value().dim(1) != kImageChannels || x.value().dim(2) != 32 || x.value().dim(3) != 32) {
    throw ShapeError(fmt::format("{}: expected [B,3,32,32] input, got {}", prefix, to_string(x.shape())));
  }
  Var<T> h = x;
  for (int i = 0; i < 4; ++i) {
    h = ops::leaky_relu(conv(p, fmt::format("{}.conv{}", prefix, i + 1), h, 2, 1), T(kLeak));
  }
  const auto b = h.value().dim(0);
  return ops::reshape(h, Shape{b, h.value().size() / b});
}

void add_dense(ParamMap<float>& p, const std::string& prefix, int in, int out, Rng& rng, float bias = 0.0f) {
  p.emplace(prefix + ".weight", rng.normal_tensor<float>(Shape{in, out}));
  p.emplace(prefix + ".bias", Tensor<float>(Shape{out}, bias));
}

void add_conv(ParamMap<float>& p, const std::string& prefix, int in, int out, int k, Rng& rng) {
  p.emplace(prefix + ".weight", rng.normal_tensor<float>(Shape{out, in, k, k}));
  p.emplace(prefix + ".bias", Tensor<float>(Shape{out}, 0.0f));
}

}  // namespace

void GeneratorSpec::validate() const {
  if (z_dim <= 0 || w_dim <= 0) throw std::invalid_argument("generator: latent dimensions must be positive");
  if (channels.empty()) throw std::invalid_argument("generator: channel list is empty");
  for (int c : channels) {
    if (c <= 0) throw std::invalid_argument("generator: channel counts must be positive");
  }
  if (base_resolution << (channels.size() - 1) != final_resolution) {
    throw std::invalid_argument(fmt::format("generator: {} resolutions from {} do not reach {}", channels.size(),
                                            base_resolution, final_resolution));
  }
  if (conv_layers_per_resolution < 1) throw std::invalid_argument("generator: need >= 1 conv per resolution");
  if (n_randomized < 0 || n_randomized > num_conv_layers()) {
    throw std::invalid_argument(
        fmt::format("generator: n_randomized {} outside [0, {}]", n_randomized, num_conv_layers()));
  }
}

std::vector<ConvLayerInfo> synthesis_layers(const GeneratorSpec& spec) {
  std::vector<ConvLayerInfo> out;
  int in = spec.channels.front();
  int res = spec.base_resolution;
  for (std::size_t r = 0; r < spec.channels.size(); ++r) {
    for (int j = 0; j < spec.conv_layers_per_resolution; ++j) {
      ConvLayerInfo info;
      info.index = static_cast<int>(out.size()) + 1;
      info.name = fmt::format("syn.conv{}", info.index);
      info.in_channels = in;
      info.out_channels = spec.channels[r];
      info.upsample = (r > 0 && j == 0);
      if (info.upsample) res *= 2;
      info.resolution = res;
      in = info.out_channels;
      out.push_back(info);
    }
  }
  return out;
}

std::vector<std::string> last_layer_names(const GeneratorSpec& spec, int n) {
  const auto layers = synthesis_layers(spec);
  if (n < 0 || n > static_cast<int>(layers.size())) {
    throw std::invalid_argument(fmt::format("last_layer_names: n={} outside [0, {}]", n, layers.size()));
  }
  std::vector<std::string> names;
  for (std::size_t i = layers.size() - static_cast<std::size_t>(n); i < layers.size(); ++i) names.push_back(layers[i].name);
  return names;
}

std::vector<std::string> last_layer_param_names(const GeneratorSpec& spec, int n) {
  std::vector<std::string> names;
  for (const auto& layer : last_layer_names(spec, n)) {
    names.push_back(layer + ".weight");
    names.push_back(layer + ".bias");
  }
  return names;
}

std::string layer_of(const std::string& param_name) {
  const auto dot = param_name.rfind('.');
  return dot == std::string::npos ? param_name : param_name.substr(0, dot);
}

template <class T>
VarMap<T> bind_params(Tape<T>& tape, const ParamMap<T>& params, const std::set<std::string>& trainable) {
  VarMap<T> out;
  for (const auto& [name, t] : params) {
    out.emplace(name, trainable.count(name) ? tape.leaf(t) : tape.constant(t));
  }
  return out;
}

template <class T>
VarMap<T> bind_constants(Tape<T>& tape, const ParamMap<T>& params) {
  return bind_params(tape, params, {});
}

template <class T>
VarMap<T> bind_leaves(Tape<T>& tape, const ParamMap<T>& params) {
  VarMap<T> out;
  for (const auto& [name, t] : params) out.emplace(name, tape.leaf(t));
  return out;
}

template <class T>
ParamMap<T> gradients_by_name(const VarMap<T>& vars, const Gradients<T>& grads) {
  ParamMap<T> out;
  for (const auto& [name, v] : vars) {
    if (grads.contains(v)) out.emplace(name, grads[v]);
  }
  return out;
}

ParamMap<float> init_generator(const GeneratorSpec& spec, Rng& rng) {
  spec.validate();
  ParamMap<float> p;
  add_dense(p, "map.fc1", spec.z_dim, spec.w_dim, rng);
  add_dense(p, "map.fc2", spec.w_dim, spec.w_dim, rng);
  const int r0 = spec.base_resolution;
  p.emplace("syn.const", rng.normal_tensor<float>(Shape{1, spec.channels.front(), r0, r0}));
  for (const auto& layer : synthesis_layers(spec)) {
    add_conv(p, layer.name, layer.in_channels, layer.out_channels, 3, rng);
    add_dense(p, layer.name + ".affine", spec.w_dim, layer.in_channels, rng, 1.0f);
  }
  const int last = spec.channels.back();
  add_conv(p, "syn.torgb", last, kImageChannels, 1, rng);
  add_dense(p, "syn.torgb.affine", spec.w_dim, last, rng, 1.0f);
  return p;
}

ParamMap<float> init_discriminator(Rng& rng) {
  ParamMap<float> p;
  int in = kImageChannels;
  for (int i = 0; i < 4; ++i) {
    add_conv(p, fmt::format("disc.conv{}", i + 1), in, kDiscChannels[i], 3, rng);
    in = kDiscChannels[i];
  }
  add_dense(p, "disc.fc", in * 2 * 2, 1, rng);
  return p;
}

ParamMap<float> init_encoder(const GeneratorSpec& spec, Rng& rng) {
  ParamMap<float> p;
  int in = kImageChannels;
  for (int i = 0; i < 4; ++i) {
    add_conv(p, fmt::format("enc.conv{}", i + 1), in, kDiscChannels[i], 3, rng);
    in = kDiscChannels[i];
  }
  add_dense(p, "enc.fc", in * 2 * 2, spec.z_dim, rng);
  return p;
}

ParamMap<float> init_perceptual(std::uint64_t feature_seed) {
  Rng rng(feature_seed, "perceptual-net");
  ParamMap<float> p;
  int in = kImageChannels;
  for (int i = 0; i < 3; ++i) {
    add_conv(p, fmt::format("percep.conv{}", i + 1), in, kPercepChannels[i], 3, rng);
    in = kPercepChannels[i];
  }
  return p;
}

template <class T>
Var<T> map_latent(const GeneratorSpec& spec, const VarMap<T>& p, const Var<T>& z) {
  if (z.value().rank() != 2 || z.value().dim(1) != spec.z_dim) {
    throw ShapeError(fmt::format("map_latent: expected [B,{}] codes, got {}", spec.z_dim, to_string(z.shape())));
  }
  auto h = ops::leaky_relu(dense(p, "map.fc1", z), T(kLeak));
  return ops::leaky_relu(dense(p, "map.fc2", h), T(kLeak));
}

template <class T>
Var<T> synthesize(const GeneratorSpec& spec, const VarMap<T>& p, const std::vector<Var<T>>& styles,
                  const SynthesisOptions& options) {
  const auto layers = synthesis_layers(spec);
  const std::size_t n_styles = layers.size() + 1;
  if (styles.size() != 1 && styles.size() != n_styles) {
    throw ShapeError(fmt::format("synthesize: need 1 or {} style codes, got {}", n_styles, styles.size()));
  }
  const auto style_at = [&](std::size_t i) -> const Var<T>& { return styles.size() == 1 ? styles[0] : styles[i]; };
  const auto bsz = styles[0].value().dim(0);
  for (const auto& s : styles) {
    if (s.value().rank() != 2 || s.value().dim(0) != bsz || s.value().dim(1) != spec.w_dim) {
      throw ShapeError(fmt::format("synthesize: expected [{},{}] style, got {}", bsz, spec.w_dim, to_string(s.shape())));
    }
  }

  auto& tape = styles[0].tape();
  const auto& c = need(p, "syn.const");
  Var<T> x = bsz == 1 ? c : ops::concat(std::vector<Var<T>>(static_cast<std::size_t>(bsz), c), 0);

  const auto modulation = [&](const std::string& prefix, const Var<T>& style, std::int64_t in_ch) {
    if (options.modulate) return dense(p, prefix + ".affine", style);
    return tape.constant(Tensor<T>(Shape{bsz, in_ch}, T(1)));
  };

  for (std::size_t li = 0; li < layers.size(); ++li) {
    const auto& layer = layers[li];
    if (layer.upsample) x = ops::upsample_nearest2x(x);
    const auto& w = need(p, layer.name + ".weight");
    auto weff = ops::mul_scalar(w, inv_sqrt<T>(static_cast<std::int64_t>(layer.in_channels) * 9));
    auto s = modulation(layer.name, style_at(li), layer.in_channels);
    auto y = ops::conv2d(ops::scale_channels(x, s), weff, 1, 1);
    if (options.demodulate) {
      auto wsq = ops::sum_dim(ops::reshape(ops::square(weff), Shape{layer.out_channels, layer.in_channels, 9}), 2);
      auto energy = ops::matmul(ops::square(s), ops::transpose(wsq));
      y = ops::scale_channels(y, ops::rsqrt(ops::add_scalar(energy, T(1e-8))));
    }
    x = ops::leaky_relu(ops::add_bias(y, need(p, layer.name + ".bias")), T(kLeak));
  }

  const auto& wrgb = need(p, "syn.torgb.weight");
  auto weff = ops::mul_scalar(wrgb, inv_sqrt<T>(wrgb.value().dim(1)));
  auto s = modulation("syn.torgb", style_at(layers.size()), wrgb.value().dim(1));
  auto rgb = ops::conv2d(ops::scale_channels(x, s), weff, 1, 0);
  return ops::add_bias(rgb, need(p, "syn.torgb.bias"));
}

template <class T>
Var<T> synthesize(const GeneratorSpec& spec, const VarMap<T>& p, const Var<T>& w, const SynthesisOptions& options) {
  return synthesize(spec, p, std::vector<Var<T>>{w}, options);
}

template <class T>
Var<T> discriminate(const VarMap<T>& p, const Var<T>& x) {
  return dense(p, "disc.fc", trunk(p, "disc", x));
}

template <class T>
Var<T> encode(const VarMap<T>& p, const Var<T>& x) {
  return dense(p, "enc.fc", trunk(p, "enc", x));
}

template <class T>
std::vector<Var<T>> perceptual_features(const VarMap<T>& p, const Var<T>& x) {
  if (x.value().rank() != 4 || x.value().dim(1) != kImageChannels) {
    throw ShapeError(fmt::format("perceptual_features: expected [B,3,H,W], got {}", to_string(x.shape())));
  }
  std::vector<Var<T>> feats;
  Var<T> h = x;
  for (int i = 0; i < 3; ++i) {
    h = ops::leaky_relu(conv(p, fmt::format("percep.conv{}", i + 1), h, i == 0 ? 1 : 2, 1), T(kLeak));
    feats.push_back(h);
  }
  return feats;
}

template <class T>
std::vector<Var<T>> normalized_features(const VarMap<T>& p, const Var<T>& x) {
  auto feats = perceptual_features(p, x);
  for (auto& f : feats) f = ops::channel_normalize(f, T(1e-10));
  return feats;
}

template <class T>
Var<T> perceptual_distance_to(const VarMap<T>& p, const Var<T>& a, const std::vector<Var<T>>& target_normalized) {
  auto fa = normalized_features(p, a);
  if (fa.size() != target_normalized.size()) throw ShapeError("perceptual_distance: stage count mismatch");
  const auto bsz = static_cast<T>(a.value().dim(0));
  Var<T> total;
  for (std::size_t i = 0; i < fa.size(); ++i) {
    const auto& f = fa[i].value();
    // sum over channels, mean over space and batch
    const T scale = T(1) / (static_cast<T>(f.dim(2) * f.dim(3)) * bsz);
    auto term = ops::mul_scalar(ops::sum_squares(ops::sub(fa[i], target_normalized[i])), scale);
    total = total.valid() ? ops::add(total, term) : term;
  }
  return total;
}

template <class T>
Var<T> perceptual_distance(const VarMap<T>& p, const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(fmt::format("perceptual_distance: shape mismatch {} vs {}", to_string(a.shape()), to_string(b.shape())));
  }
  return perceptual_distance_to(p, a, normalized_features(p, b));
}

template <class T>
Var<T> pooled_features(const VarMap<T>& p, const Var<T>& x) {
  return ops::global_avg_pool(perceptual_features(p, x).back());
}

Tensor<float> map_latent(const GeneratorSpec& spec, const ParamMap<float>& gen, const Tensor<float>& z) {
  Tape<float> tape;
  auto p = bind_constants(tape, gen);
  return map_latent(spec, p, tape.constant(z)).value();
}

Tensor<float> synthesize(const GeneratorSpec& spec, const ParamMap<float>& gen, const Tensor<float>& w,
                         const SynthesisOptions& options) {
  Tape<float> tape;
  auto p = bind_constants(tape, gen);
  return synthesize(spec, p, tape.constant(w), options).value();
}

Tensor<float> discriminate(const ParamMap<float>& disc, const Tensor<float>& x) {
  Tape<float> tape;
  auto p = bind_constants(tape, disc);
  return discriminate(p, tape.constant(x)).value();
}

Tensor<float> encode(const ParamMap<float>& enc, const Tensor<float>& x) {
  Tape<float> tape;
  auto p = bind_constants(tape, enc);
  return encode(p, tape.constant(x)).value();
}

Tensor<float> pooled_features(const ParamMap<float>& percep, const Tensor<float>& x) {
  Tape<float> tape;
  auto p = bind_constants(tape, percep);
  return pooled_features(p, tape.constant(x)).value();
}

float perceptual_distance(const ParamMap<float>& percep, const Tensor<float>& a, const Tensor<float>& b) {
  Tape<float> tape;
  auto p = bind_constants(tape, percep);
  return perceptual_distance(p, tape.constant(a), tape.constant(b)).value().item();
}

Tensor<float> batch_item(const Tensor<float>& batch, std::int64_t index) {
  if (batch.rank() < 2 || index < 0 || index >= batch.dim(0)) {
    throw ShapeError(fmt::format("batch_item: index {} outside batch {}", index, to_string(batch.shape())));
  }
  Shape s = batch.shape();
  s[0] = 1;
  const auto n = numel(s);
  std::vector<float> data(batch.ptr() + index * n, batch.ptr() + (index + 1) * n);
  return Tensor<float>(std::move(s), std::move(data));
}

Tensor<float> stack_batch(const std::vector<Tensor<float>>& items) {
  if (items.empty()) throw ShapeError("stack_batch: no items");
  Shape item_shape = items.front().shape();
  if (item_shape.size() > 1 && item_shape[0] == 1) item_shape.erase(item_shape.begin());
  std::vector<float> data;
  data.reserve(static_cast<std::size_t>(numel(item_shape)) * items.size());
  for (const auto& t : items) {
    if (t.size() != numel(item_shape)) throw ShapeError("stack_batch: items differ in size");
    data.insert(data.end(), t.data().begin(), t.data().end());
  }
  Shape s{static_cast<std::int64_t>(items.size())};
  s.insert(s.end(), item_shape.begin(), item_shape.end());
  return Tensor<float>(std::move(s), std::move(data));
}

std::int64_t parameter_count(const ParamMap<float>& params) {
  std::int64_t n = 0;
  for (const auto& [name, t] : params) n += t.size();
  return n;
}

#define WRANGAN_INSTANTIATE_NETWORKS(T)                                                                         \
  template VarMap<T> bind_params(Tape<T>&, const ParamMap<T>&, const std::set<std::string>&);                  \
  template VarMap<T> bind_constants(Tape<T>&, const ParamMap<T>&);                                             \
  template VarMap<T> bind_leaves(Tape<T>&, const ParamMap<T>&);                                                \
  template ParamMap<T> gradients_by_name(const VarMap<T>&, const Gradients<T>&);                               \
  template Var<T> map_latent(const GeneratorSpec&, const VarMap<T>&, const Var<T>&);                           \
  template Var<T> synthesize(const GeneratorSpec&, const VarMap<T>&, const std::vector<Var<T>>&,               \
                             const SynthesisOptions&);                                                         \
  template Var<T> synthesize(const GeneratorSpec&, const VarMap<T>&, const Var<T>&, const SynthesisOptions&);  \
  template Var<T> discriminate(const VarMap<T>&, const Var<T>&);                                               \
  template Var<T> encode(const VarMap<T>&, const Var<T>&);                                                     \
  template std::vector<Var<T>> perceptual_features(const VarMap<T>&, const Var<T>&);                          \
  template std::vector<Var<T>> normalized_features(const VarMap<T>&, const Var<T>&);                          \
  template Var<T> perceptual_distance(const VarMap<T>&, const Var<T>&, const Var<T>&);                         \
  template Var<T> perceptual_distance_to(const VarMap<T>&, const Var<T>&, const std::vector<Var<T>>&);         \
  template Var<T> pooled_features(const VarMap<T>&, const Var<T>&);

WRANGAN_INSTANTIATE_NETWORKS(float)
WRANGAN_INSTANTIATE_NETWORKS(double)

#undef WRANGAN_INSTANTIATE_NETWORKS

}  // namespace wrangan
