#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "wrangan/adam.hpp"
#include "wrangan/ops.hpp"
#include "wrangan/rng.hpp"

namespace wrangan {

/// Architecture of the desk-scale style generator.
struct GeneratorSpec {
  int z_dim = 32;
  int w_dim = 32;
  int base_resolution = 4;
  int final_resolution = 32;
  /// Output channels of the conv layers at each resolution, coarsest first.
  std::vector<int> channels = {96, 64, 32, 16};
  int conv_layers_per_resolution = 2;
  int n_randomized = 6;

  int num_conv_layers() const { return static_cast<int>(channels.size()) * conv_layers_per_resolution; }
  void validate() const;
};

/// One synthesis conv layer, 1-based index counted from the constant input.
struct ConvLayerInfo {
  int index = 0;
  std::string name;  // "syn.conv<index>"
  int in_channels = 0;
  int out_channels = 0;
  int resolution = 0;
  bool upsample = false;
};

std::vector<ConvLayerInfo> synthesis_layers(const GeneratorSpec& spec);

/// Weight and bias names of the last `n` synthesis conv layers (toRGB never
/// included), in layer order.
std::vector<std::string> last_layer_param_names(const GeneratorSpec& spec, int n);

/// Layer names ("syn.conv<k>") of the last `n` synthesis conv layers.
std::vector<std::string> last_layer_names(const GeneratorSpec& spec, int n);

/// Parameter name -> owning layer name, e.g. "syn.conv7.bias" -> "syn.conv7".
std::string layer_of(const std::string& param_name);

template <class T>
using VarMap = std::map<std::string, Var<T>>;

/// Puts every parameter on the tape: names in `trainable` become leaves, the
/// rest constants.
template <class T>
VarMap<T> bind_params(Tape<T>& tape, const ParamMap<T>& params, const std::set<std::string>& trainable);
template <class T>
VarMap<T> bind_constants(Tape<T>& tape, const ParamMap<T>& params);
template <class T>
VarMap<T> bind_leaves(Tape<T>& tape, const ParamMap<T>& params);

template <class T>
ParamMap<T> gradients_by_name(const VarMap<T>& vars, const Gradients<T>& grads);

struct SynthesisOptions {
  bool modulate = true;
  bool demodulate = true;
};

// Parameter initialization. Weights are stored unit-variance and scaled by
// 1/sqrt(fan_in) at run time.
ParamMap<float> init_generator(const GeneratorSpec& spec, Rng& rng);
ParamMap<float> init_discriminator(Rng& rng);
ParamMap<float> init_encoder(const GeneratorSpec& spec, Rng& rng);
/// Frozen random feature network; bit-identical for a given seed.
ParamMap<float> init_perceptual(std::uint64_t feature_seed);

/// w = f(z): two dense layers with leaky-ReLU(0.2). z is [B, z_dim].
template <class T>
Var<T> map_latent(const GeneratorSpec& spec, const VarMap<T>& p, const Var<T>& z);

/// Image [B, 3, R, R] from one style code per synthesis layer plus one for
/// toRGB (`styles.size() == num_conv_layers() + 1`), or a single code shared
/// by all layers.
template <class T>
Var<T> synthesize(const GeneratorSpec& spec, const VarMap<T>& p, const std::vector<Var<T>>& styles,
                  const SynthesisOptions& options = {});
template <class T>
Var<T> synthesize(const GeneratorSpec& spec, const VarMap<T>& p, const Var<T>& w, const SynthesisOptions& options = {});

/// Logits [B, 1].
template <class T>
Var<T> discriminate(const VarMap<T>& p, const Var<T>& x);
/// z-space codes [B, z_dim].
template <class T>
Var<T> encode(const VarMap<T>& p, const Var<T>& x);

/// Three feature maps (16, 32, 64 channels) of the frozen feature network.
template <class T>
std::vector<Var<T>> perceptual_features(const VarMap<T>& p, const Var<T>& x);
/// Channel-normalized squared feature difference averaged over space, summed
/// over stages, averaged over the batch. Scalar.
template <class T>
Var<T> perceptual_distance(const VarMap<T>& p, const Var<T>& a, const Var<T>& b);
/// Same distance when the target's features are precomputed constants.
template <class T>
Var<T> perceptual_distance_to(const VarMap<T>& p, const Var<T>& a, const std::vector<Var<T>>& target_normalized);
template <class T>
std::vector<Var<T>> normalized_features(const VarMap<T>& p, const Var<T>& x);
/// Global-average-pooled final stage, [B, 64]; the feature space for the
/// Frechet and kernel distances.
template <class T>
Var<T> pooled_features(const VarMap<T>& p, const Var<T>& x);

inline constexpr int kImageChannels = 3;
inline constexpr int kFeatureDim = 64;

// Tape-free float conveniences.
Tensor<float> map_latent(const GeneratorSpec& spec, const ParamMap<float>& gen, const Tensor<float>& z);
Tensor<float> synthesize(const GeneratorSpec& spec, const ParamMap<float>& gen, const Tensor<float>& w,
                         const SynthesisOptions& options = {});
Tensor<float> discriminate(const ParamMap<float>& disc, const Tensor<float>& x);
Tensor<float> encode(const ParamMap<float>& enc, const Tensor<float>& x);
Tensor<float> pooled_features(const ParamMap<float>& percep, const Tensor<float>& x);
float perceptual_distance(const ParamMap<float>& percep, const Tensor<float>& a, const Tensor<float>& b);

/// Image at batch position `index` of a [B, C, H, W] tensor as [1, C, H, W].
Tensor<float> batch_item(const Tensor<float>& batch, std::int64_t index);
/// Stacks [1, ...] or [...] tensors into a batch.
Tensor<float> stack_batch(const std::vector<Tensor<float>>& items);

/// Total element count of a parameter map.
std::int64_t parameter_count(const ParamMap<float>& params);

}  // namespace wrangan
