#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "wrangan/adam.hpp"
#include "wrangan/rand_param.hpp"

namespace wrangan {

/// Images are [3, 32, 32] tensors in [-1, 1].
struct Dataset {
  std::vector<Tensor<float>> images;
  std::vector<std::string> ids;
  std::vector<std::string> attribute_names;
  std::vector<std::vector<int>> labels;  // one row per image, empty when unlabeled

  std::size_t size() const { return images.size(); }
  /// Column of one attribute; throws when the attribute is unknown.
  std::vector<int> attribute(const std::string& name) const;
  /// [B, 3, 32, 32] batch of the given indices.
  Tensor<float> batch(const std::vector<std::int64_t>& indices) const;
};

inline constexpr int kImageSize = 32;

struct SyntheticSpec {
  int n_images = 4096;
  std::uint64_t seed = 1;
  /// Named stream so train and test splits never share draws.
  std::string stream = "train";
  double radius_min = 4.5, radius_max = 7.5;  // pixels; half side for squares
  double hue_jitter = 1.0;                   // hue drawn uniformly in [0, hue_jitter)
  double saturation_min = 0.45, saturation_max = 0.85;
  double background_min = 0.30, background_max = 0.55;
};

/// Attributes: shape (0 circle, 1 square), fill (0 light, 1 dark), position
/// (0 left, 1 right). Each attribute is balanced exactly (floor/ceil of n/2)
/// and shuffled independently.
Dataset generate_synthetic(const SyntheticSpec& spec);

/// PNG/PPM files of a folder in filename order, center-cropped to a square,
/// bilinearly resized to 32x32. Undecodable files are skipped with a warning.
Dataset load_image_folder(const std::filesystem::path& dir);

/// 8-bit interleaved RGB.
struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;
};

RgbImage read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const RgbImage& image);
RgbImage read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const RgbImage& image);
/// Dispatches on the extension (.png / .ppm).
RgbImage read_image(const std::filesystem::path& path);

/// [3, H, W] or [1, 3, H, W] in [-1, 1] -> 8-bit, clamped and rounded.
RgbImage to_rgb(const Tensor<float>& image);
/// Center crop to square, bilinear resize to size x size, [3, size, size] in [-1, 1].
Tensor<float> from_rgb(const RgbImage& image, int size = kImageSize);
void save_image(const std::filesystem::path& path, const Tensor<float>& image);
Tensor<float> load_image(const std::filesystem::path& path);

void write_labels_csv(const std::filesystem::path& path, const Dataset& data);
/// Writes images/<id>.png and labels.csv under `dir`.
void export_dataset(const std::filesystem::path& dir, const Dataset& data);

// Checkpoints: "WRGN1", u64 manifest length, JSON manifest, u64 blob length,
// blob of little-endian float32 tensors. All integers little-endian.
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  int format_version = kCheckpointVersion;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> attributes;
  ParamMap<float> tensors;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Adds `params` under "<prefix>/<name>".
void put_params(Checkpoint& ckpt, const std::string& prefix, const ParamMap<float>& params);
/// Entries under "<prefix>/". With a template, names and shapes must match it
/// exactly (unknown or missing entries throw).
ParamMap<float> get_params(const Checkpoint& ckpt, const std::string& prefix, const ParamMap<float>* expected = nullptr);

void put_store(Checkpoint& ckpt, const RandomizedParamStore& store);
RandomizedParamStore get_store(const Checkpoint& ckpt, const GeneratorSpec& spec);

/// Minimal CSV writer; values are written verbatim, one row per call.
class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header);
  void row(const std::vector<std::string>& values);

 private:
  std::ofstream out_;
  std::size_t columns_;
};

/// Shortest round-trip decimal rendering used in every report.
std::string fmt_real(double v);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace wrangan
