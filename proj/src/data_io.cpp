#include "wrangan/data_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <sstream>

#include <fmt/format.h>
#include <png.h>

#include "wrangan/log.hpp"

namespace wrangan {

namespace fs = std::filesystem;

std::vector<int> Dataset::attribute(const std::string& name) const {
  auto it = std::find(attribute_names.begin(), attribute_names.end(), name);
  if (it == attribute_names.end()) throw std::invalid_argument(fmt::format("dataset: no attribute '{}'", name));
  const auto col = static_cast<std::size_t>(it - attribute_names.begin());
  std::vector<int> out;
  out.reserve(labels.size());
  for (const auto& row : labels) out.push_back(row.at(col));
  return out;
}

Tensor<float> Dataset::batch(const std::vector<std::int64_t>& indices) const {
  std::vector<Tensor<float>> items;
  items.reserve(indices.size());
  for (auto i : indices) items.push_back(images.at(static_cast<std::size_t>(i)));
  return stack_batch(items);
}

namespace {

void hsv_to_rgb(double h, double s, double v, double rgb[3]) {
  const double hh = std::fmod(h, 1.0) * 6.0;
  const int sector = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  const double table[6][3] = {{v, t, p}, {q, v, p}, {p, v, t}, {p, q, v}, {t, p, v}, {v, p, q}};
  for (int c = 0; c < 3; ++c) rgb[c] = table[sector][c];
}

std::vector<int> balanced_labels(int n, Rng rng) {
  std::vector<int> v(static_cast<std::size_t>(n), 0);
  for (int i = 0; i < n / 2; ++i) v[static_cast<std::size_t>(i)] = 1;
  for (std::int64_t i = n - 1; i > 0; --i) std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(rng.below(i + 1))]);
  return v;
}

}  // namespace

Dataset generate_synthetic(const SyntheticSpec& spec) {
  if (spec.n_images < 1) throw std::invalid_argument("generate_synthetic: n_images must be >= 1");
  const Rng base(spec.seed, "synthetic/" + spec.stream);
  Dataset data;
  data.attribute_names = {"shape", "fill", "position"};
  std::vector<std::vector<int>> columns;
  for (const auto& a : data.attribute_names) columns.push_back(balanced_labels(spec.n_images, base.fork("labels/" + a)));

  const int S = kImageSize;
  for (int i = 0; i < spec.n_images; ++i) {
    Rng rng = base.fork(fmt::format("image/{}", i));
    const int square = columns[0][static_cast<std::size_t>(i)];
    const int dark = columns[1][static_cast<std::size_t>(i)];
    const int right = columns[2][static_cast<std::size_t>(i)];

    const double gray = rng.uniform(spec.background_min, spec.background_max);
    double bg[3];
    for (double& c : bg) c = gray + rng.uniform(-0.04, 0.04);
    const double r = rng.uniform(spec.radius_min, spec.radius_max);
    const double cx = right ? rng.uniform(19.5, 24.0) : rng.uniform(8.0, 12.5);
    const double cy = rng.uniform(10.0, 22.0);
    const double hue = rng.uniform(0.0, spec.hue_jitter);
    const double sat = rng.uniform(spec.saturation_min, spec.saturation_max);
    const double val = dark ? rng.uniform(0.08, 0.22) : rng.uniform(0.85, 1.0);
    double color[3];
    hsv_to_rgb(hue, sat, val, color);

    Tensor<float> img({3, S, S});
    for (int y = 0; y < S; ++y) {
      for (int x = 0; x < S; ++x) {
        const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
        const double d = square ? std::max(std::abs(dx), std::abs(dy)) : std::sqrt(dx * dx + dy * dy);
        const double a = std::clamp(r - d + 0.5, 0.0, 1.0);  // area coverage of the pixel footprint
        for (int c = 0; c < 3; ++c) {
          const double v = bg[c] * (1 - a) + color[c] * a;
          img[(c * S + y) * S + x] = static_cast<float>(2 * v - 1);
        }
      }
    }
    data.images.push_back(std::move(img));
    data.ids.push_back(fmt::format("{:06d}", i));
    data.labels.push_back({square, dark, right});
  }
  return data;
}

RgbImage read_png(const fs::path& path) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw std::runtime_error(fmt::format("png: cannot read '{}': {}", path.string(), img.message));
  }
  img.format = PNG_FORMAT_RGB;
  RgbImage out;
  out.width = static_cast<int>(img.width);
  out.height = static_cast<int>(img.height);
  out.pixels.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    png_image_free(&img);
    throw std::runtime_error(fmt::format("png: decode failed for '{}': {}", path.string(), img.message));
  }
  return out;
}

void write_png(const fs::path& path, const RgbImage& image) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, image.pixels.data(), 0, nullptr)) {
    throw std::runtime_error(fmt::format("png: cannot write '{}': {}", path.string(), img.message));
  }
}

namespace {
// Next whitespace-delimited PNM header token, skipping '#' comments.
std::string pnm_token(std::istream& in) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) break;
      continue;
    }
    tok += static_cast<char>(c);
  }
  return tok;
}
}  // namespace

RgbImage read_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(fmt::format("ppm: cannot open '{}'", path.string()));
  const auto magic = pnm_token(in);
  if (magic != "P6" && magic != "P3") throw std::runtime_error(fmt::format("ppm: '{}' is not a P3/P6 file", path.string()));
  RgbImage out;
  int maxval = 0;
  try {
    out.width = std::stoi(pnm_token(in));
    out.height = std::stoi(pnm_token(in));
    maxval = std::stoi(pnm_token(in));
  } catch (const std::exception&) {
    throw std::runtime_error(fmt::format("ppm: malformed header in '{}'", path.string()));
  }
  if (out.width <= 0 || out.height <= 0 || maxval <= 0 || maxval > 255) {
    throw std::runtime_error(fmt::format("ppm: unsupported geometry or depth in '{}'", path.string()));
  }
  const auto n = static_cast<std::size_t>(out.width) * static_cast<std::size_t>(out.height) * 3;
  out.pixels.resize(n);
  if (magic == "P6") {
    in.read(reinterpret_cast<char*>(out.pixels.data()), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n) throw std::runtime_error(fmt::format("ppm: truncated '{}'", path.string()));
  } else {
    for (auto& p : out.pixels) {
      const auto tok = pnm_token(in);
      if (tok.empty()) throw std::runtime_error(fmt::format("ppm: truncated '{}'", path.string()));
      p = static_cast<std::uint8_t>(std::stoi(tok));
    }
  }
  if (maxval != 255) {
    for (auto& p : out.pixels) p = static_cast<std::uint8_t>(std::lround(p * 255.0 / maxval));
  }
  return out;
}

void write_ppm(const fs::path& path, const RgbImage& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(fmt::format("ppm: cannot write '{}'", path.string()));
  out << "P6\n" << image.width << " " << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
}

namespace {
std::string lower_ext(const fs::path& p) {
  auto e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return e;
}
}  // namespace

RgbImage read_image(const fs::path& path) {
  const auto ext = lower_ext(path);
  if (ext == ".png") return read_png(path);
  if (ext == ".ppm") return read_ppm(path);
  throw std::runtime_error(fmt::format("image: unsupported extension '{}'", ext));
}

RgbImage to_rgb(const Tensor<float>& image) {
  const auto& s = image.shape();
  const bool batched = s.size() == 4;
  if (!(s.size() == 3 || (batched && s[0] == 1)) || s[batched ? 1 : 0] != 3) {
    throw ShapeError(fmt::format("to_rgb: expected [3,H,W] or [1,3,H,W], got {}", to_string(s)));
  }
  const auto h = s[s.size() - 2], w = s[s.size() - 1];
  RgbImage out;
  out.width = static_cast<int>(w);
  out.height = static_cast<int>(h);
  out.pixels.resize(static_cast<std::size_t>(3 * h * w));
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        const float v = std::clamp(image[(c * h + y) * w + x], -1.0f, 1.0f);
        out.pixels[static_cast<std::size_t>((y * w + x) * 3 + c)] = static_cast<std::uint8_t>(std::lround((v + 1.0f) * 127.5f));
      }
    }
  }
  return out;
}

Tensor<float> from_rgb(const RgbImage& image, int size) {
  if (image.width <= 0 || image.height <= 0) throw std::invalid_argument("from_rgb: empty image");
  const int side = std::min(image.width, image.height);
  const int x0 = (image.width - side) / 2, y0 = (image.height - side) / 2;
  auto at = [&](int x, int y, int c) {
    return image.pixels[static_cast<std::size_t>(((y0 + y) * image.width + x0 + x) * 3 + c)] / 255.0;
  };
  Tensor<float> out({3, size, size});
  const double scale = static_cast<double>(side) / size;
  for (int y = 0; y < size; ++y) {
    const double sy = std::clamp((y + 0.5) * scale - 0.5, 0.0, side - 1.0);
    const int ya = static_cast<int>(sy), yb = std::min(ya + 1, side - 1);
    const double fy = sy - ya;
    for (int x = 0; x < size; ++x) {
      const double sx = std::clamp((x + 0.5) * scale - 0.5, 0.0, side - 1.0);
      const int xa = static_cast<int>(sx), xb = std::min(xa + 1, side - 1);
      const double fx = sx - xa;
      for (int c = 0; c < 3; ++c) {
        const double v = (1 - fy) * ((1 - fx) * at(xa, ya, c) + fx * at(xb, ya, c)) +
                         fy * ((1 - fx) * at(xa, yb, c) + fx * at(xb, yb, c));
        out[(c * size + y) * size + x] = static_cast<float>(2 * v - 1);
      }
    }
  }
  return out;
}

void save_image(const fs::path& path, const Tensor<float>& image) {
  if (lower_ext(path) == ".ppm") {
    write_ppm(path, to_rgb(image));
  } else {
    write_png(path, to_rgb(image));
  }
}

Tensor<float> load_image(const fs::path& path) { return from_rgb(read_image(path)); }

Dataset load_image_folder(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error(fmt::format("image folder '{}' does not exist", dir.string()));
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto ext = lower_ext(e.path());
    if (ext == ".png" || ext == ".ppm") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end(), [](const fs::path& a, const fs::path& b) { return a.filename() < b.filename(); });
  Dataset data;
  for (const auto& f : files) {
    try {
      data.images.push_back(load_image(f));
      data.ids.push_back(f.stem().string());
    } catch (const std::exception& e) {
      log::warn(fmt::format("skipping '{}': {}", f.string(), e.what()));
    }
  }
  if (data.images.empty()) throw std::runtime_error(fmt::format("image folder '{}' has no decodable images", dir.string()));
  return data;
}

CsvWriter::CsvWriter(const fs::path& path, const std::vector<std::string>& header) : out_(path), columns_(header.size()) {
  if (!out_) throw std::runtime_error(fmt::format("csv: cannot write '{}'", path.string()));
  row(header);
}

void CsvWriter::row(const std::vector<std::string>& values) {
  if (values.size() != columns_) {
    throw std::invalid_argument(fmt::format("csv: row has {} values, header has {}", values.size(), columns_));
  }
  for (std::size_t i = 0; i < values.size(); ++i) out_ << (i ? "," : "") << values[i];
  out_ << '\n';
}

void write_labels_csv(const fs::path& path, const Dataset& data) {
  std::vector<std::string> header{"image_id"};
  header.insert(header.end(), data.attribute_names.begin(), data.attribute_names.end());
  CsvWriter csv(path, header);
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::vector<std::string> row{data.ids[i]};
    for (int v : data.labels[i]) row.push_back(std::to_string(v));
    csv.row(row);
  }
}

void export_dataset(const fs::path& dir, const Dataset& data) {
  fs::create_directories(dir / "images");
  for (std::size_t i = 0; i < data.size(); ++i) save_image(dir / "images" / (data.ids[i] + ".png"), data.images[i]);
  write_labels_csv(dir / "labels.csv", data);
}

std::string fmt_real(double v) { return fmt::format("{}", v); }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(fmt::format("cannot write '{}'", path.string()));
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(fmt::format("cannot read '{}'", path.string()));
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace wrangan
