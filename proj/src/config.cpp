#include "wrangan/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include <fmt/format.h>

namespace wrangan {

void TrainConfig::validate() const {
  if (batch_size < 2) throw std::invalid_argument(fmt::format("train: batch_size must be >= 2, got {}", batch_size));
  if (iterations < 0) throw std::invalid_argument("train: iterations must be >= 0");
  if (!(lr_g > 0) || !(lr_d > 0)) throw std::invalid_argument("train: learning rates must be > 0");
  if (r1_gamma < 0 || r1_every < 1) throw std::invalid_argument("train: r1_gamma >= 0 and r1_every >= 1 required");
}

void EncoderConfig::validate() const {
  if (batch_size < 1) throw std::invalid_argument("encoder: batch_size must be >= 1");
  if (iterations < 0) throw std::invalid_argument("encoder: iterations must be >= 0");
  if (!(lr > 0)) throw std::invalid_argument("encoder: lr must be > 0");
}

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::w_only: return "w_only";
    case Strategy::w_plus: return "w_plus";
    case Strategy::simple_tune: return "simple_tune";
    case Strategy::pti_style: return "pti_style";
    case Strategy::wrangan: return "wrangan";
  }
  return "?";
}

Strategy parse_strategy(const std::string& name) {
  for (auto s : kAllStrategies) {
    if (to_string(s) == name) return s;
  }
  throw std::invalid_argument(
      fmt::format("unknown strategy '{}' (expected w_only, w_plus, simple_tune, pti_style or wrangan)", name));
}

void InversionConfig::validate() const {
  if (iterations < 0) throw std::invalid_argument("invert: iterations must be >= 0");
  if (!(lr > 0)) throw std::invalid_argument("invert: lr must be > 0");
  if (alpha_reg < 0) throw std::invalid_argument("invert: alpha_reg must be >= 0");
  if (effective_pivot() > iterations) throw std::invalid_argument("invert: pivot_iterations exceeds iterations");
}

std::string hex64(std::uint64_t v) { return fmt::format("{:016x}", v); }

namespace {

struct Field {
  std::string section;
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <class N>
N parse_number(const std::string& s) {
  N v{};
  const char* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end) throw std::invalid_argument(fmt::format("not a number: '{}'", s));
  return v;
}

template <class N>
std::vector<N> parse_list(const std::string& s) {
  std::vector<N> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    auto b = item.find_first_not_of(" \t");
    auto e = item.find_last_not_of(" \t");
    if (b == std::string::npos) throw std::invalid_argument(fmt::format("empty list element in '{}'", s));
    out.push_back(parse_number<N>(item.substr(b, e - b + 1)));
  }
  if (out.empty()) throw std::invalid_argument("empty list");
  return out;
}

template <class N>
std::string join(const std::vector<N>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt::format("{}", v[i]);
  return s;
}

template <class M>
Field num(std::string section, std::string key, M RunConfig::*sub, auto field) {
  using N = std::remove_reference_t<decltype(std::declval<M&>().*field)>;
  constexpr bool is_list = std::is_same_v<N, std::vector<int>> || std::is_same_v<N, std::vector<double>>;
  return {std::move(section), std::move(key),
          [sub, field](const RunConfig& c) {
            if constexpr (is_list) {
              return join(c.*sub.*field);
            } else {
              return fmt::format("{}", c.*sub.*field);
            }
          },
          [sub, field](RunConfig& c, const std::string& v) {
            if constexpr (std::is_same_v<N, std::string>) {
              c.*sub.*field = v;
            } else if constexpr (is_list) {
              c.*sub.*field = parse_list<typename N::value_type>(v);
            } else {
              c.*sub.*field = parse_number<N>(v);
            }
          }};
}

template <class N>
Field top(std::string key, N RunConfig::*field) {
  return {"run", std::move(key), [field](const RunConfig& c) { return fmt::format("{}", c.*field); },
          [field](RunConfig& c, const std::string& v) { c.*field = parse_number<N>(v); }};
}

void add_train_fields(std::vector<Field>& f, const std::string& s, TrainConfig RunConfig::*sub) {
  f.push_back(num(s, "batch_size", sub, &TrainConfig::batch_size));
  f.push_back(num(s, "iterations", sub, &TrainConfig::iterations));
  f.push_back(num(s, "lr_g", sub, &TrainConfig::lr_g));
  f.push_back(num(s, "lr_d", sub, &TrainConfig::lr_d));
  f.push_back(num(s, "beta1", sub, &TrainConfig::beta1));
  f.push_back(num(s, "beta2", sub, &TrainConfig::beta2));
  f.push_back(num(s, "r1_gamma", sub, &TrainConfig::r1_gamma));
  f.push_back(num(s, "r1_every", sub, &TrainConfig::r1_every));
  f.push_back(num(s, "log_every", sub, &TrainConfig::log_every));
}

const std::vector<Field>& schema() {
  static const std::vector<Field> fields = [] {
    std::vector<Field> f;
    f.push_back(top("seed", &RunConfig::seed));
    f.push_back(top("feature_seed", &RunConfig::feature_seed));
    f.push_back(top("jobs", &RunConfig::jobs));

    f.push_back(num("model", "z_dim", &RunConfig::model, &GeneratorSpec::z_dim));
    f.push_back(num("model", "w_dim", &RunConfig::model, &GeneratorSpec::w_dim));
    f.push_back(num("model", "channels", &RunConfig::model, &GeneratorSpec::channels));
    f.push_back(num("model", "n_randomized", &RunConfig::model, &GeneratorSpec::n_randomized));

    f.push_back(num("data", "source", &RunConfig::data, &DataConfig::source));
    f.push_back(num("data", "folder", &RunConfig::data, &DataConfig::folder));
    f.push_back(num("data", "n_train", &RunConfig::data, &DataConfig::n_train));
    f.push_back(num("data", "n_test", &RunConfig::data, &DataConfig::n_test));
    f.push_back(num("data", "n_reference", &RunConfig::data, &DataConfig::n_reference));

    add_train_fields(f, "pretrain", &RunConfig::pretrain);
    add_train_fields(f, "wrangan", &RunConfig::wrangan);

    f.push_back(num("encoder", "batch_size", &RunConfig::encoder, &EncoderConfig::batch_size));
    f.push_back(num("encoder", "iterations", &RunConfig::encoder, &EncoderConfig::iterations));
    f.push_back(num("encoder", "lr", &RunConfig::encoder, &EncoderConfig::lr));
    f.push_back(num("encoder", "beta1", &RunConfig::encoder, &EncoderConfig::beta1));
    f.push_back(num("encoder", "beta2", &RunConfig::encoder, &EncoderConfig::beta2));
    f.push_back(num("encoder", "latent_penalty", &RunConfig::encoder, &EncoderConfig::latent_penalty));
    f.push_back(num("encoder", "log_every", &RunConfig::encoder, &EncoderConfig::log_every));

    f.push_back(num("invert", "strategy", &RunConfig::invert, &InvertSection::strategy));
    f.push_back(num("invert", "iterations", &RunConfig::invert, &InvertSection::iterations));
    f.push_back(num("invert", "lr", &RunConfig::invert, &InvertSection::lr));
    f.push_back(num("invert", "eps_init", &RunConfig::invert, &InvertSection::eps_init));
    f.push_back(num("invert", "alpha_wrangan", &RunConfig::invert, &InvertSection::alpha_wrangan));
    f.push_back(num("invert", "alpha_simple", &RunConfig::invert, &InvertSection::alpha_simple));
    f.push_back(num("invert", "alpha_pti", &RunConfig::invert, &InvertSection::alpha_pti));
    f.push_back(num("invert", "pivot_iterations", &RunConfig::invert, &InvertSection::pivot_iterations));

    f.push_back(num("eval", "corruption_images", &RunConfig::eval, &EvalConfig::corruption_images));
    f.push_back(num("eval", "shift_scale", &RunConfig::eval, &EvalConfig::shift_scale));
    f.push_back(num("eval", "corruption_inversions", &RunConfig::eval, &EvalConfig::corruption_inversions));
    f.push_back(num("eval", "compare_images", &RunConfig::eval, &EvalConfig::compare_images));
    f.push_back(num("eval", "style_samples", &RunConfig::eval, &EvalConfig::style_samples));
    f.push_back(num("eval", "grid_n", &RunConfig::eval, &EvalConfig::grid_n));
    f.push_back(num("eval", "grid_alpha", &RunConfig::eval, &EvalConfig::grid_alpha));
    f.push_back(num("eval", "grid_images", &RunConfig::eval, &EvalConfig::grid_images));
    f.push_back(num("eval", "grid_iterations", &RunConfig::eval, &EvalConfig::grid_iterations));
    f.push_back(num("eval", "influence_samples", &RunConfig::eval, &EvalConfig::influence_samples));
    f.push_back(num("eval", "precision_k", &RunConfig::eval, &EvalConfig::precision_k));

    f.push_back(num("latent", "attribute", &RunConfig::latent, &LatentConfig::attribute));
    f.push_back(num("latent", "n_codes", &RunConfig::latent, &LatentConfig::n_codes));
    f.push_back(num("latent", "pca_k", &RunConfig::latent, &LatentConfig::pca_k));
    f.push_back(num("latent", "interpolation_alphas", &RunConfig::latent, &LatentConfig::interpolation_alphas));
    f.push_back(num("latent", "edit_step", &RunConfig::latent, &LatentConfig::edit_step));
    return f;
  }();
  return fields;
}

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

RunConfig::RunConfig() {
  pretrain.iterations = 20000;
  wrangan.iterations = 10000;
}

InversionConfig RunConfig::inversion(Strategy s, double alpha_override) const {
  InversionConfig c;
  c.strategy = s;
  c.iterations = invert.iterations;
  c.lr = invert.lr;
  c.eps_init = invert.eps_init;
  c.pivot_iterations = invert.pivot_iterations;
  c.seed = seed;
  switch (s) {
    case Strategy::simple_tune: c.alpha_reg = invert.alpha_simple; break;
    case Strategy::pti_style: c.alpha_reg = invert.alpha_pti; break;
    case Strategy::wrangan: c.alpha_reg = invert.alpha_wrangan; break;
    default: c.alpha_reg = 0.0; break;
  }
  if (alpha_override >= 0) c.alpha_reg = alpha_override;
  return c;
}

TrainConfig RunConfig::pretrain_config() const {
  TrainConfig c = pretrain;
  c.seed = seed;
  return c;
}

TrainConfig RunConfig::wrangan_config() const {
  TrainConfig c = wrangan;
  c.seed = seed;
  return c;
}

EncoderConfig RunConfig::encoder_config() const {
  EncoderConfig c = encoder;
  c.seed = seed;
  return c;
}

std::string RunConfig::canonical_text() const {
  std::string out, section;
  for (const auto& f : schema()) {
    if (f.section != section) {
      out += (section.empty() ? "" : "\n") + fmt::format("[{}]\n", f.section);
      section = f.section;
    }
    out += fmt::format("{} = {}\n", f.key, f.get(*this));
  }
  return out;
}

// jobs never changes results, so it stays out of the run identity
std::uint64_t RunConfig::hash() const {
  std::string text;
  std::istringstream in(canonical_text());
  for (std::string line; std::getline(in, line);) {
    if (line.rfind("jobs = ", 0) != 0) text += line + "\n";
  }
  return fnv1a64(text);
}

std::string RunConfig::hash_hex() const { return hex64(hash()); }

void RunConfig::validate() const {
  model.validate();
  pretrain_config().validate();
  wrangan_config().validate();
  encoder_config().validate();
  inversion(parse_strategy(invert.strategy)).validate();
  if (jobs < 1) throw ConfigError("run.jobs must be >= 1");
  if (data.source != "synthetic" && data.source != "folder") {
    throw ConfigError(fmt::format("data.source must be 'synthetic' or 'folder', got '{}'", data.source));
  }
  if (data.source == "folder" && data.folder.empty()) throw ConfigError("data.folder required when data.source = folder");
  for (int n : eval.grid_n) {
    if (n < 0 || n > model.num_conv_layers()) throw ConfigError(fmt::format("eval.grid_n entry {} out of range", n));
  }
  for (double a : eval.grid_alpha) {
    if (a < 0) throw ConfigError("eval.grid_alpha entries must be >= 0");
  }
}

RunConfig RunConfig::parse(const std::string& text) {
  std::map<std::string, std::map<std::string, const Field*>> index;
  for (const auto& f : schema()) index[f.section][f.key] = &f;

  RunConfig cfg;
  std::string section;
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    auto line = trim(raw);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(fmt::format("config line {}: malformed section header '{}'", line_no, line));
      section = trim(line.substr(1, line.size() - 2));
      if (!index.count(section)) throw ConfigError(fmt::format("config line {}: unknown section [{}]", line_no, section));
      continue;
    }
    auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(fmt::format("config line {}: expected key = value", line_no));
    if (section.empty()) throw ConfigError(fmt::format("config line {}: key outside of a section", line_no));
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    auto it = index[section].find(key);
    if (it == index[section].end()) {
      throw ConfigError(fmt::format("config line {}: unknown key '{}' in [{}]", line_no, key, section));
    }
    try {
      it->second->set(cfg, value);
    } catch (const std::exception& e) {
      throw ConfigError(fmt::format("config line {}: bad value for {}.{}: {}", line_no, section, key, e.what()));
    }
  }
  cfg.validate();
  return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError(fmt::format("cannot open config '{}'", path.string()));
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str());
}

}  // namespace wrangan
