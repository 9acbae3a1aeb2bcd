#include <bit>
#include <cstring>
#include <fstream>

#include <fmt/format.h>
#include <json.hpp>

#include "wrangan/config.hpp"
#include "wrangan/data_io.hpp"

namespace wrangan {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[5] = {'W', 'R', 'G', 'N', '1'};

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const std::string& in, std::size_t pos) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + static_cast<std::size_t>(i)])) << (8 * i);
  return v;
}

void append_floats(std::string& blob, const Tensor<float>& t) {
  const auto start = blob.size();
  blob.resize(start + static_cast<std::size_t>(t.size()) * 4);
  for (std::int64_t i = 0; i < t.size(); ++i) {
    auto bits = std::bit_cast<std::uint32_t>(t[i]);
    for (int b = 0; b < 4; ++b) blob[start + static_cast<std::size_t>(i) * 4 + static_cast<std::size_t>(b)] = static_cast<char>((bits >> (8 * b)) & 0xff);
  }
}

Tensor<float> read_floats(const std::string& blob, std::size_t offset, Shape shape) {
  Tensor<float> t(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) {
      bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(blob[offset + static_cast<std::size_t>(i) * 4 + static_cast<std::size_t>(b)])) << (8 * b);
    }
    t[i] = std::bit_cast<float>(bits);
  }
  return t;
}

}  // namespace

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  std::string blob;
  json entries = json::array();
  for (const auto& [name, t] : ckpt.tensors) {
    entries.push_back({{"name", name}, {"shape", t.shape()}, {"offset", blob.size()}});
    append_floats(blob, t);
  }
  json manifest = {{"format_version", ckpt.format_version},
                   {"config_hash", ckpt.config_hash},
                   {"seed", ckpt.seed},
                   {"attributes", ckpt.attributes},
                   {"entries", entries},
                   {"blob_bytes", blob.size()},
                   {"blob_fnv1a64", hex64(fnv1a64(blob))}};
  const std::string text = manifest.dump(1);

  std::string out(kMagic, sizeof kMagic);
  put_u64(out, text.size());
  out += text;
  put_u64(out, blob.size());
  out += blob;
  const auto tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw CheckpointError(fmt::format("checkpoint: cannot write '{}'", path.string()));
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw CheckpointError(fmt::format("checkpoint: write failed for '{}'", path.string()));
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::string raw;
  try {
    raw = read_text(path);
  } catch (const std::exception&) {
    throw CheckpointError(fmt::format("checkpoint: cannot open '{}'", path.string()));
  }
  const auto where = path.string();
  if (raw.size() < sizeof kMagic + 8 || std::memcmp(raw.data(), kMagic, sizeof kMagic) != 0) {
    throw CheckpointError(fmt::format("checkpoint '{}': bad magic (not a WRGN1 file)", where));
  }
  std::size_t pos = sizeof kMagic;
  const auto manifest_len = get_u64(raw, pos);
  pos += 8;
  if (manifest_len > raw.size() - pos) throw CheckpointError(fmt::format("checkpoint '{}': truncated manifest", where));
  json manifest;
  try {
    manifest = json::parse(raw.substr(pos, manifest_len));
  } catch (const json::exception& e) {
    throw CheckpointError(fmt::format("checkpoint '{}': malformed manifest: {}", where, e.what()));
  }
  pos += manifest_len;

  Checkpoint ckpt;
  std::uint64_t blob_bytes = 0;
  std::string blob_hash;
  try {
    ckpt.format_version = manifest.at("format_version").get<int>();
    if (ckpt.format_version != kCheckpointVersion) {
      throw CheckpointError(fmt::format("checkpoint '{}': format version {} but this build reads version {}", where,
                                        ckpt.format_version, kCheckpointVersion));
    }
    ckpt.config_hash = manifest.at("config_hash").get<std::string>();
    ckpt.seed = manifest.at("seed").get<std::uint64_t>();
    ckpt.attributes = manifest.at("attributes").get<std::map<std::string, std::string>>();
    blob_bytes = manifest.at("blob_bytes").get<std::uint64_t>();
    blob_hash = manifest.at("blob_fnv1a64").get<std::string>();
    // validate every extent before touching the blob
    for (const auto& e : manifest.at("entries")) {
      const auto shape = e.at("shape").get<Shape>();
      const auto offset = e.at("offset").get<std::uint64_t>();
      for (auto d : shape) {
        if (d <= 0) throw CheckpointError(fmt::format("checkpoint '{}': entry '{}' has bad shape", where, e.at("name").get<std::string>()));
      }
      const auto bytes = static_cast<std::uint64_t>(numel(shape)) * 4;
      if (offset > blob_bytes || bytes > blob_bytes - offset) {
        throw CheckpointError(fmt::format("checkpoint '{}': entry '{}' exceeds the blob", where, e.at("name").get<std::string>()));
      }
    }
  } catch (const json::exception& e) {
    throw CheckpointError(fmt::format("checkpoint '{}': invalid manifest: {}", where, e.what()));
  }

  if (raw.size() - pos < 8) throw CheckpointError(fmt::format("checkpoint '{}': truncated blob", where));
  const auto stored_len = get_u64(raw, pos);
  pos += 8;
  if (stored_len != blob_bytes || raw.size() - pos < blob_bytes) {
    throw CheckpointError(fmt::format("checkpoint '{}': truncated blob ({} of {} bytes)", where, raw.size() - pos, blob_bytes));
  }
  const std::string blob = raw.substr(pos, blob_bytes);
  if (hex64(fnv1a64(blob)) != blob_hash) throw CheckpointError(fmt::format("checkpoint '{}': blob hash mismatch", where));

  for (const auto& e : manifest.at("entries")) {
    auto name = e.at("name").get<std::string>();
    if (ckpt.tensors.count(name)) throw CheckpointError(fmt::format("checkpoint '{}': duplicate entry '{}'", where, name));
    ckpt.tensors.emplace(name, read_floats(blob, e.at("offset").get<std::size_t>(), e.at("shape").get<Shape>()));
  }
  return ckpt;
}

void put_params(Checkpoint& ckpt, const std::string& prefix, const ParamMap<float>& params) {
  for (const auto& [name, t] : params) ckpt.tensors.insert_or_assign(prefix + "/" + name, t);
}

ParamMap<float> get_params(const Checkpoint& ckpt, const std::string& prefix, const ParamMap<float>* expected) {
  ParamMap<float> out;
  const auto p = prefix + "/";
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.compare(0, p.size(), p) == 0) out.emplace(name.substr(p.size()), t);
  }
  if (expected) {
    for (const auto& [name, t] : out) {
      auto it = expected->find(name);
      if (it == expected->end()) throw CheckpointError(fmt::format("checkpoint: unknown entry '{}{}'", p, name));
      if (it->second.shape() != t.shape()) {
        throw CheckpointError(fmt::format("checkpoint: entry '{}{}' has shape {}, expected {}", p, name, to_string(t.shape()),
                                          to_string(it->second.shape())));
      }
    }
    for (const auto& [name, t] : *expected) {
      if (!out.count(name)) throw CheckpointError(fmt::format("checkpoint: missing entry '{}{}'", p, name));
    }
  }
  if (out.empty()) throw CheckpointError(fmt::format("checkpoint: no entries under '{}'", p));
  return out;
}

void put_store(Checkpoint& ckpt, const RandomizedParamStore& store) {
  for (const auto& e : store.entries()) {
    ckpt.tensors.insert_or_assign("store.mu/" + e.name, e.mu);
    ckpt.tensors.insert_or_assign("store.log_sigma/" + e.name, e.log_sigma);
  }
  put_params(ckpt, "store.frozen", store.frozen());
  ckpt.attributes["n_randomized"] = std::to_string(store.spec().n_randomized);
}

RandomizedParamStore get_store(const Checkpoint& ckpt, const GeneratorSpec& spec) {
  auto it = ckpt.attributes.find("n_randomized");
  if (it == ckpt.attributes.end()) throw CheckpointError("checkpoint: no randomized parameter store");
  GeneratorSpec s = spec;
  s.n_randomized = std::stoi(it->second);
  Rng template_rng(0, "template");
  const auto full = init_generator(s, template_rng);
  auto probe = RandomizedParamStore::from_generator(s, full);
  const auto frozen = get_params(ckpt, "store.frozen", &probe.frozen());

  RandomizedParamStore store = probe;
  store.frozen() = frozen;
  for (auto& e : store.entries()) {
    auto mu = ckpt.tensors.find("store.mu/" + e.name);
    auto ls = ckpt.tensors.find("store.log_sigma/" + e.name);
    if (mu == ckpt.tensors.end() || ls == ckpt.tensors.end()) {
      throw CheckpointError(fmt::format("checkpoint: missing randomized entry '{}'", e.name));
    }
    if (mu->second.shape() != e.mu.shape() || ls->second.shape() != e.mu.shape()) {
      throw CheckpointError(fmt::format("checkpoint: randomized entry '{}' has the wrong shape", e.name));
    }
    e.mu = mu->second;
    e.log_sigma = ls->second;
  }
  std::size_t randomized = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.rfind("store.mu/", 0) == 0 || name.rfind("store.log_sigma/", 0) == 0) ++randomized;
  }
  if (randomized != 2 * store.entries().size()) throw CheckpointError("checkpoint: unknown randomized entries in store");
  store.validate();
  return store;
}

}  // namespace wrangan
