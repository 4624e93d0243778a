#include "molalign/pipeline/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>

#include "molalign/pipeline/hashing.hpp"

namespace molalign::pipeline {

namespace {

constexpr std::string_view kMagic = "MOLALIGN-CKPT\n";

std::string array_bytes(const std::vector<float>& values) {
  std::string out(values.size() * 4, '\0');
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto u = std::bit_cast<std::uint32_t>(values[i]);
    for (int b = 0; b < 4; ++b) out[i * 4 + b] = static_cast<char>((u >> (8 * b)) & 0xffu);
  }
  return out;
}

std::vector<float> array_values(std::string_view bytes) {
  std::vector<float> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[i * 4 + b])) << (8 * b);
    out[i] = std::bit_cast<float>(u);
  }
  return out;
}

nlohmann::json header_json(const Checkpoint& c) {
  nlohmann::json arrays = nlohmann::json::array();
  for (const auto& a : c.arrays) arrays.push_back({{"name", a.name}, {"shape", a.shape}, {"checksum", a.checksum}});
  return {{"format_version", c.version}, {"kind", c.kind},   {"config", c.config_text},
          {"config_hash", c.config_hash}, {"vocab", c.vocab}, {"arrays", arrays}};
}

std::int64_t numel(const numerics::Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

}  // namespace

const CheckpointArray* Checkpoint::find(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return &a;
  return nullptr;
}

bool Checkpoint::has_prefix(const std::string& prefix) const {
  for (const auto& a : arrays)
    if (a.name.starts_with(prefix)) return true;
  return false;
}

Checkpoint make_checkpoint(const numerics::ParameterSet& params, std::string kind, std::string config_text,
                           std::string config_hash, std::vector<std::string> vocab) {
  Checkpoint c;
  c.kind = std::move(kind);
  c.config_text = std::move(config_text);
  c.config_hash = std::move(config_hash);
  c.vocab = std::move(vocab);
  for (const auto& [name, t] : params.items()) {
    CheckpointArray a;
    a.name = name;
    a.shape = t.shape();
    const auto d = t.data();
    a.values.assign(d.begin(), d.end());  // narrowing to float32 storage
    a.checksum = sha256_hex(array_bytes(a.values));
    c.arrays.push_back(std::move(a));
  }
  return c;
}

void save_checkpoint(const std::filesystem::path& path, Checkpoint& ckpt) {
  std::string data;
  for (const auto& a : ckpt.arrays) data += array_bytes(a.values);
  auto header = header_json(ckpt);
  ckpt.content_hash = sha256_hex(header.dump() + data);
  header["content_hash"] = ckpt.content_hash;
  const auto text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(kMagic.data(), static_cast<std::streamsize>(kMagic.size()));
  const auto len = static_cast<std::uint64_t>(text.size());
  for (int b = 0; b < 8; ++b) out.put(static_cast<char>((len >> (8 * b)) & 0xffu));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw IoError("write failed for checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  const auto where = " in " + path.string();
  if (bytes.size() < kMagic.size() + 8 || std::string_view(bytes).substr(0, kMagic.size()) != kMagic) {
    throw CheckpointError("not a checkpoint file" + where);
  }
  std::uint64_t len = 0;
  for (int b = 0; b < 8; ++b)
    len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[kMagic.size() + b])) << (8 * b);
  const auto header_at = kMagic.size() + 8;
  if (len > bytes.size() - header_at) throw CheckpointError("truncated header" + where);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(header_at, len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("malformed header" + where + ": " + e.what());
  }

  Checkpoint c;
  try {
    c.version = header.at("format_version").get<int>();
    if (c.version != kCheckpointVersion) {
      throw CheckpointError("checkpoint format version " + std::to_string(c.version) + " is not supported (expected " +
                            std::to_string(kCheckpointVersion) + ")" + where);
    }
    c.kind = header.at("kind").get<std::string>();
    c.config_text = header.at("config").get<std::string>();
    c.config_hash = header.at("config_hash").get<std::string>();
    c.vocab = header.at("vocab").get<std::vector<std::string>>();
    c.content_hash = header.at("content_hash").get<std::string>();
    std::size_t offset = header_at + len;
    for (const auto& a : header.at("arrays")) {
      CheckpointArray arr;
      arr.name = a.at("name").get<std::string>();
      arr.shape = a.at("shape").get<numerics::Shape>();
      arr.checksum = a.at("checksum").get<std::string>();
      const auto n = static_cast<std::size_t>(numel(arr.shape)) * 4;
      if (offset + n > bytes.size()) throw CheckpointError("truncated data for parameter '" + arr.name + "'" + where);
      const std::string_view raw(bytes.data() + offset, n);
      if (sha256_hex(raw) != arr.checksum) throw CheckpointError("checksum mismatch for parameter '" + arr.name + "'" + where);
      arr.values = array_values(raw);
      offset += n;
      c.arrays.push_back(std::move(arr));
    }
    if (offset != bytes.size()) throw CheckpointError("trailing bytes after the last array" + where);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("malformed header" + where + ": " + e.what());
  }
  header.erase("content_hash");
  if (sha256_hex(header.dump() + bytes.substr(header_at + len)) != c.content_hash) {
    throw CheckpointError("content hash mismatch" + where);
  }
  return c;
}

void restore(const Checkpoint& ckpt, const numerics::ParameterSet& params, const std::vector<std::string>& prefixes) {
  for (const auto& [name, t] : params.items()) {
    if (!prefixes.empty() &&
        std::none_of(prefixes.begin(), prefixes.end(), [&](const std::string& p) { return name.starts_with(p); })) {
      continue;
    }
    const auto* a = ckpt.find(name);
    if (!a) throw CheckpointError("checkpoint has no parameter '" + name + "'");
    if (a->shape != t.shape()) {
      throw CheckpointError("parameter '" + name + "' has shape " + numerics::to_string(a->shape) +
                            " in the checkpoint but " + numerics::to_string(t.shape()) + " in the model");
    }
    numerics::Tensor handle = t;  // shares storage
    auto dst = handle.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<double>(a->values[i]);
  }
}

std::string file_hash(const std::filesystem::path& path) { return sha256_hex(read_file(path)); }

}  // namespace molalign::pipeline
