#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "molalign/numerics/optim.hpp"

namespace molalign::pipeline {

inline constexpr int kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointArray {
  std::string name;
  numerics::Shape shape;
  std::vector<float> values;
  std::string checksum;  // sha256 of the little-endian bytes
};

// File layout: the line "MOLALIGN-CKPT\n", an 8-byte little-endian header
// length, a JSON header, then every array's float32 data back to back.
struct Checkpoint {
  int version = kCheckpointVersion;
  std::string kind;         // "encoders", "stage1" or "stage2"
  std::string config_text;  // canonical config snapshot
  std::string config_hash;
  std::vector<std::string> vocab;
  std::vector<CheckpointArray> arrays;
  std::string content_hash;  // sha256 over header fields and data

  const CheckpointArray* find(const std::string& name) const;
  bool has_prefix(const std::string& prefix) const;
};

Checkpoint make_checkpoint(const numerics::ParameterSet& params, std::string kind, std::string config_text,
                           std::string config_hash, std::vector<std::string> vocab);
void save_checkpoint(const std::filesystem::path& path, Checkpoint& ckpt);  // fills content_hash
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Copies arrays into every parameter of the set whose name starts with one of
// prefixes (all when empty). A missing array or a shape mismatch throws,
// naming the parameter.
void restore(const Checkpoint& ckpt, const numerics::ParameterSet& params, const std::vector<std::string>& prefixes = {});

// Hex sha256 of the whole file.
std::string file_hash(const std::filesystem::path& path);

}  // namespace molalign::pipeline
