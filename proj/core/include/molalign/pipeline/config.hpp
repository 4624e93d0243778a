#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "molalign/captionlm/captionlm.hpp"
#include "molalign/encoders/encoders.hpp"
#include "molalign/mqformer/mqformer.hpp"
#include "molalign/objectives/objectives.hpp"

namespace molalign::pipeline {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Flat run configuration. Every field has a key of the same name in the
// key=value file format; see config_keys() for the list with descriptions.
struct Config {
  std::uint64_t seed = 0;
  std::string out_dir = "out";
  std::string data;       // training JSONL
  std::string eval_data;  // evaluation JSONL (defaults to data)
  std::string encoder_ckpt;
  std::string precision = "f32";

  // model
  std::int64_t d = 64;
  std::int64_t d_enc = 64;
  std::int64_t d_dec = 64;
  std::int64_t queries = 4;  // K per view
  int blocks = 2;            // MQ-Former blocks
  int heads = 4;
  std::int64_t ffn_hidden = 128;
  int enc_layers = 2;
  int dec_blocks = 2;
  std::int64_t max_text_len = 256;
  std::int64_t max_seq = 320;
  std::string views = "both";        // both | 2d | 3d | precombined
  std::string contrastive = "multi"; // multi | single

  // stage 1 objective and optimizer
  double tau = 0.1;
  double alpha = 2.0;
  bool use_mtc = true;
  bool use_mtm = true;
  bool use_mcap = true;
  double lr = 1e-3;
  std::int64_t warmup = 20;
  double lr_decay = 0.9;
  double weight_decay = 0.05;
  int epochs = 2;
  int batch_size = 8;
  std::int64_t max_steps = 0;  // 0: no cap

  // stage 2
  double stage2_lr = 3e-3;
  std::int64_t stage2_warmup = 20;
  double stage2_lr_decay = 1.0;
  int stage2_epochs = 2;
  int stage2_batch_size = 8;
  std::int64_t stage2_max_steps = 0;
  int lora_rank = 8;
  double lora_alpha = 32.0;
  double lora_dropout = 0.1;
  std::string prompt = "Describe the molecule:";
  std::string input_order = "queries,prompt,smiles";
  int decoder_pretrain_epochs = 0;
  int max_new = 48;

  // encoders
  int encoder_pretrain_epochs = 20;
  double encoder_lr = 3e-3;

  // evaluation
  std::int64_t eval_chunk = 64;
  int attn_layer = 0;
  std::string attn_mode = "bimodal";  // unimodal | bimodal | causal

  void validate() const;

  numerics::Precision numeric_precision() const;
  encoders::EncoderConfig encoder_config() const;
  mqformer::MQFormerConfig mqformer_config(std::int64_t vocab_size) const;
  objectives::ObjectiveConfig objective_config() const;
  captionlm::DecoderConfig decoder_config(std::int64_t vocab_size) const;
  captionlm::LoRAConfig lora_config() const;
  numerics::LrSchedule stage1_schedule() const;
  numerics::LrSchedule stage2_schedule() const;
};

struct ConfigKey {
  std::string name;
  std::string description;
};
const std::vector<ConfigKey>& config_keys();

// Sets one key from its text form; unknown keys and unparsable values throw.
void set_key(Config& c, const std::string& key, const std::string& value);
std::string get_key(const Config& c, const std::string& key);

// "key=value" lines; '#' starts a comment; blank lines ignored.
Config parse_config(const std::string& text, Config base = {});
Config load_config(const std::filesystem::path& path);
// MOLALIGN_SEED and MOLALIGN_OUT_DIR.
void apply_env_overrides(Config& c);

// Canonical text: every key except out_dir, in key order. Used for hashing and
// stored in checkpoints.
std::string canonical_text(const Config& c);
std::string config_hash(const Config& c);

}  // namespace molalign::pipeline
