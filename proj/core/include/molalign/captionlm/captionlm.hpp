#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "molalign/moldata/text.hpp"
#include "molalign/numerics/layers.hpp"

namespace molalign::captionlm {

using numerics::Tensor;

struct LoRAConfig {
  int rank = 8;
  double alpha = 32.0;
  double dropout = 0.1;
  double init_std = 0.02;  // A ~ N(0, init_std); B starts at zero

  double scaling() const { return alpha / static_cast<double>(rank); }
};

// Low-rank update for one weight matrix: delta(x) = scaling * (drop(x) A^T) B^T.
struct LoRAAdapter {
  Tensor a;  // [r, d_in]
  Tensor b;  // [d_out, r]
  double scaling = 1.0;
  double dropout = 0.0;

  static LoRAAdapter make(std::int64_t d_in, std::int64_t d_out, const LoRAConfig& config, numerics::Rng& rng,
                          numerics::Precision p);
  std::int64_t parameter_count() const { return a.numel() + b.numel(); }
};

// A linear map with an optional adapter on top. The base weight is [d_in, d_out].
struct AdaptedLinear {
  numerics::Linear base;
  std::optional<LoRAAdapter> lora;

  // dropout_rng == nullptr disables adapter dropout (evaluation).
  Tensor operator()(const Tensor& x, numerics::Rng* dropout_rng = nullptr) const;
  void collect(numerics::ParameterSet& ps, const std::string& prefix) const;
};

// y = base(x) + scaling * B (A drop(x)), on row vectors.
Tensor lora_apply(const numerics::Linear& base, const LoRAAdapter& adapter, const Tensor& x,
                  numerics::Rng* dropout_rng = nullptr);

enum class InputPart { kQueries, kPrompt, kSmiles };
// Parses "queries,prompt,smiles" style orderings; all three parts exactly once.
std::vector<InputPart> parse_input_order(const std::string& s);
std::string to_string(const std::vector<InputPart>& order);

struct DecoderConfig {
  std::int64_t d_dec = 64;
  int blocks = 2;
  int heads = 4;
  std::int64_t ffn_hidden = 128;
  std::int64_t d_soft = 64;  // width of the incoming query rows
  std::int64_t vocab_size = 0;
  std::int64_t max_seq = 320;
  std::string prompt = "Describe the molecule:";
  std::vector<InputPart> order = {InputPart::kQueries, InputPart::kPrompt, InputPart::kSmiles};
  numerics::Precision precision = numerics::Precision::kFloat32;

  void validate() const;
};

struct DecoderBlock {
  numerics::LayerNorm ln_attn, ln_ffn;
  AdaptedLinear q, k, v, o;
  AdaptedLinear gate, up, down;  // gated feed-forward: down(gelu(gate x) * up x)
};

struct DecoderParams {
  DecoderConfig config;
  Tensor token_embedding;     // [vocab, d_dec]
  Tensor position_embedding;  // [max_seq, d_dec]
  numerics::Linear soft_proj; // d_soft -> d_dec
  std::vector<DecoderBlock> blocks;
  numerics::LayerNorm ln_final;
  numerics::Linear lm_head;   // d_dec -> vocab

  static DecoderParams make(const DecoderConfig& config, numerics::Rng& rng);
  // Names: "dec.tok", "dec.block0.q.weight", "dec.block0.q.lora_a", ...
  numerics::ParameterSet parameters() const;
  numerics::ParameterSet lora_parameters() const;
  numerics::ParameterSet base_parameters() const;

  // Adds adapters on q, k, v, o, gate, up and down of every block.
  void attach_lora(const LoRAConfig& config, numerics::Rng& rng);
  bool has_lora() const;
  // Stops gradient flow into every non-adapter weight.
  void freeze_base();
};

// One decoder input: continuous query rows followed by token segments.
struct AssembledInput {
  Tensor embeds;                      // [L, d_dec]
  std::vector<std::int64_t> targets;  // [L]; kIgnoreIndex except positions that predict a caption token
  std::int64_t length = 0;
  std::int64_t caption_start = 0;     // index of the first caption position
  std::int64_t target_count = 0;
};

AssembledInput assemble_input(const DecoderParams& p, const Tensor& queries, std::span<const std::int64_t> smiles,
                              std::span<const std::int64_t> prompt, std::span<const std::int64_t> caption);

// Runs the causal decoder over several assembled inputs at once (block-diagonal
// causal mask). Returns logits [sum L, vocab] in input order.
Tensor decode(const DecoderParams& p, std::span<const AssembledInput> inputs, numerics::Rng* dropout_rng = nullptr);

// Mean cross-entropy over every caption target in the batch.
Tensor caption_loss(const DecoderParams& p, std::span<const AssembledInput> inputs,
                    numerics::Rng* dropout_rng = nullptr);

// Caption token ids for training: words followed by [SEP].
std::vector<std::int64_t> caption_tokens(std::string_view text, const moldata::Vocabulary& vocab);
std::vector<std::int64_t> prompt_tokens(const DecoderConfig& config, const moldata::Vocabulary& vocab);
std::vector<std::int64_t> smiles_tokens(const std::string& smiles, const moldata::Vocabulary& vocab);

// Greedy decoding until [SEP] or max_new tokens; [SEP] is not returned.
std::vector<std::int64_t> generate_greedy(const DecoderParams& p, const Tensor& queries,
                                          std::span<const std::int64_t> smiles, std::span<const std::int64_t> prompt,
                                          int max_new);

// Plain causal language-model training of the base decoder on caption text (no
// soft prompt). Stands in for starting from a pretrained language model.
struct LMPretrainConfig {
  int epochs = 30;
  int batch_size = 16;
  double lr = 3e-3;
  std::uint64_t seed = 0;
};
double pretrain_decoder(DecoderParams& p, const std::vector<std::vector<std::int64_t>>& texts,
                        const LMPretrainConfig& config);

}  // namespace molalign::captionlm
