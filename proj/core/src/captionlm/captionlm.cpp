#include "molalign/captionlm/captionlm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "molalign/numerics/ops.hpp"

namespace molalign::captionlm {

using namespace numerics;

LoRAAdapter LoRAAdapter::make(std::int64_t d_in, std::int64_t d_out, const LoRAConfig& config, Rng& rng,
                              Precision p) {
  if (config.rank <= 0) throw std::invalid_argument("LoRA rank must be positive");
  if (config.rank >= std::min(d_in, d_out)) {
    throw std::invalid_argument("LoRA rank " + std::to_string(config.rank) + " must be below min(d_in, d_out) = " +
                                std::to_string(std::min(d_in, d_out)));
  }
  if (config.dropout < 0.0 || config.dropout >= 1.0) throw std::invalid_argument("LoRA dropout must be in [0, 1)");
  LoRAAdapter a;
  a.a = normal_tensor({config.rank, d_in}, config.init_std, rng, p);
  a.b = Tensor::zeros({d_out, config.rank}, p, true);
  a.scaling = config.scaling();
  a.dropout = config.dropout;
  return a;
}

Tensor lora_apply(const Linear& base, const LoRAAdapter& adapter, const Tensor& x, Rng* dropout_rng) {
  const Tensor y = base(x);
  const Tensor xin = dropout_rng ? dropout(x, adapter.dropout, *dropout_rng, true) : x;
  const Tensor delta = matmul_transposed(matmul_transposed(xin, adapter.a), adapter.b);
  return add(y, scale(delta, adapter.scaling));
}

Tensor AdaptedLinear::operator()(const Tensor& x, Rng* dropout_rng) const {
  return lora ? lora_apply(base, *lora, x, dropout_rng) : base(x);
}

void AdaptedLinear::collect(ParameterSet& ps, const std::string& prefix) const {
  base.collect(ps, prefix);
  if (lora) {
    ps.add(prefix + ".lora_a", lora->a);
    ps.add(prefix + ".lora_b", lora->b);
  }
}

std::vector<InputPart> parse_input_order(const std::string& s) {
  std::vector<InputPart> order;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    if (part == "queries") order.push_back(InputPart::kQueries);
    else if (part == "prompt") order.push_back(InputPart::kPrompt);
    else if (part == "smiles") order.push_back(InputPart::kSmiles);
    else throw std::invalid_argument("unknown input part '" + part + "' (expected queries, prompt or smiles)");
  }
  auto sorted = order;
  std::sort(sorted.begin(), sorted.end());
  if (sorted != std::vector<InputPart>{InputPart::kQueries, InputPart::kPrompt, InputPart::kSmiles}) {
    throw std::invalid_argument("input order must name queries, prompt and smiles once each: '" + s + "'");
  }
  return order;
}

std::string to_string(const std::vector<InputPart>& order) {
  std::string out;
  for (auto part : order) {
    if (!out.empty()) out += ',';
    out += part == InputPart::kQueries ? "queries" : part == InputPart::kPrompt ? "prompt" : "smiles";
  }
  return out;
}

void DecoderConfig::validate() const {
  if (d_dec <= 0 || blocks < 0 || heads <= 0 || ffn_hidden <= 0 || d_soft <= 0 || max_seq <= 0) {
    throw std::invalid_argument("decoder dimensions must be positive");
  }
  if (d_dec % heads != 0) throw std::invalid_argument("d_dec must be divisible by heads");
  if (vocab_size <= 0) throw std::invalid_argument("decoder vocab_size must be set");
  if (order.size() != 3) throw std::invalid_argument("decoder input order must have three parts");
}

namespace {

AdaptedLinear adapted(std::int64_t in, std::int64_t out, Rng& rng, Precision p) {
  return {Linear::make(in, out, rng, p, true, 1.0 / std::sqrt(static_cast<double>(in))), std::nullopt};
}

template <class F>
void for_each_adapted(const DecoderBlock& b, F f) {
  f(b.q, "q");
  f(b.k, "k");
  f(b.v, "v");
  f(b.o, "o");
  f(b.gate, "gate");
  f(b.up, "up");
  f(b.down, "down");
}

template <class F>
void for_each_adapted(DecoderBlock& b, F f) {
  f(b.q);
  f(b.k);
  f(b.v);
  f(b.o);
  f(b.gate);
  f(b.up);
  f(b.down);
}

AttentionMask block_causal_mask(std::span<const std::int64_t> lengths) {
  AttentionMask mask;
  std::int64_t off = 0;
  std::vector<std::int32_t> keys;
  for (auto len : lengths) {
    keys.clear();
    for (std::int64_t t = 0; t < len; ++t) {
      keys.push_back(static_cast<std::int32_t>(off + t));
      mask.add_row(keys);
    }
    off += len;
  }
  return mask;
}

Tensor token_rows(const DecoderParams& p, std::span<const std::int64_t> ids) {
  for (auto id : ids) {
    if (id < 0 || id >= p.config.vocab_size) throw std::invalid_argument("token id " + std::to_string(id) + " outside vocabulary");
  }
  return embedding(p.token_embedding, ids);
}

}  // namespace

DecoderParams DecoderParams::make(const DecoderConfig& config, Rng& rng) {
  config.validate();
  const auto p = config.precision;
  const auto d = config.d_dec;
  DecoderParams dp;
  dp.config = config;
  dp.token_embedding = normal_tensor({config.vocab_size, d}, 1.0, rng, p);
  dp.position_embedding = normal_tensor({config.max_seq, d}, 0.1, rng, p);
  dp.soft_proj = Linear::make(config.d_soft, d, rng, p, true, 1.0 / std::sqrt(static_cast<double>(config.d_soft)));
  for (int b = 0; b < config.blocks; ++b) {
    DecoderBlock blk{LayerNorm::make(d, p),
                     LayerNorm::make(d, p),
                     adapted(d, d, rng, p),
                     adapted(d, d, rng, p),
                     adapted(d, d, rng, p),
                     adapted(d, d, rng, p),
                     adapted(d, config.ffn_hidden, rng, p),
                     adapted(d, config.ffn_hidden, rng, p),
                     adapted(config.ffn_hidden, d, rng, p)};
    dp.blocks.push_back(std::move(blk));
  }
  dp.ln_final = LayerNorm::make(d, p);
  dp.lm_head = Linear::make(d, config.vocab_size, rng, p, true, 1.0 / std::sqrt(static_cast<double>(d)));
  return dp;
}

ParameterSet DecoderParams::parameters() const {
  ParameterSet ps;
  ps.add("dec.tok", token_embedding);
  ps.add("dec.pos", position_embedding);
  soft_proj.collect(ps, "dec.soft_proj");
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    const std::string prefix = "dec.block" + std::to_string(i);
    b.ln_attn.collect(ps, prefix + ".ln_attn");
    b.ln_ffn.collect(ps, prefix + ".ln_ffn");
    for_each_adapted(b, [&](const AdaptedLinear& l, const char* name) { l.collect(ps, prefix + "." + name); });
  }
  ln_final.collect(ps, "dec.ln_final");
  lm_head.collect(ps, "dec.lm_head");
  return ps;
}

ParameterSet DecoderParams::lora_parameters() const {
  ParameterSet ps;
  const auto all = parameters();
  for (const auto& item : all.items()) {
    if (item.name.find(".lora_") != std::string::npos) ps.add(item.name, item.tensor);
  }
  return ps;
}

ParameterSet DecoderParams::base_parameters() const {
  ParameterSet ps;
  const auto all = parameters();
  for (const auto& item : all.items()) {
    if (item.name.find(".lora_") == std::string::npos) ps.add(item.name, item.tensor);
  }
  return ps;
}

void DecoderParams::attach_lora(const LoRAConfig& lc, Rng& rng) {
  for (auto& b : blocks) {
    for_each_adapted(b, [&](AdaptedLinear& l) {
      l.lora = LoRAAdapter::make(l.base.weight.dim(0), l.base.weight.dim(1), lc, rng, config.precision);
    });
  }
}

bool DecoderParams::has_lora() const { return !blocks.empty() && blocks.front().q.lora.has_value(); }

void DecoderParams::freeze_base() { set_requires_grad(base_parameters(), false); }

AssembledInput assemble_input(const DecoderParams& p, const Tensor& queries, std::span<const std::int64_t> smiles,
                              std::span<const std::int64_t> prompt, std::span<const std::int64_t> caption) {
  if (queries.rank() != 2 || queries.dim(1) != p.config.d_soft) {
    throw ShapeError("assemble_input: query rows must be [n, " + std::to_string(p.config.d_soft) + "], got " +
                     numerics::to_string(queries.shape()));
  }
  const auto nq = queries.dim(0);
  const auto len = nq + static_cast<std::int64_t>(prompt.size() + smiles.size() + caption.size());
  if (len > p.config.max_seq) {
    throw std::invalid_argument("assemble_input: sequence length " + std::to_string(len) + " exceeds max_seq " +
                                std::to_string(p.config.max_seq));
  }
  std::vector<Tensor> parts;
  for (auto part : p.config.order) {
    if (part == InputPart::kQueries) {
      if (nq > 0) parts.push_back(p.soft_proj(queries));
    } else {
      const auto ids = part == InputPart::kPrompt ? prompt : smiles;
      if (!ids.empty()) parts.push_back(token_rows(p, ids));
    }
  }
  if (!caption.empty()) parts.push_back(token_rows(p, caption));
  if (parts.empty()) throw std::invalid_argument("assemble_input: empty sequence");
  if (len == static_cast<std::int64_t>(caption.size())) {
    throw std::invalid_argument("assemble_input: a caption needs at least one prefix position");
  }
  const Tensor content = parts.size() == 1 ? parts[0] : concat(parts, 0);
  std::vector<std::int64_t> positions(static_cast<std::size_t>(len));
  std::iota(positions.begin(), positions.end(), 0);

  AssembledInput in;
  in.embeds = add(content, embedding(p.position_embedding, positions));
  in.length = len;
  in.caption_start = len - static_cast<std::int64_t>(caption.size());
  in.targets.assign(static_cast<std::size_t>(len), kIgnoreIndex);
  // Position t predicts the token at t + 1.
  for (std::size_t c = 0; c < caption.size(); ++c) {
    in.targets[static_cast<std::size_t>(in.caption_start) + c - 1] = caption[c];
  }
  in.target_count = static_cast<std::int64_t>(caption.size());
  return in;
}

Tensor decode(const DecoderParams& p, std::span<const AssembledInput> inputs, Rng* dropout_rng) {
  if (inputs.empty()) throw std::invalid_argument("decode: no inputs");
  std::vector<Tensor> rows;
  std::vector<std::int64_t> lengths;
  for (const auto& in : inputs) {
    rows.push_back(in.embeds);
    lengths.push_back(in.length);
  }
  Tensor x = rows.size() == 1 ? rows[0] : concat(rows, 0);
  const AttentionMask mask = block_causal_mask(lengths);
  const int heads = p.config.heads;
  for (const auto& b : p.blocks) {
    const Tensor h = b.ln_attn(x);
    const Tensor a = attention(b.q(h, dropout_rng), b.k(h, dropout_rng), b.v(h, dropout_rng), heads, mask);
    x = add(x, b.o(a, dropout_rng));
    const Tensor f = b.ln_ffn(x);
    x = add(x, b.down(mul(gelu(b.gate(f, dropout_rng)), b.up(f, dropout_rng)), dropout_rng));
  }
  return p.lm_head(p.ln_final(x));
}

Tensor caption_loss(const DecoderParams& p, std::span<const AssembledInput> inputs, Rng* dropout_rng) {
  std::vector<std::int64_t> targets;
  std::int64_t count = 0;
  for (const auto& in : inputs) {
    targets.insert(targets.end(), in.targets.begin(), in.targets.end());
    count += in.target_count;
  }
  if (count == 0) throw std::invalid_argument("caption_loss: no caption targets");
  return cross_entropy(decode(p, inputs, dropout_rng), targets);
}

std::vector<std::int64_t> caption_tokens(std::string_view text, const moldata::Vocabulary& vocab) {
  std::vector<std::int64_t> ids;
  for (const auto& w : moldata::split_words(text)) ids.push_back(vocab.id(w));
  ids.push_back(moldata::kSepId);
  return ids;
}

std::vector<std::int64_t> prompt_tokens(const DecoderConfig& config, const moldata::Vocabulary& vocab) {
  std::vector<std::int64_t> ids;
  for (const auto& w : moldata::split_words(config.prompt)) ids.push_back(vocab.id(w));
  return ids;
}

std::vector<std::int64_t> smiles_tokens(const std::string& smiles, const moldata::Vocabulary& vocab) {
  std::vector<std::int64_t> ids;
  for (const auto& piece : moldata::smiles_pieces(smiles)) ids.push_back(vocab.id(piece));
  return ids;
}

std::vector<std::int64_t> generate_greedy(const DecoderParams& p, const Tensor& queries,
                                          std::span<const std::int64_t> smiles, std::span<const std::int64_t> prompt,
                                          int max_new) {
  NoGradGuard no_grad;
  std::vector<std::int64_t> out;
  const auto prefix = queries.dim(0) + static_cast<std::int64_t>(smiles.size() + prompt.size());
  if (prefix == 0) throw std::invalid_argument("generate_greedy: empty prefix");
  const auto vocab = p.config.vocab_size;
  while (static_cast<int>(out.size()) < max_new && prefix + static_cast<std::int64_t>(out.size()) < p.config.max_seq) {
    const AssembledInput in[] = {assemble_input(p, queries, smiles, prompt, out)};
    const Tensor logits = decode(p, in);
    const auto last = logits.data().subspan(static_cast<std::size_t>((in[0].length - 1) * vocab),
                                            static_cast<std::size_t>(vocab));
    // Ties go to the lowest id.
    const auto next = static_cast<std::int64_t>(std::max_element(last.begin(), last.end()) - last.begin());
    if (next == moldata::kSepId) break;
    out.push_back(next);
  }
  return out;
}

double pretrain_decoder(DecoderParams& p, const std::vector<std::vector<std::int64_t>>& texts,
                        const LMPretrainConfig& config) {
  if (texts.empty()) throw std::invalid_argument("pretrain_decoder: no texts");
  Rng rng(config.seed);
  const auto params = p.base_parameters();
  std::vector<NamedTensor> trainable;
  for (const auto& item : params.items()) {
    if (item.name.rfind("dec.soft_proj", 0) != 0) trainable.push_back(item);
  }
  set_requires_grad(params, true);
  AdamW opt(trainable);
  std::vector<std::size_t> order(texts.size());
  std::iota(order.begin(), order.end(), 0);
  double last = 0.0;
  const Tensor no_queries = Tensor::zeros({0, p.config.d_soft}, p.config.precision);
  for (int e = 0; e < config.epochs; ++e) {
    rng.shuffle(std::span<std::size_t>(order));
    double sum = 0.0;
    int batches = 0;
    for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(config.batch_size)) {
      std::vector<AssembledInput> batch;
      for (std::size_t i = s; i < std::min(order.size(), s + static_cast<std::size_t>(config.batch_size)); ++i) {
        const auto& t = texts[order[i]];
        if (t.size() < 2) throw std::invalid_argument("pretrain_decoder: text needs at least two tokens");
        // First token is context; the rest are targets.
        batch.push_back(assemble_input(p, no_queries, {}, std::span<const std::int64_t>(t).first(1),
                                       std::span<const std::int64_t>(t).subspan(1)));
      }
      opt.zero_grad();
      const Tensor loss = caption_loss(p, batch);
      backward(loss);
      opt.step(config.lr);
      sum += loss.item();
      ++batches;
    }
    last = sum / batches;
  }
  set_requires_grad(params, false);
  return last;
}

}  // namespace molalign::captionlm
