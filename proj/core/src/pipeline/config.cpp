#include "molalign/pipeline/config.hpp"

#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <sstream>

#include "molalign/pipeline/hashing.hpp"

namespace molalign::pipeline {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <class T>
T parse_value(const std::string& key, const std::string& v);

template <>
std::string parse_value<std::string>(const std::string&, const std::string& v) {
  return v;
}

template <>
bool parse_value<bool>(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: " + key + " expects true or false, got '" + v + "'");
}

template <>
double parse_value<double>(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double x = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size()) throw ConfigError("config: " + key + " expects a number, got '" + v + "'");
  return x;
}

template <class I>
I parse_integer(const std::string& key, const std::string& v) {
  I x{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("config: " + key + " expects an integer, got '" + v + "'");
  }
  return x;
}

template <>
int parse_value<int>(const std::string& key, const std::string& v) {
  return parse_integer<int>(key, v);
}
template <>
std::int64_t parse_value<std::int64_t>(const std::string& key, const std::string& v) {
  return parse_integer<std::int64_t>(key, v);
}
template <>
std::uint64_t parse_value<std::uint64_t>(const std::string& key, const std::string& v) {
  return parse_integer<std::uint64_t>(key, v);
}

std::string format_value(const std::string& v) { return v; }
std::string format_value(bool v) { return v ? "true" : "false"; }
std::string format_value(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
template <class I>
  requires std::is_integral_v<I>
std::string format_value(I v) {
  return std::to_string(v);
}

struct Entry {
  ConfigKey key;
  std::function<void(Config&, const std::string&)> set;
  std::function<std::string(const Config&)> get;
};

template <class T>
Entry field(const char* name, const char* description, T Config::*member) {
  return {{name, description},
          [member, name](Config& c, const std::string& v) { c.*member = parse_value<T>(name, v); },
          [member](const Config& c) { return format_value(c.*member); }};
}

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = {
      field("seed", "master seed for initialization, shuffling and sampling", &Config::seed),
      field("out_dir", "directory for checkpoints, logs and reports", &Config::out_dir),
      field("data", "training dataset (JSONL)", &Config::data),
      field("eval_data", "evaluation dataset (JSONL); empty means data", &Config::eval_data),
      field("encoder_ckpt", "checkpoint with pretrained encoders; empty keeps random frozen encoders",
            &Config::encoder_ckpt),
      field("precision", "f32 or f64", &Config::precision),
      field("d", "MQ-Former width", &Config::d),
      field("d_enc", "encoder width", &Config::d_enc),
      field("d_dec", "decoder width", &Config::d_dec),
      field("queries", "query tokens per view (K)", &Config::queries),
      field("blocks", "MQ-Former blocks (N)", &Config::blocks),
      field("heads", "attention heads in every module", &Config::heads),
      field("ffn_hidden", "feed-forward hidden width", &Config::ffn_hidden),
      field("enc_layers", "encoder layers", &Config::enc_layers),
      field("dec_blocks", "decoder blocks", &Config::dec_blocks),
      field("max_text_len", "maximum text tokens for the MQ-Former", &Config::max_text_len),
      field("max_seq", "maximum decoder sequence length", &Config::max_seq),
      field("views", "both, 2d, 3d or precombined", &Config::views),
      field("contrastive", "multi (token-level) or single ([CLS]) contrast", &Config::contrastive),
      field("tau", "contrastive temperature", &Config::tau),
      field("alpha", "captioning loss weight", &Config::alpha),
      field("use_mtc", "include the contrastive term", &Config::use_mtc),
      field("use_mtm", "include the matching term", &Config::use_mtm),
      field("use_mcap", "include the captioning term", &Config::use_mcap),
      field("lr", "stage-1 peak learning rate", &Config::lr),
      field("warmup", "stage-1 warmup steps", &Config::warmup),
      field("lr_decay", "stage-1 learning-rate decay per epoch", &Config::lr_decay),
      field("weight_decay", "AdamW weight decay", &Config::weight_decay),
      field("epochs", "stage-1 epochs", &Config::epochs),
      field("batch_size", "stage-1 batch size", &Config::batch_size),
      field("max_steps", "stage-1 step cap; 0 disables", &Config::max_steps),
      field("stage2_lr", "stage-2 peak learning rate", &Config::stage2_lr),
      field("stage2_warmup", "stage-2 warmup steps", &Config::stage2_warmup),
      field("stage2_lr_decay", "stage-2 learning-rate decay per epoch", &Config::stage2_lr_decay),
      field("stage2_epochs", "stage-2 epochs", &Config::stage2_epochs),
      field("stage2_batch_size", "stage-2 batch size", &Config::stage2_batch_size),
      field("stage2_max_steps", "stage-2 step cap; 0 disables", &Config::stage2_max_steps),
      field("lora_rank", "adapter rank r", &Config::lora_rank),
      field("lora_alpha", "adapter alpha; scaling is alpha / r", &Config::lora_alpha),
      field("lora_dropout", "adapter input dropout", &Config::lora_dropout),
      field("prompt", "instruction prompt for the decoder", &Config::prompt),
      field("input_order", "decoder input order of queries, prompt and smiles", &Config::input_order),
      field("decoder_pretrain_epochs", "language-model epochs on captions before stage 2; 0 skips",
            &Config::decoder_pretrain_epochs),
      field("max_new", "maximum generated caption tokens", &Config::max_new),
      field("encoder_pretrain_epochs", "masked-atom pretraining epochs", &Config::encoder_pretrain_epochs),
      field("encoder_lr", "masked-atom pretraining learning rate", &Config::encoder_lr),
      field("eval_chunk", "in-batch retrieval chunk size", &Config::eval_chunk),
      field("attn_layer", "block whose self-attention is exported", &Config::attn_layer),
      field("attn_mode", "mask for the attention export: unimodal, bimodal or causal", &Config::attn_mode),
  };
  return table;
}

const Entry& entry(const std::string& key) {
  for (const auto& e : entries())
    if (e.key.name == key) return e;
  throw ConfigError("config: unknown key '" + key + "'");
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError("config: " + what);
}

}  // namespace

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    for (const auto& e : entries()) k.push_back(e.key);
    return k;
  }();
  return keys;
}

void set_key(Config& c, const std::string& key, const std::string& value) { entry(key).set(c, value); }
std::string get_key(const Config& c, const std::string& key) { return entry(key).get(c); }

Config parse_config(const std::string& text, Config base) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const auto body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
    }
    set_key(base, trim(std::string_view(body).substr(0, eq)), trim(std::string_view(body).substr(eq + 1)));
  }
  return base;
}

Config load_config(const std::filesystem::path& path) { return parse_config(read_file(path)); }

void apply_env_overrides(Config& c) {
  if (const char* s = std::getenv("MOLALIGN_SEED"); s && *s) set_key(c, "seed", s);
  if (const char* s = std::getenv("MOLALIGN_OUT_DIR"); s && *s) c.out_dir = s;
}

std::string canonical_text(const Config& c) {
  std::map<std::string, std::string> kv;
  for (const auto& e : entries())
    if (e.key.name != "out_dir") kv[e.key.name] = e.get(c);
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

std::string config_hash(const Config& c) { return sha256_hex(canonical_text(c)).substr(0, 16); }

void Config::validate() const {
  require(precision == "f32" || precision == "f64", "precision must be f32 or f64");
  require(d > 0 && d_enc > 0 && d_dec > 0 && ffn_hidden > 0, "dimensions must be positive");
  require(queries >= 1, "queries (K) must be at least 1");
  require(blocks >= 0 && enc_layers >= 0 && dec_blocks >= 0, "layer counts must be non-negative");
  require(heads > 0 && d % heads == 0 && d_enc % heads == 0 && d_dec % heads == 0,
          "heads must divide d, d_enc and d_dec");
  require(max_text_len > 1 && max_seq > 1, "sequence limits must exceed 1");
  require(tau > 0.0, "tau must be positive");
  require(alpha >= 0.0, "alpha must be non-negative");
  require(use_mtc || use_mtm || use_mcap, "at least one stage-1 loss term must be enabled");
  require(contrastive == "multi" || contrastive == "single", "contrastive must be multi or single");
  require(lr > 0.0 && stage2_lr > 0.0 && encoder_lr > 0.0, "learning rates must be positive");
  require(warmup >= 0 && stage2_warmup >= 0, "warmup must be non-negative");
  require(lr_decay > 0.0 && lr_decay <= 1.0 && stage2_lr_decay > 0.0 && stage2_lr_decay <= 1.0,
          "decay must lie in (0, 1]");
  require(weight_decay >= 0.0, "weight_decay must be non-negative");
  require(epochs >= 0 && stage2_epochs >= 0 && encoder_pretrain_epochs >= 0 && decoder_pretrain_epochs >= 0,
          "epochs must be non-negative");
  require(batch_size >= 2, "batch_size must be at least 2 (matching needs in-batch negatives)");
  require(stage2_batch_size >= 1, "stage2_batch_size must be positive");
  require(max_steps >= 0 && stage2_max_steps >= 0, "step caps must be non-negative");
  require(max_new >= 0, "max_new must be non-negative");
  require(eval_chunk >= 2, "eval_chunk must be at least 2");
  require(attn_mode == "unimodal" || attn_mode == "bimodal" || attn_mode == "causal",
          "attn_mode must be unimodal, bimodal or causal");
  try {
    mqformer::parse_view_mode(views);
    captionlm::parse_input_order(input_order);
    lora_config();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  require(lora_rank > 0, "lora_rank must be positive");
  require(lora_dropout >= 0.0 && lora_dropout < 1.0, "lora_dropout must lie in [0, 1)");
}

numerics::Precision Config::numeric_precision() const {
  return precision == "f64" ? numerics::Precision::kFloat64 : numerics::Precision::kFloat32;
}

encoders::EncoderConfig Config::encoder_config() const {
  encoders::EncoderConfig e;
  e.d_enc = d_enc;
  e.layers = enc_layers;
  e.heads = heads;
  e.ffn_hidden = ffn_hidden;
  e.precision = numeric_precision();
  return e;
}

mqformer::MQFormerConfig Config::mqformer_config(std::int64_t vocab_size) const {
  mqformer::MQFormerConfig m;
  m.d = d;
  m.blocks = blocks;
  m.heads = heads;
  m.queries = queries;
  m.ffn_hidden = ffn_hidden;
  m.d_enc = d_enc;
  m.vocab_size = vocab_size;
  m.max_text_len = max_text_len;
  m.views = mqformer::parse_view_mode(views);
  m.precision = numeric_precision();
  return m;
}

objectives::ObjectiveConfig Config::objective_config() const {
  objectives::ObjectiveConfig o;
  o.tau = tau;
  o.alpha = alpha;
  o.single_token_contrast = contrastive == "single";
  o.use_mtc = use_mtc;
  o.use_mtm = use_mtm;
  o.use_mcap = use_mcap;
  return o;
}

captionlm::DecoderConfig Config::decoder_config(std::int64_t vocab_size) const {
  captionlm::DecoderConfig dc;
  dc.d_dec = d_dec;
  dc.blocks = dec_blocks;
  dc.heads = heads;
  dc.ffn_hidden = ffn_hidden;
  dc.d_soft = d;
  dc.vocab_size = vocab_size;
  dc.max_seq = max_seq;
  dc.prompt = prompt;
  dc.order = captionlm::parse_input_order(input_order);
  dc.precision = numeric_precision();
  return dc;
}

captionlm::LoRAConfig Config::lora_config() const {
  captionlm::LoRAConfig l;
  l.rank = lora_rank;
  l.alpha = lora_alpha;
  l.dropout = lora_dropout;
  return l;
}

numerics::LrSchedule Config::stage1_schedule() const { return {lr, warmup, lr_decay}; }
numerics::LrSchedule Config::stage2_schedule() const { return {stage2_lr, stage2_warmup, stage2_lr_decay}; }

}  // namespace molalign::pipeline
