#include "molalign/pipeline/workflow.hpp"

#include <algorithm>
#include <chrono>
#include <map>
#include <numeric>

#include "molalign/objectives/objectives.hpp"
#include "molalign/pipeline/hashing.hpp"

namespace molalign::pipeline {

using numerics::NamedTensor;
using numerics::ParameterSet;
using numerics::Rng;
using numerics::Tensor;

namespace {

void append(ParameterSet& into, ParameterSet&& from) {
  for (auto& item : std::move(from).items()) into.add(std::move(item.name), std::move(item.tensor));
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<std::size_t> range(std::size_t first, std::size_t last) {
  std::vector<std::size_t> v(last - first);
  std::iota(v.begin(), v.end(), first);
  return v;
}

// Splits a shuffled order into batches; a trailing batch smaller than min_size is dropped.
std::vector<std::vector<std::size_t>> batches_of(const std::vector<std::size_t>& order, std::size_t size,
                                                 std::size_t min_size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < order.size(); s += size) {
    std::vector<std::size_t> b(order.begin() + static_cast<std::ptrdiff_t>(s),
                               order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), s + size)));
    if (b.size() >= min_size) out.push_back(std::move(b));
  }
  return out;
}

void set_trainable(const ParameterSet& params, const std::function<bool(const std::string&)>& keep) {
  for (const auto& [name, t] : params.items()) {
    Tensor handle = t;
    handle.set_requires_grad(keep(name));
  }
}

}  // namespace

Rng stream_rng(std::uint64_t seed, SeedStream stream) {
  return Rng(seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(stream));
}

ParameterSet Models::parameters() const {
  ParameterSet ps;
  append(ps, enc2d.parameters("enc2d"));
  append(ps, enc3d.parameters("enc3d"));
  append(ps, mq.parameters());
  if (dec) append(ps, dec->parameters());
  return ps;
}

moldata::Vocabulary build_run_vocab(std::span<const moldata::DatasetRecord> records, const Config& config) {
  std::vector<std::string> corpus;
  std::vector<std::string> extra;
  for (const auto& r : records) {
    corpus.push_back(r.text);
    const auto smiles = r.molecule.smiles.empty() ? moldata::write_smiles(r.molecule) : r.molecule.smiles;
    for (auto& piece : moldata::smiles_pieces(smiles)) extra.push_back(std::move(piece));
  }
  corpus.push_back(config.prompt);
  return moldata::build_vocab(corpus, extra);
}

Models make_models(const Config& config, moldata::Vocabulary vocab) {
  config.validate();
  Rng rng = stream_rng(config.seed, SeedStream::kInit);
  const auto ec = config.encoder_config();
  auto enc2d = encoders::EncoderParams::make(encoders::View::k2D, ec, rng);
  auto enc3d = encoders::EncoderParams::make(encoders::View::k3D, ec, rng);
  enc2d.freeze();
  enc3d.freeze();
  auto mq = mqformer::MQFormerParams::make(config.mqformer_config(vocab.size()), rng);
  return Models{std::move(vocab), std::move(enc2d), std::move(enc3d), std::move(mq), std::nullopt};
}

Models models_from_checkpoint(const Config& config, const Checkpoint& ckpt) {
  if (ckpt.vocab.empty()) throw CheckpointError("checkpoint of kind '" + ckpt.kind + "' carries no vocabulary");
  Models m = make_models(config, moldata::Vocabulary::from_tokens(ckpt.vocab));
  if (ckpt.has_prefix("dec.")) {
    Rng dec_rng = stream_rng(config.seed, SeedStream::kDecoder);
    m.dec = captionlm::DecoderParams::make(config.decoder_config(m.vocab.size()), dec_rng);
    const bool adapted = std::any_of(ckpt.arrays.begin(), ckpt.arrays.end(),
                                     [](const CheckpointArray& a) { return a.name.find(".lora_") != std::string::npos; });
    if (adapted) {
      Rng lora_rng = stream_rng(config.seed, SeedStream::kLora);
      m.dec->attach_lora(config.lora_config(), lora_rng);
    }
    m.dec->freeze_base();
  }
  restore(ckpt, m.parameters());
  return m;
}

Checkpoint checkpoint_of(const Models& models, const Config& config, const std::string& kind) {
  return make_checkpoint(models.parameters(), kind, canonical_text(config), config_hash(config),
                         models.vocab.tokens());
}

EncodedSet encode_set(const Models& models, std::span<const moldata::DatasetRecord> records, const Config& config) {
  numerics::NoGradGuard no_grad;
  EncodedSet s;
  const auto& mc = models.mq.config;
  for (const auto& r : records) {
    s.ids.push_back(r.id);
    if (mc.has_2d_branch()) s.h2d.push_back(encoders::encode_2d(r.molecule, models.enc2d).h);
    if (mc.has_3d_branch() || mc.views == mqformer::ViewMode::kPrecombined) {
      if (!r.molecule.has_coords()) {
        throw std::invalid_argument("record " + r.id + " has no coordinates but the 3D view is enabled");
      }
      s.h3d.push_back(encoders::encode_3d(r.molecule, models.enc3d).h);
    }
    s.texts.push_back(moldata::tokenize(r.text, models.vocab, config.max_text_len, 0).token_ids);
    const auto smiles = r.molecule.smiles.empty() ? moldata::write_smiles(r.molecule) : r.molecule.smiles;
    s.smiles.push_back(captionlm::smiles_tokens(smiles, models.vocab));
    s.captions.push_back(captionlm::caption_tokens(r.text, models.vocab));
    s.references.push_back(r.text);
  }
  return s;
}

mqformer::MQInputs batch_inputs(const EncodedSet& set, std::span<const std::size_t> indices, bool with_text) {
  mqformer::MQInputs in;
  for (auto i : indices) {
    if (!set.h2d.empty()) in.h2d.push_back(set.h2d[i]);
    if (!set.h3d.empty()) in.h3d.push_back(set.h3d[i]);
    if (with_text) in.texts.push_back(set.texts[i]);
  }
  return in;
}

RunLog::RunLog(const std::filesystem::path& path) : path_(path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  out_.open(path, std::ios::app);
  if (!out_) throw IoError("cannot open log " + path.string());
}

void RunLog::write(const nlohmann::json& record) {
  out_ << record.dump() << '\n';
  out_.flush();
  if (!out_) throw IoError("write failed for log " + path_.string());
}

nlohmann::json run_header(const std::string& command, const Config& config) {
  nlohmann::json h = {{"type", "header"},
                      {"command", command},
                      {"config_hash", config_hash(config)},
                      {"seed", config.seed},
                      {"dataset", config.data}};
  h["dataset_sha1"] = config.data.empty() ? std::string() : git_blob_sha1_file(config.data);
  return h;
}

nlohmann::json to_json(const StepRecord& r) {
  return {{"type", "step"}, {"step", r.step}, {"epoch", r.epoch}, {"mtc", r.mtc}, {"mtm", r.mtm},
          {"mcap", r.mcap}, {"total", r.total}, {"lr", r.lr}};
}

bool stage1_trainable(const std::string& name, const Config& config) {
  if (!name.starts_with("mq.")) return false;
  const auto views = mqformer::parse_view_mode(config.views);
  switch (views) {
    case mqformer::ViewMode::k2D:
      if (mqformer::is_3d_only_parameter(name)) return false;
      break;
    case mqformer::ViewMode::k3D:
      if (mqformer::is_2d_only_parameter(name)) return false;
      break;
    case mqformer::ViewMode::kPrecombined:
      // One query set over a memory holding both projections.
      if (mqformer::is_3d_only_parameter(name) && name.find("proj3d") == std::string::npos) return false;
      break;
    case mqformer::ViewMode::kBoth:
      break;
  }
  if (!config.use_mtm && name.find("mtm_head") != std::string::npos) return false;
  if (!config.use_mcap && name.find("lm_head") != std::string::npos) return false;
  return true;
}

bool stage2_trainable(const std::string& name, const Config& config) {
  if (name.find(".lora_") != std::string::npos) return true;
  return stage1_trainable(name, config) && !mqformer::is_text_path_parameter(name);
}

Stage1Result train_stage1(Models& models, const EncodedSet& data, const Config& config, RunLog* log,
                          const StepHook& hook) {
  config.validate();
  if (data.size() < 2) throw std::invalid_argument("train_stage1: need at least two records");
  const auto t0 = std::chrono::steady_clock::now();
  const auto params = models.parameters();
  set_trainable(params, [&](const std::string& n) { return stage1_trainable(n, config); });
  numerics::AdamWConfig ac;
  ac.weight_decay = config.weight_decay;
  numerics::AdamW opt(params.trainable(), ac);
  const auto oc = config.objective_config();
  const auto schedule = config.stage1_schedule();
  Rng shuffle_rng = stream_rng(config.seed, SeedStream::kShuffle);
  Rng loss_rng = stream_rng(config.seed, SeedStream::kLoss);

  Stage1Result result;
  result.trainable_parameters = params.count(true);
  std::vector<std::size_t> order = range(0, data.size());
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    shuffle_rng.shuffle(std::span<std::size_t>(order));
    for (const auto& batch : batches_of(order, static_cast<std::size_t>(config.batch_size), 2)) {
      if (config.max_steps > 0 && result.steps >= config.max_steps) break;
      const auto step = result.steps + 1;
      const double lr = schedule.at(step, epoch);
      const auto losses = objectives::stage1_losses(models.mq, batch_inputs(data, batch), oc, loss_rng);
      opt.zero_grad();
      numerics::backward(losses.total);
      opt.step(lr);
      StepRecord rec{step, epoch, losses.mtc_value(), losses.mtm_value(), losses.mcap_value(), losses.total_value(), lr};
      result.steps = step;
      result.history.push_back(rec);
      if (log) log->write(to_json(rec));
      if (hook && !hook(rec, models)) {
        result.stopped_early = true;
        break;
      }
    }
    if (result.stopped_early || (config.max_steps > 0 && result.steps >= config.max_steps)) break;
  }
  set_requires_grad(params, false);
  result.seconds = seconds_since(t0);
  return result;
}

mqformer::MQOutput molecule_queries(const Models& models, const EncodedSet& data, std::span<const std::size_t> indices) {
  std::vector<mqformer::Stream> streams;
  for (std::size_t j = 0; j < indices.size(); ++j) streams.push_back({static_cast<int>(j), -1});
  mqformer::ForwardOptions opt;
  opt.mode = mqformer::MaskMode::kUnimodal;
  return mqformer::forward(models.mq, batch_inputs(data, indices, false), streams, opt);
}

namespace {

std::vector<std::vector<std::int64_t>> lm_texts(const EncodedSet& data) {
  // [DEC] words [SEP]: the first token is context only.
  return data.texts;
}

}  // namespace

void prepare_decoder(Models& models, const EncodedSet& data, const Config& config, Stage2Result* report) {
  if (models.dec) return;
  Rng dec_rng = stream_rng(config.seed, SeedStream::kDecoder);
  models.dec = captionlm::DecoderParams::make(config.decoder_config(models.vocab.size()), dec_rng);
  if (config.decoder_pretrain_epochs > 0) {
    captionlm::LMPretrainConfig lc;
    lc.epochs = config.decoder_pretrain_epochs;
    lc.batch_size = config.stage2_batch_size;
    lc.lr = config.stage2_lr;
    lc.seed = config.seed;
    const double loss = captionlm::pretrain_decoder(*models.dec, lm_texts(data), lc);
    if (report) report->decoder_pretrain_loss = loss;
  }
  Rng lora_rng = stream_rng(config.seed, SeedStream::kLora);
  models.dec->attach_lora(config.lora_config(), lora_rng);
}

Stage2Result train_stage2(Models& models, const EncodedSet& data, const Config& config, RunLog* log) {
  config.validate();
  if (data.size() == 0) throw std::invalid_argument("train_stage2: no records");
  const auto t0 = std::chrono::steady_clock::now();
  Stage2Result result;
  prepare_decoder(models, data, config, &result);
  auto& dec = *models.dec;
  dec.freeze_base();
  const auto params = models.parameters();
  set_trainable(params, [&](const std::string& n) { return stage2_trainable(n, config); });
  result.trainable_parameters = params.count(true);
  result.lora_parameters = dec.lora_parameters().count(true);
  result.mqformer_parameters = models.mq.parameters().count(true);

  numerics::AdamWConfig ac;
  ac.weight_decay = config.weight_decay;
  numerics::AdamW opt(params.trainable(), ac);
  const auto schedule = config.stage2_schedule();
  Rng shuffle_rng = stream_rng(config.seed, SeedStream::kShuffle);
  Rng dropout_rng = stream_rng(config.seed, SeedStream::kDropout);
  const auto prompt = captionlm::prompt_tokens(dec.config, models.vocab);

  std::vector<std::size_t> order = range(0, data.size());
  for (int epoch = 0; epoch < config.stage2_epochs; ++epoch) {
    shuffle_rng.shuffle(std::span<std::size_t>(order));
    for (const auto& batch : batches_of(order, static_cast<std::size_t>(config.stage2_batch_size), 1)) {
      if (config.stage2_max_steps > 0 && result.steps >= config.stage2_max_steps) break;
      const auto step = result.steps + 1;
      const double lr = schedule.at(step, epoch);
      const auto out = molecule_queries(models, data, batch);
      std::vector<captionlm::AssembledInput> inputs;
      for (std::size_t j = 0; j < batch.size(); ++j) {
        const auto& seg = out.query_segments[j];
        inputs.push_back(captionlm::assemble_input(dec, numerics::slice(out.queries, 0, seg.offset, seg.offset + seg.length),
                                                   data.smiles[batch[j]], prompt, data.captions[batch[j]]));
      }
      const Tensor loss = captionlm::caption_loss(dec, inputs, &dropout_rng);
      opt.zero_grad();
      numerics::backward(loss);
      opt.step(lr);
      Stage2Record rec{step, epoch, loss.item(), lr};
      result.steps = step;
      result.history.push_back(rec);
      if (log) {
        log->write({{"type", "step"}, {"step", rec.step}, {"epoch", rec.epoch}, {"stage2_loss", rec.loss}, {"lr", rec.lr}});
      }
    }
    if (config.stage2_max_steps > 0 && result.steps >= config.stage2_max_steps) break;
  }
  set_requires_grad(params, false);
  result.seconds = seconds_since(t0);
  return result;
}

RetrievalReport evaluate_retrieval(const Models& models, const EncodedSet& data, const Config& config) {
  numerics::NoGradGuard no_grad;
  const bool single = config.contrastive == "single";
  const auto chunk = static_cast<std::size_t>(config.eval_chunk);
  std::vector<evalmetrics::RetrievalResult> chunks;
  // Full-set pieces: unimodal outputs of a sample do not depend on the others.
  std::vector<double> qvals, tvals, clsvals;
  std::vector<numerics::Segment> qseg, tseg;
  std::int64_t qrows = 0, trows = 0;
  const auto width = models.mq.config.d;
  for (std::size_t s = 0; s < data.size(); s += chunk) {
    const auto idx = range(s, std::min(data.size(), s + chunk));
    const auto out = objectives::retrieval_forward(models.mq, batch_inputs(data, idx));
    if (idx.size() >= 2) {
      const auto sim = objectives::similarity(out, single);
      chunks.push_back(evalmetrics::retrieval_eval(sim.s, sim.s_prime, "in-batch"));
    }
    const auto qd = out.queries.data();
    qvals.insert(qvals.end(), qd.begin(), qd.end());
    for (const auto& g : out.query_segments) qseg.push_back({qrows + g.offset, g.length});
    qrows += out.queries.dim(0);
    const auto td = out.text.data();
    tvals.insert(tvals.end(), td.begin(), td.end());
    for (const auto& g : out.text_segments) {
      tseg.push_back({trows + g.offset, g.length});
      const auto row = td.subspan(static_cast<std::size_t>(g.offset * width), static_cast<std::size_t>(width));
      clsvals.insert(clsvals.end(), row.begin(), row.end());
    }
    trows += out.text.dim(0);
  }
  RetrievalReport r;
  r.in_batch = evalmetrics::merge_chunks(chunks, config.eval_chunk);
  const auto p = numerics::Precision::kFloat64;
  const Tensor q = Tensor::from({qrows, width}, std::move(qvals), p);
  if (single) {
    const auto n = static_cast<std::int64_t>(data.size());
    const auto sim = objectives::sim_single(q, qseg, Tensor::from({n, width}, std::move(clsvals), p));
    r.full_set = evalmetrics::retrieval_eval(sim.s, sim.s_prime, "full-set");
  } else {
    const auto [s, sp] = evalmetrics::full_set_similarity(q, qseg, Tensor::from({trows, width}, std::move(tvals), p), tseg);
    r.full_set = evalmetrics::retrieval_eval(s, sp, "full-set");
  }
  return r;
}

std::vector<CaptionPrediction> generate_captions(const Models& models, const EncodedSet& data, const Config& config) {
  if (!models.dec) throw std::invalid_argument("generate_captions: the checkpoint has no decoder (run stage 2 first)");
  numerics::NoGradGuard no_grad;
  const auto prompt = captionlm::prompt_tokens(models.dec->config, models.vocab);
  std::vector<CaptionPrediction> out;
  const auto chunk = static_cast<std::size_t>(config.eval_chunk);
  for (std::size_t s = 0; s < data.size(); s += chunk) {
    const auto idx = range(s, std::min(data.size(), s + chunk));
    const auto q = molecule_queries(models, data, idx);
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const auto& seg = q.query_segments[j];
      const auto ids = captionlm::generate_greedy(*models.dec, numerics::slice(q.queries, 0, seg.offset, seg.offset + seg.length),
                                                  data.smiles[idx[j]], prompt, config.max_new);
      out.push_back({data.ids[idx[j]], moldata::detokenize(ids, models.vocab), data.references[idx[j]]});
    }
  }
  return out;
}

evalmetrics::CaptionScores score_predictions(std::span<const CaptionPrediction> predictions) {
  std::vector<std::string> c, r;
  for (const auto& p : predictions) {
    c.push_back(p.prediction);
    r.push_back(p.reference);
  }
  return evalmetrics::score_corpus(c, r);
}

void write_predictions(const std::filesystem::path& path, std::span<const CaptionPrediction> predictions) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& p : predictions) {
    out << nlohmann::json{{"id", p.id}, {"prediction", p.prediction}, {"reference", p.reference}}.dump() << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

std::vector<mqformer::AttentionExportRow> attention_export(const Models& models, const EncodedSet& data,
                                                           const Config& config) {
  const auto mode = config.attn_mode == "unimodal" ? mqformer::MaskMode::kUnimodal
                    : config.attn_mode == "causal" ? mqformer::MaskMode::kCausalText
                                                   : mqformer::MaskMode::kBimodal;
  std::vector<mqformer::AttentionExportRow> rows;
  const auto chunk = static_cast<std::size_t>(config.eval_chunk);
  for (std::size_t s = 0; s < data.size(); s += chunk) {
    const auto idx = range(s, std::min(data.size(), s + chunk));
    std::vector<std::string> ids;
    for (auto i : idx) ids.push_back(data.ids[i]);
    auto part = mqformer::attention_rows(models.mq, batch_inputs(data, idx), ids, models.vocab, mode, config.attn_layer);
    rows.insert(rows.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  }
  return rows;
}

evalmetrics::DiversityReport evaluate_diversity(const Models& models, const EncodedSet& data, const Config& config) {
  numerics::NoGradGuard no_grad;
  double cosine_sum = 0.0;
  std::int64_t samples = 0;
  const auto chunk = static_cast<std::size_t>(config.eval_chunk);
  for (std::size_t s = 0; s < data.size(); s += chunk) {
    const auto idx = range(s, std::min(data.size(), s + chunk));
    const auto q = molecule_queries(models, data, idx);
    const auto part = evalmetrics::query_diversity(q.queries, q.query_segments);
    cosine_sum += part.mean_pairwise_cosine * static_cast<double>(part.samples);
    samples += part.samples;
  }
  const auto rows = attention_export(models, data, config);
  auto report = evalmetrics::query_diversity(rows);
  report.mean_pairwise_cosine = samples > 0 ? cosine_sum / static_cast<double>(samples) : 0.0;
  report.samples = samples;
  return report;
}

void shuffle_coords(std::vector<moldata::DatasetRecord>& records, std::uint64_t seed) {
  Rng rng(seed);
  std::map<int, std::vector<std::size_t>> by_size;
  for (std::size_t i = 0; i < records.size(); ++i) by_size[records[i].molecule.atom_count()].push_back(i);
  for (auto& [n, members] : by_size) {
    std::vector<std::size_t> perm = members;
    rng.shuffle(std::span<std::size_t>(perm));
    std::vector<std::optional<moldata::Coords>> coords;
    for (auto i : perm) coords.push_back(records[i].molecule.coords);
    for (std::size_t k = 0; k < members.size(); ++k) records[members[k]].molecule.coords = std::move(coords[k]);
  }
}

}  // namespace molalign::pipeline
