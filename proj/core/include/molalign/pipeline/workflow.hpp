#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "molalign/captionlm/captionlm.hpp"
#include "molalign/encoders/encoders.hpp"
#include "molalign/evalmetrics/evalmetrics.hpp"
#include "molalign/moldata/dataset.hpp"
#include "molalign/mqformer/mqformer.hpp"
#include "molalign/pipeline/checkpoint.hpp"
#include "molalign/pipeline/config.hpp"

namespace molalign::pipeline {

// Independent generator for one purpose of a run, derived from the master seed.
enum class SeedStream : std::uint64_t { kInit = 1, kShuffle = 2, kLoss = 3, kDecoder = 4, kLora = 5, kDropout = 6 };
numerics::Rng stream_rng(std::uint64_t seed, SeedStream stream);

struct Models {
  moldata::Vocabulary vocab;
  encoders::EncoderParams enc2d, enc3d;
  mqformer::MQFormerParams mq;
  std::optional<captionlm::DecoderParams> dec;

  // Encoders ("enc2d.", "enc3d."), then "mq.", then "dec." when present.
  numerics::ParameterSet parameters() const;
};

// Caption words, the instruction prompt and every SMILES piece of the records.
moldata::Vocabulary build_run_vocab(std::span<const moldata::DatasetRecord> records, const Config& config);
// Fresh encoders (frozen) and MQ-Former; no decoder.
Models make_models(const Config& config, moldata::Vocabulary vocab);
// Builds the architecture from config, then loads every array; decoder and
// adapters are created when the checkpoint holds them.
Models models_from_checkpoint(const Config& config, const Checkpoint& ckpt);
Checkpoint checkpoint_of(const Models& models, const Config& config, const std::string& kind);

// Frozen-encoder outputs and token lists computed once per record.
struct EncodedSet {
  std::vector<std::string> ids;
  std::vector<numerics::Tensor> h2d, h3d;
  std::vector<std::vector<std::int64_t>> texts;  // [DEC] words [SEP]
  std::vector<std::vector<std::int64_t>> smiles;
  std::vector<std::vector<std::int64_t>> captions;  // words [SEP]
  std::vector<std::string> references;
  std::size_t size() const { return ids.size(); }
};
EncodedSet encode_set(const Models& models, std::span<const moldata::DatasetRecord> records, const Config& config);
mqformer::MQInputs batch_inputs(const EncodedSet& set, std::span<const std::size_t> indices, bool with_text = true);

// Append-only line-delimited JSON log.
class RunLog {
 public:
  explicit RunLog(const std::filesystem::path& path);
  void write(const nlohmann::json& record);
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};
// Reproducibility header: command, config hash, seed and the dataset's blob hash.
nlohmann::json run_header(const std::string& command, const Config& config);

struct StepRecord {
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  double mtc = 0.0, mtm = 0.0, mcap = 0.0, total = 0.0;
  double lr = 0.0;
};
nlohmann::json to_json(const StepRecord& r);

// Called after every optimizer step; returning false ends training there.
using StepHook = std::function<bool(const StepRecord&, const Models&)>;

// Whether a parameter is optimized in stage 1 under the configured views and
// loss terms (parameters no enabled term touches are left out).
bool stage1_trainable(const std::string& name, const Config& config);
// Stage 2 optimizes the adapters and the MQ-Former's query path only.
bool stage2_trainable(const std::string& name, const Config& config);

struct Stage1Result {
  std::int64_t steps = 0;
  bool stopped_early = false;
  std::int64_t trainable_parameters = 0;
  std::vector<StepRecord> history;
  double seconds = 0.0;
};
Stage1Result train_stage1(Models& models, const EncodedSet& data, const Config& config, RunLog* log = nullptr,
                          const StepHook& hook = {});

struct Stage2Record {
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct Stage2Result {
  std::int64_t steps = 0;
  std::int64_t trainable_parameters = 0;
  std::int64_t lora_parameters = 0;
  std::int64_t mqformer_parameters = 0;
  double decoder_pretrain_loss = 0.0;
  std::vector<Stage2Record> history;
  double seconds = 0.0;
};
// Creates the decoder (optionally language-model pretrained) and its adapters
// when the models do not carry one yet.
void prepare_decoder(Models& models, const EncodedSet& data, const Config& config, Stage2Result* report = nullptr);
Stage2Result train_stage2(Models& models, const EncodedSet& data, const Config& config, RunLog* log = nullptr);

// Universal query rows for the molecules of a batch, one segment per molecule.
mqformer::MQOutput molecule_queries(const Models& models, const EncodedSet& data, std::span<const std::size_t> indices);

struct RetrievalReport {
  evalmetrics::RetrievalResult in_batch, full_set;
};
RetrievalReport evaluate_retrieval(const Models& models, const EncodedSet& data, const Config& config);

struct CaptionPrediction {
  std::string id, prediction, reference;
};
std::vector<CaptionPrediction> generate_captions(const Models& models, const EncodedSet& data, const Config& config);
evalmetrics::CaptionScores score_predictions(std::span<const CaptionPrediction> predictions);
void write_predictions(const std::filesystem::path& path, std::span<const CaptionPrediction> predictions);

std::vector<mqformer::AttentionExportRow> attention_export(const Models& models, const EncodedSet& data,
                                                           const Config& config);
// Query cosine from the universal queries; attention entropy from the export.
evalmetrics::DiversityReport evaluate_diversity(const Models& models, const EncodedSet& data, const Config& config);

// Reassigns conformers between records with the same atom count, keeping each
// molecule's graph and caption. Used to cut the link between geometry and text.
void shuffle_coords(std::vector<moldata::DatasetRecord>& records, std::uint64_t seed);

}  // namespace molalign::pipeline
