// molalign command-line entry point. Exit codes: 0 success, 1 invalid input or
// failed check, 2 I/O failure.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <nlohmann/json.hpp>

#include "molalign/moldata/dataset.hpp"
#include "molalign/numerics/tensor.hpp"
#include "molalign/pipeline/gradsuite.hpp"
#include "molalign/pipeline/hashing.hpp"
#include "molalign/pipeline/workflow.hpp"

namespace fs = std::filesystem;
using namespace molalign;
using namespace molalign::pipeline;
using nlohmann::json;

namespace {

constexpr int kOk = 0;
constexpr int kInvalid = 1;
constexpr int kIo = 2;

// Per-subcommand config sources: --config file plus one --<key> flag per config key.
struct ConfigFlags {
  std::string file;
  std::map<std::string, std::string> values;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", file, "key=value config file");
    for (const auto& k : config_keys()) cmd->add_option("--" + k.name, values[k.name], k.description);
  }

  // base < file < environment < flags. Commands that read a checkpoint start
  // from the configuration stored in it.
  Config resolve(CLI::App* cmd, Config base = {}) const {
    Config c = file.empty() ? base : parse_config(read_file(file), base);
    apply_env_overrides(c);
    for (const auto& [key, value] : values)
      if (cmd->count("--" + key) > 0) set_key(c, key, value);
    c.validate();
    return c;
  }
};

std::vector<moldata::DatasetRecord> load_records(const std::string& path, const char* what) {
  if (path.empty()) throw ConfigError(std::string("config: ") + what + " dataset path is empty");
  auto loaded = moldata::load_dataset(path);
  for (const auto& w : loaded.warnings) std::cerr << "warning: " << w << "\n";
  if (loaded.records.empty()) throw ConfigError(std::string("dataset ") + path + " has no usable records");
  return std::move(loaded.records);
}

RunLog open_log(const Config& c, const std::string& command) {
  RunLog log(fs::path(c.out_dir) / (command + ".log.jsonl"));
  log.write(run_header(command, c));
  return log;
}

void print(const json& j) { std::cout << j.dump(2) << std::endl; }

int cmd_gen_synthetic(std::int64_t n, std::uint64_t seed, const std::string& out) {
  const auto records = moldata::gen_synthetic(n, seed);
  moldata::save_dataset(out, records);
  print({{"records", records.size()}, {"path", out}, {"dataset_sha1", git_blob_sha1_file(out)}});
  return kOk;
}

int cmd_pretrain_encoders(const Config& c) {
  auto log = open_log(c, "pretrain-encoders");
  const auto records = load_records(c.data, "training");
  Models m = make_models(c, build_run_vocab(records, c));
  encoders::PretrainConfig pc;
  pc.epochs = c.encoder_pretrain_epochs;
  pc.lr = c.encoder_lr;
  pc.seed = c.seed;
  json report;
  for (auto* enc : {&m.enc2d, &m.enc3d}) {
    const auto r = encoders::pretrain_toy(*enc, records, pc);
    enc->freeze();
    report[encoders::to_string(enc->view)] = {{"final_loss", r.final_loss}, {"accuracy", r.accuracy}, {"chance", r.chance}};
  }
  numerics::ParameterSet ps;
  for (auto* enc : {&m.enc2d, &m.enc3d}) {
    for (auto& item : enc->parameters(std::string("enc") + encoders::to_string(enc->view)).items())
      ps.add(item.name, item.tensor);
  }
  auto ckpt = make_checkpoint(ps, "encoders", canonical_text(c), config_hash(c), {});
  const auto path = fs::path(c.out_dir) / "encoders.ckpt";
  save_checkpoint(path, ckpt);
  report["checkpoint"] = path.string();
  report["checkpoint_sha256"] = file_hash(path);
  log.write({{"type", "result"}, {"report", report}});
  print(report);
  return kOk;
}

int cmd_train_stage1(const Config& c) {
  auto log = open_log(c, "train-stage1");
  const auto records = load_records(c.data, "training");
  Models m = make_models(c, build_run_vocab(records, c));
  if (!c.encoder_ckpt.empty()) restore(load_checkpoint(c.encoder_ckpt), m.parameters(), {"enc2d.", "enc3d."});
  const auto data = encode_set(m, records, c);
  const auto r = train_stage1(m, data, c, &log);
  auto ckpt = checkpoint_of(m, c, "stage1");
  const auto path = fs::path(c.out_dir) / "stage1.ckpt";
  save_checkpoint(path, ckpt);
  json report = {{"steps", r.steps},
                 {"trainable_parameters", r.trainable_parameters},
                 {"seconds", r.seconds},
                 {"checkpoint", path.string()},
                 {"checkpoint_sha256", file_hash(path)},
                 {"config_hash", ckpt.config_hash}};
  if (!r.history.empty()) report["last_step"] = to_json(r.history.back());
  log.write({{"type", "result"}, {"report", report}});
  print(report);
  return kOk;
}

int cmd_train_stage2(const Config& c, const std::string& ckpt_path) {
  auto log = open_log(c, "train-stage2");
  const auto stage1 = load_checkpoint(ckpt_path);
  if (stage1.has_prefix("dec.")) std::cerr << "note: continuing from a checkpoint that already has a decoder\n";
  Models m = models_from_checkpoint(c, stage1);
  const auto records = load_records(c.data, "training");
  const auto data = encode_set(m, records, c);
  const auto r = train_stage2(m, data, c, &log);
  auto ckpt = checkpoint_of(m, c, "stage2");
  const auto path = fs::path(c.out_dir) / "stage2.ckpt";
  save_checkpoint(path, ckpt);
  const auto total = m.parameters().count(false);
  json report = {{"steps", r.steps},
                 {"trainable_parameters", r.trainable_parameters},
                 {"lora_parameters", r.lora_parameters},
                 {"mqformer_parameters", r.mqformer_parameters},
                 {"trainable_fraction", static_cast<double>(r.trainable_parameters) / static_cast<double>(total)},
                 {"decoder_pretrain_loss", r.decoder_pretrain_loss},
                 {"seconds", r.seconds},
                 {"checkpoint", path.string()},
                 {"checkpoint_sha256", file_hash(path)}};
  if (!r.history.empty()) report["last_loss"] = r.history.back().loss;
  log.write({{"type", "result"}, {"report", report}});
  print(report);
  return kOk;
}

int cmd_eval(const Config& c, const std::string& ckpt_path, const std::string& task) {
  auto log = open_log(c, "eval");
  const auto ckpt = load_checkpoint(ckpt_path);
  Models m = models_from_checkpoint(c, ckpt);
  const auto records = load_records(c.eval_data.empty() ? c.data : c.eval_data, "evaluation");
  const auto data = encode_set(m, records, c);
  json metrics = {{"retrieval", json::object()},
                  {"caption", json::object()},
                  {"diversity", json::object()},
                  {"config_hash", ckpt.config_hash}};
  if (task == "retrieval") {
    const auto r = evaluate_retrieval(m, data, c);
    metrics["retrieval"] = {{"in_batch", evalmetrics::to_json(r.in_batch)}, {"full_set", evalmetrics::to_json(r.full_set)}};
  } else if (task == "caption") {
    const auto preds = generate_captions(m, data, c);
    const auto path = fs::path(c.out_dir) / "captions.jsonl";
    write_predictions(path, preds);
    metrics["caption"] = evalmetrics::to_json(score_predictions(preds));
    metrics["caption"]["predictions"] = path.string();
  } else if (task == "attn") {
    const auto rows = attention_export(m, data, c);
    const auto path = fs::path(c.out_dir) / "attention.jsonl";
    mqformer::export_attention(path, rows);
    metrics["diversity"] = evalmetrics::to_json(evalmetrics::query_diversity(rows));
    metrics["diversity"]["export"] = path.string();
  } else {
    metrics["diversity"] = evalmetrics::to_json(evaluate_diversity(m, data, c));
  }
  const auto out = fs::path(c.out_dir) / ("metrics_" + task + ".json");
  std::ofstream f(out);
  if (!(f << metrics.dump(2) << '\n')) throw IoError("cannot write " + out.string());
  log.write({{"type", "result"}, {"task", task}, {"metrics", metrics}});
  print(metrics);
  return kOk;
}

int cmd_gradcheck(int batches, std::uint64_t seed) {
  const auto results = gradient_suite(batches, seed);
  json report = json::object();
  bool ok = true;
  for (const auto& r : results) {
    report[r.term] = {{"max_rel_error", r.max_rel_error}, {"worst", r.worst_tensor}};
    ok = ok && r.max_rel_error <= 1e-4;
  }
  report["threshold"] = 1e-4;
  report["pass"] = ok;
  print(report);
  return ok ? kOk : kInvalid;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-view molecule/text alignment: training, evaluation and checks"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-synthetic", "write a synthetic planted-signal dataset");
  std::int64_t gen_n = 256;
  std::uint64_t gen_seed = 0;
  std::string gen_out = "synthetic.jsonl";
  gen->add_option("--n", gen_n, "number of records")->check(CLI::NonNegativeNumber);
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_option("--out", gen_out, "output JSONL path");

  std::string ckpt_path, task;
  ConfigFlags pre_flags, s1_flags, s2_flags, eval_flags, attn_flags;
  auto* pre = app.add_subcommand("pretrain-encoders", "masked-atom pretraining of both encoders");
  pre_flags.attach(pre);
  auto* s1 = app.add_subcommand("train-stage1", "train the MQ-Former on contrast, matching and captioning");
  s1_flags.attach(s1);
  auto* s2 = app.add_subcommand("train-stage2", "train adapters and query path on caption generation");
  s2_flags.attach(s2);
  s2->add_option("--ckpt", ckpt_path, "stage-1 checkpoint")->required();
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_flags.attach(ev);
  ev->add_option("--ckpt", ckpt_path, "checkpoint")->required();
  ev->add_option("--task", task, "retrieval, caption, attn or diversity")
      ->required()
      ->check(CLI::IsMember({"retrieval", "caption", "attn", "diversity"}));
  auto* attn = app.add_subcommand("attn-dump", "export shared self-attention maps");
  attn_flags.attach(attn);
  attn->add_option("--ckpt", ckpt_path, "checkpoint")->required();

  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every loss term");
  int grad_batches = 10;
  std::uint64_t grad_seed = 0;
  grad->add_option("--batches", grad_batches, "micro-batches")->check(CLI::PositiveNumber);
  grad->add_option("--seed", grad_seed, "seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kInvalid;
  }

  try {
    if (*gen) return cmd_gen_synthetic(gen_n, gen_seed, gen_out);
    if (*pre) return cmd_pretrain_encoders(pre_flags.resolve(pre));
    if (*s1) return cmd_train_stage1(s1_flags.resolve(s1));
    auto stored = [&] { return parse_config(load_checkpoint(ckpt_path).config_text); };
    if (*s2) return cmd_train_stage2(s2_flags.resolve(s2, stored()), ckpt_path);
    if (*ev) return cmd_eval(eval_flags.resolve(ev, stored()), ckpt_path, task);
    if (*attn) return cmd_eval(attn_flags.resolve(attn, stored()), ckpt_path, "attn");
    if (*grad) return cmd_gradcheck(grad_batches, grad_seed);
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kIo;
  } catch (const std::ios_base::failure& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInvalid;
  }
  return kInvalid;
}
