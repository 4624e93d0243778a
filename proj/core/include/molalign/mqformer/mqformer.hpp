#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "molalign/encoders/encoders.hpp"
#include "molalign/moldata/text.hpp"
#include "molalign/numerics/layers.hpp"

namespace molalign::mqformer {

using numerics::Tensor;

// Which tokens each row may attend to in the shared self-attention.
//   kUnimodal:   queries <-> queries, text <-> text
//   kBimodal:    everything within a stream
//   kCausalText: queries <-> queries; text -> earlier-or-same text and the visible queries
enum class MaskMode { kUnimodal, kBimodal, kCausalText };
// Query views visible to text under kCausalText.
enum class QueryVisibility { kBoth, k2D, k3D };
// Molecular views wired into the projector. kPrecombined uses the 2D query set
// over one memory holding both projected encoder outputs.
enum class ViewMode { kBoth, k2D, k3D, kPrecombined };

const char* to_string(MaskMode m);
const char* to_string(ViewMode v);
ViewMode parse_view_mode(const std::string& s);

struct MQFormerConfig {
  std::int64_t d = 64;
  int blocks = 2;
  int heads = 4;
  std::int64_t queries = 4;  // K per view
  std::int64_t ffn_hidden = 128;
  std::int64_t d_enc = 64;
  std::int64_t vocab_size = 0;
  std::int64_t max_text_len = moldata::kDefaultMaxLen;
  ViewMode views = ViewMode::kBoth;
  numerics::Precision precision = numerics::Precision::kFloat32;

  void validate() const;
  // Query rows per sample in the universal query: 2K with both views, else K.
  std::int64_t universal_rows() const { return views == ViewMode::kBoth ? 2 * queries : queries; }
  bool has_2d_branch() const { return views != ViewMode::k3D; }
  bool has_3d_branch() const { return views == ViewMode::kBoth || views == ViewMode::k3D; }
};

struct AttentionBlock {
  numerics::Linear q, k, v, o;
  numerics::LayerNorm ln;
  void collect(numerics::ParameterSet& ps, const std::string& prefix) const;
};

struct MQBlock {
  AttentionBlock self;  // one weight set for every branch
  AttentionBlock cross2d, cross3d;
  numerics::FeedForward ffn2d, ffn3d, ffn_text;
  numerics::LayerNorm ln_ffn2d, ln_ffn3d, ln_ffn_text;
};

enum class Branch { k2D, k3D, kText };

struct MQFormerParams {
  MQFormerConfig config;
  Tensor query2d, query3d;  // [K, d]
  numerics::Linear proj2d, proj3d;  // d_enc -> d
  Tensor token_embedding;            // [vocab, d]
  Tensor position_embedding;         // [max_text_len, d]
  numerics::LayerNorm ln_embed;
  std::vector<MQBlock> blocks;
  numerics::Linear mtm_head;  // d -> 1
  numerics::Linear lm_head;   // d -> vocab

  static MQFormerParams make(const MQFormerConfig& config, numerics::Rng& rng);
  numerics::ParameterSet parameters() const;
  // Self-attention weights as seen by a branch of a block. All branches return
  // the same tensors.
  const AttentionBlock& self_attention(int block, Branch branch) const;
};

// Parameter-name predicates used to pick trainable subsets.
bool is_3d_only_parameter(const std::string& name);
bool is_2d_only_parameter(const std::string& name);
// Parameters not on the query path (text embeddings, text FFN, LM and matching heads).
bool is_text_path_parameter(const std::string& name);

// One forward stream couples a molecule (index into the encoder outputs) and/or
// a text (index into the token lists). -1 leaves that side out.
struct Stream {
  int molecule = -1;
  int text = -1;
};

struct MQInputs {
  std::vector<Tensor> h2d;  // per molecule [atoms, d_enc]
  std::vector<Tensor> h3d;
  std::vector<std::vector<std::int64_t>> texts;  // real tokens only
};

struct ForwardOptions {
  MaskMode mode = MaskMode::kUnimodal;
  QueryVisibility visible = QueryVisibility::kBoth;
  bool record_attention = false;
};

struct MQOutput {
  // Query outputs for streams carrying a molecule, in stream order; each
  // sample's rows are contiguous with 2D rows first.
  Tensor queries;  // [S_mol * universal_rows, d]
  Tensor q2d;      // [S_mol * K, d] or undefined
  Tensor q3d;      // [S_mol * K, d] or undefined
  Tensor text;     // [sum T, d] text-branch outputs, or undefined
  std::vector<numerics::Segment> query_segments;  // per molecule stream, into queries
  std::vector<numerics::Segment> text_segments;   // per text stream, into text
  std::vector<int> query_stream;                  // stream index of each query segment
  std::vector<int> text_stream;                   // stream index of each text segment

  // Self-attention traces per block over the combined row order
  // [2D query rows, 3D query rows, text rows].
  std::vector<numerics::AttentionTrace> self_traces;
  std::int64_t rows_2d = 0, rows_3d = 0;
};

MQOutput forward(const MQFormerParams& p, const MQInputs& inputs, const std::vector<Stream>& streams,
                 const ForwardOptions& options);

// Convenience: streams (i, i) for i < M.
std::vector<Stream> paired_streams(std::int64_t m);

// [Q2d; Q3d] row concatenation and its inverse.
Tensor concat_universal(const Tensor& q2d, const Tensor& q3d);
std::pair<Tensor, Tensor> split_universal(const Tensor& q);

// Writes one JSON line per (sample, layer, head, query) with the query's
// self-attention weights over every column of its stream; columns are labelled
// <q2d_k>, <q3d_k> and the text tokens.
struct AttentionExportRow {
  std::string sample_id;
  int layer = 0;
  int head = 0;
  std::string query_view;
  std::int64_t query_index = 0;
  std::vector<double> weights;
  std::vector<std::string> tokens;
};

std::vector<AttentionExportRow> attention_rows(const MQFormerParams& p, const MQInputs& inputs,
                                               const std::vector<std::string>& sample_ids,
                                               const moldata::Vocabulary& vocab, MaskMode mode,
                                               int layer);
void export_attention(const std::filesystem::path& path, const std::vector<AttentionExportRow>& rows);
std::vector<AttentionExportRow> load_attention_export(const std::filesystem::path& path);

}  // namespace molalign::mqformer
