#pragma once

#include <nlohmann/json_fwd.hpp>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "molalign/mqformer/mqformer.hpp"
#include "molalign/numerics/ops.hpp"

namespace molalign::evalmetrics {

using numerics::Segment;
using numerics::Tensor;

// ---------------------------------------------------------------- retrieval

struct RetrievalResult {
  double acc_m2t = 0.0, r20_m2t = 0.0;
  double acc_t2m = 0.0, r20_t2m = 0.0;
  std::string mode = "in-batch";  // or "full-set"
  std::int64_t batch_size = 0;    // chunk size for in-batch, table size for full-set
  std::int64_t count = 0;         // ranked rows per direction
};

// Position of row[self] when the row is sorted by descending score; ties are
// ordered by lower index first.
std::int64_t rank_of(std::span<const double> row, std::int64_t self);

// Per-direction statistics of a square score table with the ground truth on the
// diagonal: accuracy counts rows whose diagonal is the strict maximum, recall@k
// counts rows whose diagonal rank is below k.
struct DirectionStats {
  double accuracy = 0.0;
  double recall_at_k = 0.0;
  std::int64_t rows = 0;
};
DirectionStats rank_table(const Tensor& table, std::int64_t k = 20);

// m2t from s (molecule rows), t2m from s_prime (text rows).
RetrievalResult retrieval_eval(const Tensor& s, const Tensor& s_prime, const std::string& mode = "in-batch");
// Row-weighted average of per-chunk results.
RetrievalResult merge_chunks(std::span<const RetrievalResult> chunks, std::int64_t chunk_size);

// Multi-token similarity for every molecule/text pair of a whole set, built in
// tiles of tile x tile samples to bound the intermediate cosine table.
std::pair<Tensor, Tensor> full_set_similarity(const Tensor& queries, std::span<const Segment> query_segments,
                                              const Tensor& text, std::span<const Segment> text_segments,
                                              std::int64_t tile = 64);

// ----------------------------------------------------------------- captions

// Lowercased words; whitespace and punctuation separate words and are dropped.
std::vector<std::string> metric_tokens(std::string_view text);

// Geometric mean of clipped n-gram precisions 1..n (no smoothing) times the
// brevity penalty exp(1 - r/c) when c < r. Empty candidate scores 0.
double bleu(std::span<const std::string> candidate, std::span<const std::string> reference, int n);
// F1 of clipped n-gram overlap. Throws on an empty reference.
double rouge_n(std::span<const std::string> candidate, std::span<const std::string> reference, int n);
// F1 from the longest common subsequence. Throws on an empty reference.
double rouge_l(std::span<const std::string> candidate, std::span<const std::string> reference);
std::int64_t lcs_length(std::span<const std::string> a, std::span<const std::string> b);

// Exact-match unigram alignment, each candidate word taking the earliest unused
// equal reference word. F = 10PR / (R + 9P), penalty = 0.5 (chunks / matches)^3.
struct MeteorDetail {
  std::int64_t matches = 0;
  std::int64_t chunks = 0;
  double precision = 0.0, recall = 0.0, fmean = 0.0, penalty = 0.0, score = 0.0;
};
MeteorDetail meteor_detail(std::span<const std::string> candidate, std::span<const std::string> reference);
double meteor_lite(std::span<const std::string> candidate, std::span<const std::string> reference);

struct CaptionScores {
  double bleu2 = 0.0, bleu4 = 0.0;
  double rouge1 = 0.0, rouge2 = 0.0, rougeL = 0.0;
  double meteor_lite = 0.0;
  double exact_match = 0.0;
  std::int64_t count = 0;
};
CaptionScores score_pair(std::string_view candidate, std::string_view reference);
// Mean of the per-pair scores.
CaptionScores score_corpus(std::span<const std::string> candidates, std::span<const std::string> references);

// ---------------------------------------------------------------- diversity

// Mean cosine over unordered pairs of rows; 1.0 for a single row.
double mean_pairwise_cosine(const Tensor& rows);
// Entropy in nats of a probability row; zero entries contribute nothing.
double entropy(std::span<const double> probs);

struct DiversityReport {
  double mean_pairwise_cosine = 0.0;  // averaged over samples
  double mean_attention_entropy = 0.0;
  std::int64_t samples = 0;
  std::int64_t attention_rows = 0;
};
// Query collapse statistic per sample (segments into queries), averaged.
DiversityReport query_diversity(const Tensor& queries, std::span<const Segment> segments);
// The same statistic from an attention export: within each (sample, layer,
// head) group, the pairwise cosine between the query rows' attention
// distributions, plus the mean row entropy.
DiversityReport query_diversity(std::span<const mqformer::AttentionExportRow> rows);

// JSON views used in the metrics report.
nlohmann::json to_json(const RetrievalResult& r);
nlohmann::json to_json(const CaptionScores& c);
nlohmann::json to_json(const DiversityReport& d);

}  // namespace molalign::evalmetrics
