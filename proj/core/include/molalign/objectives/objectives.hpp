#pragma once

#include <span>
#include <vector>

#include "molalign/mqformer/mqformer.hpp"

namespace molalign::objectives {

using numerics::Segment;
using numerics::Tensor;

// Molecule-to-text (s) and text-to-molecule (s_prime) similarity tables. Row i
// of s is molecule i against every text; row i of s_prime is text i against
// every molecule.
struct SimMatrix {
  Tensor s;
  Tensor s_prime;
};

// Token-level similarity. queries holds every molecule's query rows and text
// every text's token rows; segments delimit samples (only real tokens, no pad).
//   s(i,j)       = mean over queries of i of max over tokens of j of cos
//   s_prime(i,j) = mean over tokens of i of max over queries of j of cos
SimMatrix sim_multi(const Tensor& queries, std::span<const Segment> query_segments, const Tensor& text,
                    std::span<const Segment> text_segments);

// Coarse similarity against one summary token per text: max over queries of i
// of cos(query, cls_j). s_prime is the transpose of s.
SimMatrix sim_single(const Tensor& queries, std::span<const Segment> query_segments, const Tensor& cls_rows);

// Bidirectional InfoNCE with the diagonal as positives, averaged over the batch:
//   (sum_i -log softmax(s_i/tau)_i + sum_i -log softmax(s'_i/tau)_i) / M
Tensor loss_mtc(const SimMatrix& sim, double tau);

// Negative partners for matching: index != i drawn uniformly from the batch.
std::vector<int> sample_negatives(int m, numerics::Rng& rng);

// Matching loss from per-stream classifier logits laid out as
// [M positives, M text negatives, M molecule negatives]. Standard binary
// cross-entropy, summed over the three streams and averaged over the batch.
Tensor mtm_from_logits(const Tensor& logits);

struct ObjectiveConfig {
  double tau = 0.1;
  double alpha = 2.0;   // captioning weight
  bool single_token_contrast = false;
  bool use_mtc = true;
  bool use_mtm = true;
  bool use_mcap = true;

  void validate() const;
};

// Per-step loss values. total = mtc + mtm + alpha * mcap.
struct LossReport {
  Tensor mtc, mtm, mcap, total;
  double tau = 0.1;
  double alpha = 2.0;

  double mtc_value() const { return mtc.defined() ? mtc.item() : 0.0; }
  double mtm_value() const { return mtm.defined() ? mtm.item() : 0.0; }
  double mcap_value() const { return mcap.defined() ? mcap.item() : 0.0; }
  double total_value() const { return total.item(); }
};

LossReport loss_total(Tensor mtc, Tensor mtm, Tensor mcap, double alpha, double tau = 0.1);

// Model-level losses. inputs.texts are decoder-style token lists starting with
// [DEC]; the contrastive and matching passes swap the first token for [CLS].

// Copy of texts with position 0 replaced by [CLS].
std::vector<std::vector<std::int64_t>> with_cls(const std::vector<std::vector<std::int64_t>>& texts);

// Unimodal pass used for contrastive training and retrieval scoring.
mqformer::MQOutput retrieval_forward(const mqformer::MQFormerParams& p, const mqformer::MQInputs& inputs);
SimMatrix similarity(const mqformer::MQOutput& out, bool single_token);

Tensor loss_mtc(const mqformer::MQFormerParams& p, const mqformer::MQInputs& inputs, double tau,
                bool single_token = false);
Tensor loss_mtm(const mqformer::MQFormerParams& p, const mqformer::MQInputs& inputs, numerics::Rng& rng);
// Caption loss of one causal pass where text sees only the given query view.
Tensor loss_mcap_view(const mqformer::MQFormerParams& p, const mqformer::MQInputs& inputs,
                      mqformer::QueryVisibility visible);
// Sum of the per-view caption losses (one term per query view the model has).
Tensor loss_mcap(const mqformer::MQFormerParams& p, const mqformer::MQInputs& inputs);

LossReport stage1_losses(const mqformer::MQFormerParams& p, const mqformer::MQInputs& inputs,
                         const ObjectiveConfig& config, numerics::Rng& rng);

}  // namespace molalign::objectives
