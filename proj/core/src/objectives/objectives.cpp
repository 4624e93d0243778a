#include "molalign/objectives/objectives.hpp"

#include <stdexcept>

#include "molalign/numerics/ops.hpp"

namespace molalign::objectives {

using namespace numerics;
using mqformer::MaskMode;
using mqformer::MQFormerParams;
using mqformer::MQInputs;
using mqformer::QueryVisibility;

namespace {

void check_segments(std::span<const Segment> segs, const char* what) {
  if (segs.empty()) throw std::invalid_argument(std::string("similarity: no ") + what);
  for (const auto& s : segs) {
    if (s.length <= 0) throw std::invalid_argument(std::string("similarity: empty ") + what + " segment");
  }
}

std::vector<std::int64_t> diagonal_targets(std::int64_t m) {
  std::vector<std::int64_t> t(static_cast<std::size_t>(m));
  for (std::int64_t i = 0; i < m; ++i) t[static_cast<std::size_t>(i)] = i;
  return t;
}

}  // namespace

SimMatrix sim_multi(const Tensor& queries, std::span<const Segment> query_segments, const Tensor& text,
                    std::span<const Segment> text_segments) {
  check_segments(query_segments, "query");
  check_segments(text_segments, "text");
  const Tensor c = cosine_similarity(queries, text);
  SimMatrix sim;
  sim.s = block_max_mean(c, query_segments, text_segments, BlockReduce::kMeanRowsOfMaxCols);
  sim.s_prime = transpose(block_max_mean(c, query_segments, text_segments, BlockReduce::kMeanColsOfMaxRows));
  return sim;
}

SimMatrix sim_single(const Tensor& queries, std::span<const Segment> query_segments, const Tensor& cls_rows) {
  check_segments(query_segments, "query");
  const Tensor c = cosine_similarity(queries, cls_rows);
  SimMatrix sim;
  sim.s = segment_max_rows(c, query_segments);
  sim.s_prime = transpose(sim.s);
  return sim;
}

Tensor loss_mtc(const SimMatrix& sim, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("loss_mtc: temperature must be positive");
  const auto m = sim.s.dim(0);
  if (sim.s.dim(1) != m || sim.s_prime.dim(0) != m || sim.s_prime.dim(1) != m) {
    throw ShapeError("loss_mtc: similarity tables must be square and equal-sized");
  }
  const auto targets = diagonal_targets(m);
  // cross_entropy averages over rows, which is the batch mean of each direction.
  return add(cross_entropy(scale(sim.s, 1.0 / tau), targets), cross_entropy(scale(sim.s_prime, 1.0 / tau), targets));
}

std::vector<int> sample_negatives(int m, Rng& rng) {
  if (m < 2) throw std::invalid_argument("matching needs at least two samples per batch");
  std::vector<int> neg(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    const auto u = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(m - 1)));
    neg[static_cast<std::size_t>(i)] = u >= i ? u + 1 : u;
  }
  return neg;
}

Tensor mtm_from_logits(const Tensor& logits) {
  if (logits.numel() % 3 != 0 || logits.numel() < 6) {
    throw ShapeError("mtm_from_logits: expected 3M logits with M >= 2, got " + numerics::to_string(logits.shape()));
  }
  const auto m = logits.numel() / 3;
  std::vector<double> targets(static_cast<std::size_t>(3 * m), 0.0);
  for (std::int64_t i = 0; i < m; ++i) targets[static_cast<std::size_t>(i)] = 1.0;
  // Negatives use -log(1 - rho); three terms per sample.
  return scale(bce_with_logits(logits, targets), 3.0);
}

void ObjectiveConfig::validate() const {
  if (!(tau > 0.0)) throw std::invalid_argument("tau must be positive");
  if (alpha < 0.0) throw std::invalid_argument("alpha must be non-negative");
  if (!use_mtc && !use_mtm && !use_mcap) throw std::invalid_argument("at least one objective must be enabled");
}

LossReport loss_total(Tensor mtc, Tensor mtm, Tensor mcap, double alpha, double tau) {
  LossReport r;
  r.mtc = std::move(mtc);
  r.mtm = std::move(mtm);
  r.mcap = std::move(mcap);
  r.alpha = alpha;
  r.tau = tau;
  // The scalar sum is kept in 64-bit so the logged total matches its parts
  // to double precision whatever the storage precision of the terms.
  const auto wide = [](const Tensor& t) { return add(Tensor::scalar(0.0, Precision::kFloat64), t); };
  Tensor total = Tensor::scalar(0.0, Precision::kFloat64);
  if (r.mtc.defined()) total = add(total, r.mtc);
  if (r.mtm.defined()) total = add(total, r.mtm);
  if (r.mcap.defined() && alpha != 0.0) total = add(total, scale(wide(r.mcap), alpha));
  r.total = total;
  return r;
}

std::vector<std::vector<std::int64_t>> with_cls(const std::vector<std::vector<std::int64_t>>& texts) {
  auto out = texts;
  for (auto& t : out) {
    if (t.empty()) throw std::invalid_argument("empty text");
    t[0] = moldata::kClsId;
  }
  return out;
}

mqformer::MQOutput retrieval_forward(const MQFormerParams& p, const MQInputs& inputs) {
  MQInputs in = inputs;
  in.texts = with_cls(inputs.texts);
  mqformer::ForwardOptions opt;
  opt.mode = MaskMode::kUnimodal;
  return mqformer::forward(p, in, mqformer::paired_streams(static_cast<std::int64_t>(in.texts.size())), opt);
}

SimMatrix similarity(const mqformer::MQOutput& out, bool single_token) {
  if (single_token) {
    std::vector<std::int64_t> cls;
    for (const auto& s : out.text_segments) cls.push_back(s.offset);
    return sim_single(out.queries, out.query_segments, index_rows(out.text, cls));
  }
  return sim_multi(out.queries, out.query_segments, out.text, out.text_segments);
}

Tensor loss_mtc(const MQFormerParams& p, const MQInputs& inputs, double tau, bool single_token) {
  return loss_mtc(similarity(retrieval_forward(p, inputs), single_token), tau);
}

Tensor loss_mtm(const MQFormerParams& p, const MQInputs& inputs, Rng& rng) {
  const int m = static_cast<int>(inputs.texts.size());
  const auto neg_text = sample_negatives(m, rng);
  const auto neg_mol = sample_negatives(m, rng);
  std::vector<mqformer::Stream> streams;
  for (int i = 0; i < m; ++i) streams.push_back({i, i});
  for (int i = 0; i < m; ++i) streams.push_back({i, neg_text[static_cast<std::size_t>(i)]});
  for (int i = 0; i < m; ++i) streams.push_back({neg_mol[static_cast<std::size_t>(i)], i});
  MQInputs in = inputs;
  in.texts = with_cls(inputs.texts);
  mqformer::ForwardOptions opt;
  opt.mode = MaskMode::kBimodal;
  const auto out = mqformer::forward(p, in, streams, opt);
  const Tensor pooled = segment_mean_rows(out.queries, out.query_segments);
  return mtm_from_logits(p.mtm_head(pooled));
}

Tensor loss_mcap_view(const MQFormerParams& p, const MQInputs& inputs, QueryVisibility visible) {
  const auto m = static_cast<std::int64_t>(inputs.texts.size());
  if (m == 0) throw std::invalid_argument("loss_mcap: empty batch");
  mqformer::ForwardOptions opt;
  opt.mode = MaskMode::kCausalText;
  opt.visible = visible;
  const auto out = mqformer::forward(p, inputs, mqformer::paired_streams(m), opt);
  // Position t predicts token t+1; each sample's mean is then averaged over the batch.
  std::vector<std::int64_t> targets;
  std::vector<double> weights;
  for (const auto& t : inputs.texts) {
    if (t.size() < 2) throw std::invalid_argument("loss_mcap: text has no tokens to predict");
    const double w = 1.0 / (static_cast<double>(m) * static_cast<double>(t.size() - 1));
    for (std::size_t i = 0; i + 1 < t.size(); ++i) {
      targets.push_back(t[i + 1]);
      weights.push_back(w);
    }
    targets.push_back(kIgnoreIndex);
    weights.push_back(0.0);
  }
  return cross_entropy(p.lm_head(out.text), targets, weights);
}

Tensor loss_mcap(const MQFormerParams& p, const MQInputs& inputs) {
  switch (p.config.views) {
    case mqformer::ViewMode::kBoth:
      return add(loss_mcap_view(p, inputs, QueryVisibility::k2D), loss_mcap_view(p, inputs, QueryVisibility::k3D));
    case mqformer::ViewMode::k3D:
      return loss_mcap_view(p, inputs, QueryVisibility::k3D);
    default:
      return loss_mcap_view(p, inputs, QueryVisibility::k2D);
  }
}

LossReport stage1_losses(const MQFormerParams& p, const MQInputs& inputs, const ObjectiveConfig& config, Rng& rng) {
  config.validate();
  Tensor mtc, mtm, mcap;
  if (config.use_mtc) mtc = loss_mtc(p, inputs, config.tau, config.single_token_contrast);
  if (config.use_mtm) mtm = loss_mtm(p, inputs, rng);
  if (config.use_mcap) mcap = loss_mcap(p, inputs);
  return loss_total(mtc, mtm, mcap, config.alpha, config.tau);
}

}  // namespace molalign::objectives
