#include "molalign/evalmetrics/evalmetrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <nlohmann/json.hpp>
#include <set>
#include <stdexcept>
#include <tuple>

#include "molalign/objectives/objectives.hpp"

namespace molalign::evalmetrics {

// ---------------------------------------------------------------- retrieval

std::int64_t rank_of(std::span<const double> row, std::int64_t self) {
  if (self < 0 || self >= static_cast<std::int64_t>(row.size())) throw std::out_of_range("rank_of: index");
  const double v = row[static_cast<std::size_t>(self)];
  std::int64_t rank = 0;
  for (std::int64_t j = 0; j < static_cast<std::int64_t>(row.size()); ++j) {
    const double x = row[static_cast<std::size_t>(j)];
    if (x > v || (x == v && j < self)) ++rank;
  }
  return rank;
}

DirectionStats rank_table(const Tensor& table, std::int64_t k) {
  if (table.rank() != 2 || table.dim(0) != table.dim(1)) {
    throw numerics::ShapeError("rank_table: expected a square table, got " + numerics::to_string(table.shape()));
  }
  if (k < 1) throw std::invalid_argument("rank_table: k must be positive");
  const auto n = table.dim(0);
  DirectionStats st;
  st.rows = n;
  if (n == 0) return st;
  const auto d = table.data();
  std::int64_t hits = 0, recalled = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    std::span<const double> row = d.subspan(static_cast<std::size_t>(i * n), static_cast<std::size_t>(n));
    const double v = row[static_cast<std::size_t>(i)];
    bool strict = true;
    for (std::int64_t j = 0; j < n && strict; ++j)
      if (j != i && row[static_cast<std::size_t>(j)] >= v) strict = false;
    if (strict) ++hits;
    if (rank_of(row, i) < k) ++recalled;
  }
  st.accuracy = static_cast<double>(hits) / static_cast<double>(n);
  st.recall_at_k = static_cast<double>(recalled) / static_cast<double>(n);
  return st;
}

RetrievalResult retrieval_eval(const Tensor& s, const Tensor& s_prime, const std::string& mode) {
  if (s.shape() != s_prime.shape()) throw numerics::ShapeError("retrieval_eval: s and s_prime differ in shape");
  const auto m2t = rank_table(s, 20);
  const auto t2m = rank_table(s_prime, 20);
  RetrievalResult r;
  r.acc_m2t = m2t.accuracy;
  r.r20_m2t = m2t.recall_at_k;
  r.acc_t2m = t2m.accuracy;
  r.r20_t2m = t2m.recall_at_k;
  r.mode = mode;
  r.batch_size = m2t.rows;
  r.count = m2t.rows;
  return r;
}

RetrievalResult merge_chunks(std::span<const RetrievalResult> chunks, std::int64_t chunk_size) {
  RetrievalResult out;
  out.mode = "in-batch";
  out.batch_size = chunk_size;
  for (const auto& c : chunks) {
    const auto w = static_cast<double>(c.count);
    out.acc_m2t += w * c.acc_m2t;
    out.r20_m2t += w * c.r20_m2t;
    out.acc_t2m += w * c.acc_t2m;
    out.r20_t2m += w * c.r20_t2m;
    out.count += c.count;
  }
  if (out.count > 0) {
    const auto n = static_cast<double>(out.count);
    out.acc_m2t /= n;
    out.r20_m2t /= n;
    out.acc_t2m /= n;
    out.r20_t2m /= n;
  }
  return out;
}

namespace {

// Copies the rows of segments [first, last) into a fresh tensor with rebased segments.
std::pair<Tensor, std::vector<Segment>> gather_samples(const Tensor& rows, std::span<const Segment> segs,
                                                       std::size_t first, std::size_t last) {
  const auto width = rows.dim(1);
  std::vector<double> values;
  std::vector<Segment> local;
  std::int64_t offset = 0;
  const auto d = rows.data();
  for (std::size_t i = first; i < last; ++i) {
    const auto& sg = segs[i];
    if (sg.length <= 0 || sg.offset < 0 || sg.offset + sg.length > rows.dim(0)) {
      throw std::out_of_range("full_set_similarity: segment outside the row range");
    }
    auto from = d.begin() + sg.offset * width;
    values.insert(values.end(), from, from + sg.length * width);
    local.push_back({offset, sg.length});
    offset += sg.length;
  }
  return {Tensor::from({offset, width}, std::move(values), rows.precision()), std::move(local)};
}

}  // namespace

std::pair<Tensor, Tensor> full_set_similarity(const Tensor& queries, std::span<const Segment> query_segments,
                                              const Tensor& text, std::span<const Segment> text_segments,
                                              std::int64_t tile) {
  if (tile < 1) throw std::invalid_argument("full_set_similarity: tile must be positive");
  if (query_segments.size() != text_segments.size()) {
    throw std::invalid_argument("full_set_similarity: molecule and text counts differ");
  }
  numerics::NoGradGuard guard;
  const auto n = static_cast<std::int64_t>(query_segments.size());
  std::vector<double> s(static_cast<std::size_t>(n * n)), sp(static_cast<std::size_t>(n * n));
  const auto t = static_cast<std::size_t>(tile);
  const auto un = static_cast<std::size_t>(n);
  for (std::size_t i0 = 0; i0 < un; i0 += t) {
    const auto i1 = std::min(un, i0 + t);
    auto [qrows, qseg] = gather_samples(queries, query_segments, i0, i1);
    for (std::size_t j0 = 0; j0 < un; j0 += t) {
      const auto j1 = std::min(un, j0 + t);
      auto [trows, tseg] = gather_samples(text, text_segments, j0, j1);
      const auto sim = objectives::sim_multi(qrows, qseg, trows, tseg);
      const auto bi = static_cast<std::int64_t>(i1 - i0), bj = static_cast<std::int64_t>(j1 - j0);
      for (std::int64_t a = 0; a < bi; ++a) {
        for (std::int64_t b = 0; b < bj; ++b) {
          const auto gi = static_cast<std::int64_t>(i0) + a, gj = static_cast<std::int64_t>(j0) + b;
          s[static_cast<std::size_t>(gi * n + gj)] = sim.s.at(a, b);
          sp[static_cast<std::size_t>(gj * n + gi)] = sim.s_prime.at(b, a);
        }
      }
    }
  }
  return {Tensor::from({n, n}, std::move(s), numerics::Precision::kFloat64),
          Tensor::from({n, n}, std::move(sp), numerics::Precision::kFloat64)};
}

// ----------------------------------------------------------------- captions

std::vector<std::string> metric_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (std::isspace(u) || std::ispunct(u)) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(u)));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

namespace {

using Ngram = std::vector<std::string>;

std::map<Ngram, std::int64_t> ngram_counts(std::span<const std::string> words, int n) {
  std::map<Ngram, std::int64_t> counts;
  const auto len = static_cast<std::int64_t>(words.size());
  for (std::int64_t i = 0; i + n <= len; ++i) {
    ++counts[Ngram(words.begin() + i, words.begin() + i + n)];
  }
  return counts;
}

// Clipped overlap and the candidate/reference n-gram totals.
struct Overlap {
  std::int64_t matched = 0, cand_total = 0, ref_total = 0;
};

Overlap ngram_overlap(std::span<const std::string> cand, std::span<const std::string> ref, int n) {
  Overlap o;
  const auto cc = ngram_counts(cand, n);
  const auto rc = ngram_counts(ref, n);
  for (const auto& [g, c] : cc) {
    o.cand_total += c;
    auto it = rc.find(g);
    if (it != rc.end()) o.matched += std::min(c, it->second);
  }
  for (const auto& kv : rc) o.ref_total += kv.second;
  return o;
}

double f1(double p, double r) { return (p + r) > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

void require_reference(std::span<const std::string> ref, const char* who) {
  if (ref.empty()) throw std::invalid_argument(std::string(who) + ": empty reference");
}

}  // namespace

double bleu(std::span<const std::string> candidate, std::span<const std::string> reference, int n) {
  if (n < 1) throw std::invalid_argument("bleu: order must be positive");
  require_reference(reference, "bleu");
  if (candidate.empty()) return 0.0;
  double log_sum = 0.0;
  for (int k = 1; k <= n; ++k) {
    const auto o = ngram_overlap(candidate, reference, k);
    if (o.cand_total == 0 || o.matched == 0) return 0.0;
    log_sum += std::log(static_cast<double>(o.matched) / static_cast<double>(o.cand_total));
  }
  const auto c = static_cast<double>(candidate.size());
  const auto r = static_cast<double>(reference.size());
  const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
  return bp * std::exp(log_sum / n);
}

double rouge_n(std::span<const std::string> candidate, std::span<const std::string> reference, int n) {
  if (n < 1) throw std::invalid_argument("rouge_n: order must be positive");
  require_reference(reference, "rouge_n");
  const auto o = ngram_overlap(candidate, reference, n);
  if (o.matched == 0) return 0.0;
  return f1(static_cast<double>(o.matched) / static_cast<double>(o.cand_total),
            static_cast<double>(o.matched) / static_cast<double>(o.ref_total));
}

std::int64_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
  std::vector<std::int64_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(std::span<const std::string> candidate, std::span<const std::string> reference) {
  require_reference(reference, "rouge_l");
  if (candidate.empty()) return 0.0;
  const auto l = static_cast<double>(lcs_length(candidate, reference));
  return f1(l / static_cast<double>(candidate.size()), l / static_cast<double>(reference.size()));
}

MeteorDetail meteor_detail(std::span<const std::string> candidate, std::span<const std::string> reference) {
  require_reference(reference, "meteor_lite");
  MeteorDetail m;
  std::vector<bool> used(reference.size(), false);
  std::int64_t last_ref = -2;
  bool prev_matched = false;
  for (const auto& w : candidate) {
    std::int64_t hit = -1;
    for (std::size_t j = 0; j < reference.size(); ++j) {
      if (!used[j] && reference[j] == w) {
        hit = static_cast<std::int64_t>(j);
        break;
      }
    }
    if (hit < 0) {
      prev_matched = false;
      continue;
    }
    used[static_cast<std::size_t>(hit)] = true;
    ++m.matches;
    if (!(prev_matched && hit == last_ref + 1)) ++m.chunks;
    last_ref = hit;
    prev_matched = true;
  }
  if (m.matches == 0) return m;
  m.precision = static_cast<double>(m.matches) / static_cast<double>(candidate.size());
  m.recall = static_cast<double>(m.matches) / static_cast<double>(reference.size());
  m.fmean = 10.0 * m.precision * m.recall / (m.recall + 9.0 * m.precision);
  m.penalty = 0.5 * std::pow(static_cast<double>(m.chunks) / static_cast<double>(m.matches), 3.0);
  m.score = m.fmean * (1.0 - m.penalty);
  return m;
}

double meteor_lite(std::span<const std::string> candidate, std::span<const std::string> reference) {
  return meteor_detail(candidate, reference).score;
}

CaptionScores score_pair(std::string_view candidate, std::string_view reference) {
  const auto c = metric_tokens(candidate);
  const auto r = metric_tokens(reference);
  CaptionScores s;
  s.bleu2 = bleu(c, r, 2);
  s.bleu4 = bleu(c, r, 4);
  s.rouge1 = rouge_n(c, r, 1);
  s.rouge2 = rouge_n(c, r, 2);
  s.rougeL = rouge_l(c, r);
  s.meteor_lite = meteor_lite(c, r);
  s.exact_match = c == r ? 1.0 : 0.0;
  s.count = 1;
  return s;
}

CaptionScores score_corpus(std::span<const std::string> candidates, std::span<const std::string> references) {
  if (candidates.size() != references.size()) throw std::invalid_argument("score_corpus: size mismatch");
  CaptionScores acc;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto s = score_pair(candidates[i], references[i]);
    acc.bleu2 += s.bleu2;
    acc.bleu4 += s.bleu4;
    acc.rouge1 += s.rouge1;
    acc.rouge2 += s.rouge2;
    acc.rougeL += s.rougeL;
    acc.meteor_lite += s.meteor_lite;
    acc.exact_match += s.exact_match;
  }
  acc.count = static_cast<std::int64_t>(candidates.size());
  if (acc.count > 0) {
    const auto n = static_cast<double>(acc.count);
    acc.bleu2 /= n;
    acc.bleu4 /= n;
    acc.rouge1 /= n;
    acc.rouge2 /= n;
    acc.rougeL /= n;
    acc.meteor_lite /= n;
    acc.exact_match /= n;
  }
  return acc;
}

// ---------------------------------------------------------------- diversity

double mean_pairwise_cosine(const Tensor& rows) {
  if (rows.rank() != 2 || rows.dim(0) == 0) throw numerics::ShapeError("mean_pairwise_cosine: need [n, d], n > 0");
  const auto n = rows.dim(0), d = rows.dim(1);
  if (n == 1) return 1.0;
  const auto x = rows.data();
  std::vector<double> norms(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::int64_t k = 0; k < d; ++k) s += x[i * d + k] * x[i * d + k];
    norms[static_cast<std::size_t>(i)] = std::max(std::sqrt(s), 1e-12);
  }
  double total = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = i + 1; j < n; ++j) {
      double dot = 0.0;
      for (std::int64_t k = 0; k < d; ++k) dot += x[i * d + k] * x[j * d + k];
      total += dot / (norms[static_cast<std::size_t>(i)] * norms[static_cast<std::size_t>(j)]);
    }
  }
  return total / (0.5 * static_cast<double>(n) * static_cast<double>(n - 1));
}

double entropy(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs) {
    if (p < 0.0) throw std::invalid_argument("entropy: negative probability");
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

DiversityReport query_diversity(const Tensor& queries, std::span<const Segment> segments) {
  DiversityReport r;
  numerics::NoGradGuard guard;
  for (std::size_t i = 0; i < segments.size(); ++i) {
    auto [rows, local] = gather_samples(queries, segments, i, i + 1);
    r.mean_pairwise_cosine += mean_pairwise_cosine(rows);
  }
  r.samples = static_cast<std::int64_t>(segments.size());
  if (r.samples > 0) r.mean_pairwise_cosine /= static_cast<double>(r.samples);
  return r;
}

DiversityReport query_diversity(std::span<const mqformer::AttentionExportRow> rows) {
  DiversityReport r;
  std::map<std::tuple<std::string, int, int>, std::vector<const mqformer::AttentionExportRow*>> groups;
  for (const auto& row : rows) {
    groups[{row.sample_id, row.layer, row.head}].push_back(&row);
    r.mean_attention_entropy += entropy(row.weights);
  }
  r.attention_rows = static_cast<std::int64_t>(rows.size());
  if (r.attention_rows > 0) r.mean_attention_entropy /= static_cast<double>(r.attention_rows);
  std::set<std::string> samples;
  for (const auto& [key, members] : groups) {
    const auto width = static_cast<std::int64_t>(members.front()->weights.size());
    std::vector<double> values;
    for (const auto* m : members) {
      if (static_cast<std::int64_t>(m->weights.size()) != width) {
        throw std::invalid_argument("query_diversity: ragged attention rows in one group");
      }
      values.insert(values.end(), m->weights.begin(), m->weights.end());
    }
    const auto n = static_cast<std::int64_t>(members.size());
    r.mean_pairwise_cosine += mean_pairwise_cosine(Tensor::from({n, width}, std::move(values), numerics::Precision::kFloat64));
    samples.insert(std::get<0>(key));
  }
  if (!groups.empty()) r.mean_pairwise_cosine /= static_cast<double>(groups.size());
  r.samples = static_cast<std::int64_t>(samples.size());
  return r;
}

nlohmann::json to_json(const RetrievalResult& r) {
  return {{"acc_m2t", r.acc_m2t}, {"r20_m2t", r.r20_m2t}, {"acc_t2m", r.acc_t2m}, {"r20_t2m", r.r20_t2m},
          {"mode", r.mode},       {"batch_size", r.batch_size}, {"count", r.count}};
}

nlohmann::json to_json(const CaptionScores& c) {
  return {{"bleu2", c.bleu2},     {"bleu4", c.bleu4},   {"rouge1", c.rouge1},
          {"rouge2", c.rouge2},   {"rougeL", c.rougeL}, {"meteor_lite", c.meteor_lite},
          {"exact_match", c.exact_match}, {"count", c.count}};
}

nlohmann::json to_json(const DiversityReport& d) {
  return {{"mean_pairwise_cosine", d.mean_pairwise_cosine},
          {"mean_attention_entropy", d.mean_attention_entropy},
          {"samples", d.samples},
          {"attention_rows", d.attention_rows}};
}

}  // namespace molalign::evalmetrics
