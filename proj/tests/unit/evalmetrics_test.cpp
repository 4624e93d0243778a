#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <nlohmann/json.hpp>

#include "molalign/evalmetrics/evalmetrics.hpp"
#include "molalign/objectives/objectives.hpp"

using namespace molalign;
using namespace molalign::evalmetrics;
using numerics::Precision;
using numerics::Rng;

namespace {

constexpr auto F64 = Precision::kFloat64;

Tensor table(std::int64_t n, std::vector<double> v) { return Tensor::from({n, n}, std::move(v), F64); }

std::vector<std::string> toks(std::string_view s) { return metric_tokens(s); }

// Brute force: sort column indices by (score desc, index asc), find the diagonal.
std::int64_t sorted_position(const Tensor& t, std::int64_t i) {
  const auto n = t.dim(1);
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return t.at(i, a) > t.at(i, b); });
  return std::find(idx.begin(), idx.end(), i) - idx.begin();
}

}  // namespace

TEST(Retrieval, IdentityTableIsPerfect) {
  const auto r = retrieval_eval(table(3, {1, 0, 0, 0, 1, 0, 0, 0, 1}), table(3, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
  EXPECT_EQ(r.acc_m2t, 1.0);
  EXPECT_EQ(r.acc_t2m, 1.0);
  EXPECT_EQ(r.r20_m2t, 1.0);
  EXPECT_EQ(r.r20_t2m, 1.0);
  EXPECT_EQ(r.count, 3);
}

TEST(Retrieval, AntiDiagonalOnlyCentreRowIsRight) {
  const auto t = table(3, {0, 0, 1, 0, 1, 0, 1, 0, 0});
  const auto r = retrieval_eval(t, t);
  EXPECT_DOUBLE_EQ(r.acc_m2t, 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(r.acc_t2m, 1.0 / 3.0);
  EXPECT_EQ(r.r20_m2t, 1.0);
}

TEST(Retrieval, TiesGoToTheLowerIndex) {
  const std::vector<double> row = {0.5, 0.5, 0.5, 0.1};
  EXPECT_EQ(rank_of(row, 0), 0);
  EXPECT_EQ(rank_of(row, 1), 1);
  EXPECT_EQ(rank_of(row, 2), 2);
  EXPECT_EQ(rank_of(row, 3), 3);
  // A tie is never a strict maximum.
  const auto st = rank_table(table(2, {0.5, 0.5, 0.5, 0.5}), 1);
  EXPECT_EQ(st.accuracy, 0.0);
  EXPECT_EQ(st.recall_at_k, 0.5);
}

TEST(Retrieval, SmallTablesAlwaysRecallAtTwenty) {
  Rng rng(4);
  for (std::int64_t n : {2, 7, 20}) {
    std::vector<double> v(static_cast<std::size_t>(n * n));
    for (auto& x : v) x = rng.uniform(-1, 1);
    const auto r = retrieval_eval(table(n, v), table(n, v));
    EXPECT_EQ(r.r20_m2t, 1.0);
    EXPECT_EQ(r.r20_t2m, 1.0);
  }
}

TEST(Retrieval, MatchesBruteForceRanking) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::int64_t n = 10;
    std::vector<double> a(100), b(100);
    // Coarse values so ties are common.
    for (auto& x : a) x = static_cast<double>(rng.uniform_int(4));
    for (auto& x : b) x = rng.uniform();
    const auto ta = table(n, a), tb = table(n, b);
    for (std::int64_t k : {1, 3, 20}) {
      std::int64_t hits = 0, rec = 0;
      for (std::int64_t i = 0; i < n; ++i) {
        const auto pos = sorted_position(ta, i);
        ASSERT_EQ(rank_of(ta.data().subspan(static_cast<std::size_t>(i * n), 10), i), pos);
        if (pos < k) ++rec;
        const double v = ta.at(i, i);
        std::int64_t not_below = 0;
        for (std::int64_t j = 0; j < n; ++j) not_below += ta.at(i, j) >= v ? 1 : 0;
        if (not_below == 1) ++hits;
      }
      const auto st = rank_table(ta, k);
      ASSERT_EQ(st.accuracy, static_cast<double>(hits) / 10.0);
      ASSERT_EQ(st.recall_at_k, static_cast<double>(rec) / 10.0);
    }
    const auto r = retrieval_eval(tb, ta);
    ASSERT_GE(r.r20_m2t, r.acc_m2t);
    ASSERT_GE(r.r20_t2m, r.acc_t2m);
  }
}

TEST(Retrieval, RejectsNonSquare) {
  const auto t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, F64);
  EXPECT_THROW(retrieval_eval(t, t), numerics::ShapeError);
  EXPECT_THROW(retrieval_eval(table(2, {1, 0, 0, 1}), table(3, std::vector<double>(9, 0.0))), numerics::ShapeError);
}

TEST(Retrieval, ChunkMergeIsRowWeighted) {
  RetrievalResult a, b;
  a.acc_m2t = 1.0;
  a.count = 64;
  b.acc_m2t = 0.0;
  b.count = 16;
  const std::vector<RetrievalResult> chunks = {a, b};
  const auto m = merge_chunks(chunks, 64);
  EXPECT_DOUBLE_EQ(m.acc_m2t, 0.8);
  EXPECT_EQ(m.count, 80);
  EXPECT_EQ(m.batch_size, 64);
}

TEST(Retrieval, TiledFullSetEqualsOneShot) {
  Rng rng(2);
  const std::int64_t n = 9, k = 3, d = 5;
  std::vector<Segment> qseg, tseg;
  std::int64_t toff = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    qseg.push_back({i * k, k});
    const std::int64_t len = 2 + (i % 3);
    tseg.push_back({toff, len});
    toff += len;
  }
  std::vector<double> qv(static_cast<std::size_t>(n * k * d)), tv(static_cast<std::size_t>(toff * d));
  for (auto& x : qv) x = rng.normal();
  for (auto& x : tv) x = rng.normal();
  const auto q = Tensor::from({n * k, d}, qv, F64), t = Tensor::from({toff, d}, tv, F64);
  const auto whole = objectives::sim_multi(q, qseg, t, tseg);
  for (std::int64_t tile : {1, 4, 64}) {
    const auto [s, sp] = full_set_similarity(q, qseg, t, tseg, tile);
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t j = 0; j < n; ++j) {
        ASSERT_NEAR(s.at(i, j), whole.s.at(i, j), 1e-12);
        ASSERT_NEAR(sp.at(i, j), whole.s_prime.at(i, j), 1e-12);
      }
    }
  }
}

TEST(CaptionMetrics, Tokenization) {
  EXPECT_EQ(toks("The molecule, is  an ACID."), (std::vector<std::string>{"the", "molecule", "is", "an", "acid"}));
  EXPECT_TRUE(toks(" .;, ").empty());
}

// Five hand-computed fixtures.
struct Fixture {
  const char* cand;
  const char* ref;
  double bleu2, bleu4, rouge1, rouge2, rougeL, meteor;
};

TEST(CaptionMetrics, HandComputedFixtures) {
  const std::vector<Fixture> fixtures = {
      // c=3, r=4; all precisions 1 up to order 3, none at 4; BP = e^(-1/3).
      {"the cat sat", "the cat sat down", std::exp(-1.0 / 3.0), 0.0, 6.0 / 7.0, 0.8, 6.0 / 7.0,
       (7.5 / 9.75) * (1.0 - 0.5 / 27.0)},
      // Bigrams: only "c d" shared. LCS 3. Alignment a-0 b-3 c-1 d-2 gives 3 chunks.
      {"a b c d", "a c d b", std::sqrt(1.0 / 3.0), 0.0, 1.0, 1.0 / 3.0, 0.75, 1.0 - 0.5 * 27.0 / 64.0},
      {"The molecule is an acid.", "the molecule is an acid", 1.0, 1.0, 1.0, 1.0, 1.0, 1.0 - 0.5 / 125.0},
      {"x y", "a b", 0.0, 0.0, 0.0, 0.0, 0.0, 0.0},
      // Clipping: "the" counts once. P = 1/4, R = 1/2.
      {"the the the the", "the cat", 0.0, 0.0, 1.0 / 3.0, 0.0, 1.0 / 3.0, (1.25 / 2.75) * 0.5},
  };
  for (const auto& f : fixtures) {
    SCOPED_TRACE(f.cand);
    const auto c = toks(f.cand), r = toks(f.ref);
    EXPECT_NEAR(bleu(c, r, 2), f.bleu2, 1e-6);
    EXPECT_NEAR(bleu(c, r, 4), f.bleu4, 1e-6);
    EXPECT_NEAR(rouge_n(c, r, 1), f.rouge1, 1e-6);
    EXPECT_NEAR(rouge_n(c, r, 2), f.rouge2, 1e-6);
    EXPECT_NEAR(rouge_l(c, r), f.rougeL, 1e-6);
    EXPECT_NEAR(meteor_lite(c, r), f.meteor, 1e-6);
  }
}

TEST(CaptionMetrics, BrevityPenaltyWithFullPrecision) {
  const auto c = toks("a b c d e"), r = toks("a b c d e f");
  EXPECT_NEAR(bleu(c, r, 4), std::exp(-0.2), 1e-12);
  EXPECT_NEAR(rouge_n(c, r, 2), 8.0 / 9.0, 1e-12);
  const auto m = meteor_detail(c, r);
  EXPECT_EQ(m.matches, 5);
  EXPECT_EQ(m.chunks, 1);
  EXPECT_NEAR(m.score, 50.0 / 59.0 * (1.0 - 0.5 / 125.0), 1e-12);
}

TEST(CaptionMetrics, LcsAgreesWithBruteForceSubsequences) {
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::string> a, b;
    const auto la = 1 + rng.uniform_int(7), lb = 1 + rng.uniform_int(7);
    for (std::uint64_t i = 0; i < la; ++i) a.push_back(std::string(1, static_cast<char>('a' + rng.uniform_int(3))));
    for (std::uint64_t i = 0; i < lb; ++i) b.push_back(std::string(1, static_cast<char>('a' + rng.uniform_int(3))));
    // Longest subsequence of a (by bitmask) that is also a subsequence of b.
    std::int64_t best = 0;
    for (std::uint32_t mask = 0; mask < (1u << a.size()); ++mask) {
      std::size_t pos = 0;
      bool ok = true;
      std::int64_t len = 0;
      for (std::size_t i = 0; i < a.size() && ok; ++i) {
        if (!(mask & (1u << i))) continue;
        while (pos < b.size() && b[pos] != a[i]) ++pos;
        if (pos == b.size()) ok = false;
        else {
          ++pos;
          ++len;
        }
      }
      if (ok) best = std::max(best, len);
    }
    ASSERT_EQ(lcs_length(a, b), best);
  }
}

TEST(CaptionMetrics, BoundedAndOneOnIdentity) {
  Rng rng(5);
  const std::vector<std::string> words = {"acid", "the", "ring", "is", "a", "base"};
  for (int trial = 0; trial < 200; ++trial) {
    std::string c, r;
    const auto lc = rng.uniform_int(8), lr = 1 + rng.uniform_int(8);
    for (std::uint64_t i = 0; i < lc; ++i) c += words[rng.uniform_int(words.size())] + " ";
    for (std::uint64_t i = 0; i < lr; ++i) r += words[rng.uniform_int(words.size())] + " ";
    const auto s = score_pair(c, r);
    for (double v : {s.bleu2, s.bleu4, s.rouge1, s.rouge2, s.rougeL, s.meteor_lite}) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
    }
    const auto same = score_pair(r, r);
    const auto m = static_cast<double>(toks(r).size());
    ASSERT_NEAR(same.bleu2, m >= 2 ? 1.0 : 0.0, 1e-12);
    ASSERT_NEAR(same.rouge1, 1.0, 1e-12);
    ASSERT_NEAR(same.rougeL, 1.0, 1e-12);
    ASSERT_NEAR(same.meteor_lite, 1.0 - 0.5 / (m * m * m), 1e-12);
    ASSERT_EQ(same.exact_match, 1.0);
  }
}

TEST(CaptionMetrics, EdgeCases) {
  const std::vector<std::string> empty;
  const auto r = toks("a b");
  EXPECT_EQ(bleu(empty, r, 2), 0.0);
  EXPECT_EQ(meteor_lite(empty, r), 0.0);
  EXPECT_EQ(rouge_l(empty, r), 0.0);
  EXPECT_THROW(rouge_n(r, empty, 1), std::invalid_argument);
  EXPECT_THROW(rouge_l(r, empty), std::invalid_argument);
  EXPECT_THROW(bleu(r, r, 0), std::invalid_argument);
}

TEST(CaptionMetrics, CorpusIsMeanOfPairs) {
  const std::vector<std::string> c = {"a b c", "x y"}, r = {"a b c", "a b"};
  const auto s = score_corpus(c, r);
  EXPECT_DOUBLE_EQ(s.bleu2, 0.5);
  EXPECT_DOUBLE_EQ(s.exact_match, 0.5);
  EXPECT_EQ(s.count, 2);
  EXPECT_THROW(score_corpus(c, std::vector<std::string>{"a"}), std::invalid_argument);
}

TEST(Diversity, CollapseAndOrthogonalLimits) {
  EXPECT_DOUBLE_EQ(mean_pairwise_cosine(Tensor::from({3, 2}, {1, 2, 1, 2, 1, 2}, F64)), 1.0);
  EXPECT_DOUBLE_EQ(mean_pairwise_cosine(Tensor::from({3, 3}, {1, 0, 0, 0, 2, 0, 0, 0, 3}, F64)), 0.0);
  // Pairs: (a,b)=0, (a,c)=1, (b,c)=0.
  EXPECT_NEAR(mean_pairwise_cosine(Tensor::from({3, 2}, {1, 0, 0, 1, 2, 0}, F64)), 1.0 / 3.0, 1e-15);
}

TEST(Diversity, UniformAttentionEntropyIsLogT) {
  for (int t : {1, 4, 17}) {
    std::vector<double> p(static_cast<std::size_t>(t), 1.0 / t);
    EXPECT_NEAR(entropy(p), std::log(static_cast<double>(t)), 1e-12);
  }
  EXPECT_EQ(entropy(std::vector<double>{1.0, 0.0}), 0.0);
}

TEST(Diversity, PerSampleAverage) {
  // Sample 0 collapsed, sample 1 orthogonal.
  const auto q = Tensor::from({4, 2}, {1, 1, 2, 2, 1, 0, 0, 1}, F64);
  const std::vector<Segment> segs = {{0, 2}, {2, 2}};
  const auto r = query_diversity(q, segs);
  EXPECT_DOUBLE_EQ(r.mean_pairwise_cosine, 0.5);
  EXPECT_EQ(r.samples, 2);
}

TEST(Diversity, FromAttentionExport) {
  std::vector<mqformer::AttentionExportRow> rows;
  auto add = [&](std::string id, int head, std::vector<double> w) {
    mqformer::AttentionExportRow r;
    r.sample_id = std::move(id);
    r.head = head;
    r.weights = std::move(w);
    rows.push_back(r);
  };
  add("s0", 0, {0.5, 0.5});
  add("s0", 0, {0.5, 0.5});
  add("s0", 1, {1.0, 0.0});
  add("s0", 1, {0.0, 1.0});
  const auto r = query_diversity(rows);
  EXPECT_DOUBLE_EQ(r.mean_pairwise_cosine, 0.5);
  EXPECT_NEAR(r.mean_attention_entropy, std::log(2.0) / 2.0, 1e-12);
  EXPECT_EQ(r.samples, 1);
  EXPECT_EQ(r.attention_rows, 4);
}

TEST(Report, JsonFields) {
  RetrievalResult r;
  r.mode = "full-set";
  const auto j = to_json(r);
  for (auto key : {"acc_m2t", "r20_m2t", "acc_t2m", "r20_t2m", "mode", "batch_size"}) EXPECT_TRUE(j.contains(key));
  EXPECT_EQ(j["mode"], "full-set");
  const auto c = to_json(CaptionScores{});
  for (auto key : {"bleu2", "bleu4", "rouge1", "rouge2", "rougeL", "meteor_lite"}) EXPECT_TRUE(c.contains(key));
  EXPECT_TRUE(to_json(DiversityReport{}).contains("mean_pairwise_cosine"));
}
