#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "molalign/numerics/gradcheck.hpp"
#include "molalign/numerics/ops.hpp"
#include "molalign/objectives/objectives.hpp"

using namespace molalign;
using namespace molalign::objectives;
using numerics::Precision;
using numerics::Rng;

namespace {

constexpr auto F64 = Precision::kFloat64;

// Independent reference: unit vectors, then plain loops.
std::vector<double> unit(const Tensor& t, std::int64_t r) {
  const auto d = t.dim(1);
  double s = 0.0;
  for (std::int64_t c = 0; c < d; ++c) s += t.at(r, c) * t.at(r, c);
  const double n = std::sqrt(s);
  std::vector<double> u(static_cast<std::size_t>(d));
  for (std::int64_t c = 0; c < d; ++c) u[static_cast<std::size_t>(c)] = t.at(r, c) / n;
  return u;
}

double cos_ref(const Tensor& a, std::int64_t i, const Tensor& b, std::int64_t j) {
  const auto x = unit(a, i), y = unit(b, j);
  double s = 0.0;
  for (std::size_t c = 0; c < x.size(); ++c) s += x[c] * y[c];
  return s;
}

std::vector<Segment> even_segments(std::int64_t m, std::int64_t len) {
  std::vector<Segment> s;
  for (std::int64_t i = 0; i < m; ++i) s.push_back({i * len, len});
  return s;
}

double mtc_ref(const std::vector<std::vector<double>>& s, const std::vector<std::vector<double>>& sp, double tau) {
  const auto m = s.size();
  auto dir = [&](const std::vector<std::vector<double>>& t) {
    double total = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      double z = 0.0;
      for (std::size_t j = 0; j < m; ++j) z += std::exp(t[i][j] / tau);
      total += -std::log(std::exp(t[i][i] / tau) / z);
    }
    return total;
  };
  return (dir(s) + dir(sp)) / static_cast<double>(m);
}

std::vector<std::vector<double>> table(const Tensor& t) {
  std::vector<std::vector<double>> out(static_cast<std::size_t>(t.dim(0)));
  for (std::int64_t i = 0; i < t.dim(0); ++i)
    for (std::int64_t j = 0; j < t.dim(1); ++j) out[static_cast<std::size_t>(i)].push_back(t.at(i, j));
  return out;
}

SimMatrix from_table(const std::vector<std::vector<double>>& s, const std::vector<std::vector<double>>& sp,
                     bool grad = false) {
  const auto m = static_cast<std::int64_t>(s.size());
  std::vector<double> a, b;
  for (const auto& r : s) a.insert(a.end(), r.begin(), r.end());
  for (const auto& r : sp) b.insert(b.end(), r.begin(), r.end());
  return {Tensor::from({m, m}, a, F64, grad), Tensor::from({m, m}, b, F64, grad)};
}

mqformer::MQFormerConfig micro_config(Precision p = F64) {
  mqformer::MQFormerConfig c;
  c.d = 8;
  c.heads = 2;
  c.queries = 2;
  c.ffn_hidden = 8;
  c.d_enc = 6;
  c.blocks = 1;
  c.vocab_size = 12;
  c.max_text_len = 16;
  c.precision = p;
  return c;
}

mqformer::MQInputs micro_inputs(int m, const mqformer::MQFormerConfig& c, Rng& rng) {
  mqformer::MQInputs in;
  for (int i = 0; i < m; ++i) {
    const auto atoms = 2 + static_cast<std::int64_t>(rng.uniform_int(3));
    in.h2d.push_back(numerics::normal_tensor({atoms, c.d_enc}, 1.0, rng, c.precision, false));
    in.h3d.push_back(numerics::normal_tensor({atoms, c.d_enc}, 1.0, rng, c.precision, false));
    std::vector<std::int64_t> t = {moldata::kDecId};
    const auto len = 1 + rng.uniform_int(4);
    for (std::uint64_t k = 0; k < len; ++k) t.push_back(5 + static_cast<std::int64_t>(rng.uniform_int(c.vocab_size - 5)));
    t.push_back(moldata::kSepId);
    in.texts.push_back(t);
  }
  return in;
}

}  // namespace

TEST(SimMulti, IdenticalVectorGivesOne) {
  const auto q = Tensor::from({1, 3}, {0.2, -1.0, 0.5}, F64);
  const auto sim = sim_multi(q, even_segments(1, 1), q, even_segments(1, 1));
  EXPECT_DOUBLE_EQ(sim.s.item(), 1.0);
  EXPECT_DOUBLE_EQ(sim.s_prime.item(), 1.0);
}

TEST(SimMulti, DuplicateEntriesShareScores) {
  Rng rng(1);
  auto q1 = numerics::normal_tensor({2, 4}, 1.0, rng, F64, false);
  auto t1 = numerics::normal_tensor({3, 4}, 1.0, rng, F64, false);
  const Tensor qs[] = {q1, q1};
  const Tensor ts[] = {t1, t1};
  const auto sim = sim_multi(numerics::concat(qs, 0), even_segments(2, 2), numerics::concat(ts, 0), even_segments(2, 3));
  EXPECT_EQ(sim.s.at(0, 1), sim.s.at(0, 0));
  EXPECT_EQ(sim.s_prime.at(1, 0), sim.s_prime.at(0, 0));
}

TEST(SimMulti, MatchesNestedLoopOracle) {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const auto m = 1 + static_cast<std::int64_t>(rng.uniform_int(4));
    const auto k = 1 + static_cast<std::int64_t>(rng.uniform_int(4));
    const auto d = 1 + static_cast<std::int64_t>(rng.uniform_int(5));
    std::vector<Segment> ts;
    std::int64_t rows = 0;
    for (std::int64_t i = 0; i < m; ++i) {
      const auto len = 1 + static_cast<std::int64_t>(rng.uniform_int(4));
      ts.push_back({rows, len});
      rows += len;
    }
    const auto q = numerics::normal_tensor({m * k, d}, 1.0, rng, F64, false);
    const auto x = numerics::normal_tensor({rows, d}, 1.0, rng, F64, false);
    const auto sim = sim_multi(q, even_segments(m, k), x, ts);
    for (std::int64_t i = 0; i < m; ++i) {
      for (std::int64_t j = 0; j < m; ++j) {
        double s = 0.0;
        for (std::int64_t a = 0; a < k; ++a) {
          double best = -2.0;
          for (std::int64_t t = 0; t < ts[static_cast<std::size_t>(j)].length; ++t)
            best = std::max(best, cos_ref(q, i * k + a, x, ts[static_cast<std::size_t>(j)].offset + t));
          s += best;
        }
        ASSERT_EQ(sim.s.at(i, j), s / static_cast<double>(k));
        double sp = 0.0;
        for (std::int64_t t = 0; t < ts[static_cast<std::size_t>(i)].length; ++t) {
          double best = -2.0;
          for (std::int64_t a = 0; a < k; ++a)
            best = std::max(best, cos_ref(q, j * k + a, x, ts[static_cast<std::size_t>(i)].offset + t));
          sp += best;
        }
        ASSERT_EQ(sim.s_prime.at(i, j), sp / static_cast<double>(ts[static_cast<std::size_t>(i)].length));
      }
    }
  }
}

TEST(SimMulti, EmptyTextIsAnError) {
  const auto q = Tensor::from({1, 2}, {1, 0}, F64);
  const Segment empty[] = {{0, 0}};
  EXPECT_THROW(sim_multi(q, even_segments(1, 1), q, empty), std::invalid_argument);
}

TEST(LossMtc, SingleSampleIsZero) {
  const auto sim = from_table({{0.3}}, {{0.3}});
  EXPECT_EQ(loss_mtc(sim, 0.1).item(), 0.0);
}

TEST(LossMtc, UniformTableGivesTwoLogM) {
  for (std::size_t m : {2u, 5u, 32u}) {
    std::vector<std::vector<double>> s(m, std::vector<double>(m, 0.4));
    EXPECT_NEAR(loss_mtc(from_table(s, s), 0.1).item(), 2.0 * std::log(static_cast<double>(m)), 1e-12);
  }
}

TEST(LossMtc, MatchesClosedFormAndIsPermutationInvariant) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = 2 + rng.uniform_int(6);
    std::vector<std::vector<double>> s(m, std::vector<double>(m)), sp = s;
    for (auto& r : s)
      for (double& v : r) v = rng.uniform(-1, 1);
    for (auto& r : sp)
      for (double& v : r) v = rng.uniform(-1, 1);
    const double tau = rng.uniform(0.05, 1.0);
    const double got = loss_mtc(from_table(s, sp), tau).item();
    EXPECT_NEAR(got, mtc_ref(s, sp, tau), 1e-10);
    EXPECT_GE(got, 0.0);
    std::vector<std::size_t> perm(m);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(std::span<std::size_t>(perm));
    auto ps = s, psp = sp;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        ps[i][j] = s[perm[i]][perm[j]];
        psp[i][j] = sp[perm[i]][perm[j]];
      }
    EXPECT_NEAR(loss_mtc(from_table(ps, psp), tau).item(), got, 1e-6);
  }
}

TEST(LossMtc, RaisingAPositiveLowersTheLoss) {
  Rng rng(4);
  std::vector<std::vector<double>> s(4, std::vector<double>(4)), sp = s;
  for (auto& r : s)
    for (double& v : r) v = rng.uniform(-1, 1);
  sp = s;
  for (std::size_t i = 0; i < 4; ++i) {
    const double before = loss_mtc(from_table(s, sp), 0.1).item();
    auto up = s;
    up[i][i] += 1e-3;
    EXPECT_LT(loss_mtc(from_table(up, sp), 0.1).item(), before);
  }
}

TEST(LossMtc, NonPositiveTemperatureThrows) {
  const auto sim = from_table({{0.1, 0.2}, {0.3, 0.4}}, {{0.1, 0.2}, {0.3, 0.4}});
  EXPECT_THROW(loss_mtc(sim, 0.0), std::invalid_argument);
  EXPECT_THROW(loss_mtc(sim, -1.0), std::invalid_argument);
}

TEST(LossMtc, GradientMatchesFiniteDifferences) {
  Rng rng(5);
  auto q = numerics::normal_tensor({3 * 2, 4}, 1.0, rng, F64, true);
  auto x = numerics::normal_tensor({7, 4}, 1.0, rng, F64, true);
  const std::vector<Segment> ts = {{0, 2}, {2, 3}, {5, 2}};
  auto f = [&] { return loss_mtc(sim_multi(q, even_segments(3, 2), x, ts), 0.5); };
  std::vector<Tensor> xs = {q, x};
  EXPECT_LT(numerics::grad_check(f, std::span<Tensor>(xs)).max_rel_error, 1e-4);
  auto g = [&] { return loss_mtc(sim_single(q, even_segments(3, 2), numerics::slice(x, 0, 0, 3)), 0.5); };
  EXPECT_LT(numerics::grad_check(g, std::span<Tensor>(xs)).max_rel_error, 1e-4);
}

TEST(SimSingle, OneQueryEqualsMultiWithOneToken) {
  Rng rng(6);
  const auto q = numerics::normal_tensor({4, 5}, 1.0, rng, F64, false);
  const auto cls = numerics::normal_tensor({4, 5}, 1.0, rng, F64, false);
  const auto a = sim_single(q, even_segments(4, 1), cls);
  const auto b = sim_multi(q, even_segments(4, 1), cls, even_segments(4, 1));
  for (std::int64_t i = 0; i < 4; ++i)
    for (std::int64_t j = 0; j < 4; ++j) {
      EXPECT_EQ(a.s.at(i, j), b.s.at(i, j));
      EXPECT_EQ(a.s_prime.at(i, j), b.s_prime.at(i, j));
    }
}

TEST(SimSingle, ExactQueryHitGivesOne) {
  const auto q = Tensor::from({3, 2}, {1, 0, 0.3, 0.7, -1, 2}, F64);
  const auto cls = Tensor::from({1, 2}, {0.3, 0.7}, F64);
  EXPECT_DOUBLE_EQ(sim_single(q, even_segments(1, 3), cls).s.item(), 1.0);
}

TEST(SimSingle, MatchesOracleOnMicroBatch) {
  Rng rng(7);
  const std::int64_t m = 4, k = 3;
  const auto q = numerics::normal_tensor({m * k, 6}, 1.0, rng, F64, false);
  const auto cls = numerics::normal_tensor({m, 6}, 1.0, rng, F64, false);
  const auto sim = sim_single(q, even_segments(m, k), cls);
  std::vector<std::vector<double>> s(m, std::vector<double>(m));
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < m; ++j) {
      double best = -2.0;
      for (std::int64_t a = 0; a < k; ++a) best = std::max(best, cos_ref(q, i * k + a, cls, j));
      s[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = best;
      EXPECT_EQ(sim.s.at(i, j), best);
      EXPECT_EQ(sim.s_prime.at(j, i), best);
    }
  std::vector<std::vector<double>> st(m, std::vector<double>(m));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) st[i][j] = s[j][i];
  EXPECT_NEAR(loss_mtc(sim, 0.1).item(), mtc_ref(s, st, 0.1), 1e-10);
}

TEST(LossMtm, ClosedForms) {
  const auto half = Tensor::from({6, 1}, std::vector<double>(6, 0.0), F64);
  EXPECT_NEAR(mtm_from_logits(half).item(), 3.0 * std::log(2.0), 1e-12);
  const auto perfect = Tensor::from({6, 1}, {40, 40, -40, -40, -40, -40}, F64);
  EXPECT_LT(mtm_from_logits(perfect).item(), 1e-15);
  // A confident wrong answer is penalised, not rewarded.
  const auto wrong = Tensor::from({6, 1}, {40, 40, 40, -40, -40, -40}, F64);
  EXPECT_GT(mtm_from_logits(wrong).item(), 10.0);
  EXPECT_THROW(mtm_from_logits(Tensor::from({3, 1}, {0, 0, 0}, F64)), numerics::ShapeError);
}

TEST(LossMtm, NegativeSamplerAvoidsThePositive) {
  Rng rng(8);
  for (int m : {2, 3, 7}) {
    std::vector<std::vector<int>> hits(static_cast<std::size_t>(m), std::vector<int>(static_cast<std::size_t>(m), 0));
    for (int draw = 0; draw < 1000; ++draw) {
      const auto neg = sample_negatives(m, rng);
      for (int i = 0; i < m; ++i) {
        ASSERT_NE(neg[static_cast<std::size_t>(i)], i);
        ++hits[static_cast<std::size_t>(i)][static_cast<std::size_t>(neg[static_cast<std::size_t>(i)])];
      }
    }
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < m; ++j)
        if (i != j) EXPECT_GT(hits[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)], 1000 / m / 2);
  }
  EXPECT_THROW(sample_negatives(1, rng), std::invalid_argument);
}

TEST(LossTotal, Arithmetic) {
  const auto r = loss_total(Tensor::scalar(1.0, F64), Tensor::scalar(2.0, F64), Tensor::scalar(3.0, F64), 2.0);
  EXPECT_DOUBLE_EQ(r.total_value(), 9.0);
  const auto a = loss_total(Tensor::scalar(1.0, F64), Tensor::scalar(2.0, F64), Tensor::scalar(3.0, F64), 0.0);
  const auto b = loss_total(Tensor::scalar(1.0, F64), Tensor::scalar(2.0, F64), Tensor::scalar(300.0, F64), 0.0);
  EXPECT_EQ(a.total_value(), b.total_value());
  EXPECT_EQ(ObjectiveConfig{}.alpha, 2.0);
  EXPECT_EQ(ObjectiveConfig{}.tau, 0.1);
}

TEST(ModelLosses, McapIsTheSumOfViewTerms) {
  Rng rng(9);
  auto cfg = micro_config(Precision::kFloat32);
  auto p = mqformer::MQFormerParams::make(cfg, rng);
  auto in = micro_inputs(4, cfg, rng);
  const double both = loss_mcap(p, in).item();
  const double a = loss_mcap_view(p, in, mqformer::QueryVisibility::k2D).item();
  const double b = loss_mcap_view(p, in, mqformer::QueryVisibility::k3D).item();
  EXPECT_NEAR(both, a + b, 1e-7);
  auto empty = in;
  empty.texts[1] = {moldata::kDecId};
  EXPECT_THROW(loss_mcap(p, empty), std::invalid_argument);
}

TEST(ModelLosses, UntrainedCaptionLossIsNearUniform) {
  Rng rng(10);
  auto cfg = micro_config(Precision::kFloat32);
  cfg.d = 32;
  cfg.vocab_size = 60;
  auto p = mqformer::MQFormerParams::make(cfg, rng);
  auto in = micro_inputs(16, cfg, rng);
  const double per_view = loss_mcap_view(p, in, mqformer::QueryVisibility::k2D).item();
  EXPECT_NEAR(per_view, std::log(60.0), 0.15 * std::log(60.0));
}

TEST(ModelLosses, SingleTokenVocabularyHasZeroCaptionLoss) {
  Rng rng(11);
  auto cfg = micro_config();
  cfg.vocab_size = 1;
  auto p = mqformer::MQFormerParams::make(cfg, rng);
  auto in = micro_inputs(2, micro_config(), rng);
  for (auto& t : in.texts) std::fill(t.begin(), t.end(), 0);
  EXPECT_EQ(loss_mcap(p, in).item(), 0.0);
}

TEST(ModelLosses, MatchingNeedsTwoSamples) {
  Rng rng(12);
  auto cfg = micro_config();
  auto p = mqformer::MQFormerParams::make(cfg, rng);
  auto in = micro_inputs(1, cfg, rng);
  EXPECT_THROW(loss_mtm(p, in, rng), std::invalid_argument);
}

TEST(ModelLosses, TotalComposesTheTerms) {
  Rng rng(13);
  auto cfg = micro_config(Precision::kFloat32);
  auto p = mqformer::MQFormerParams::make(cfg, rng);
  auto in = micro_inputs(4, cfg, rng);
  ObjectiveConfig oc;
  const auto r = stage1_losses(p, in, oc, rng);
  EXPECT_NEAR(r.total_value(), r.mtc_value() + r.mtm_value() + 2.0 * r.mcap_value(), 1e-6);
  EXPECT_GT(r.mtc_value(), 0.0);
  EXPECT_GT(r.mtm_value(), 0.0);
  EXPECT_GT(r.mcap_value(), 0.0);
}

TEST(ModelLosses, GradientsMatchFiniteDifferences) {
  Rng rng(14);
  auto cfg = micro_config();
  auto p = mqformer::MQFormerParams::make(cfg, rng);
  auto in = micro_inputs(3, cfg, rng);
  std::vector<Tensor> xs = {p.query2d, p.query3d, p.blocks[0].self.v.weight, p.mtm_head.weight,
                            p.lm_head.bias};
  auto mtc = [&] { return loss_mtc(p, in, 0.1); };
  auto single = [&] { return loss_mtc(p, in, 0.1, true); };
  auto mcap = [&] { return loss_mcap(p, in); };
  auto mtm = [&] {
    Rng fixed(3);  // same negatives on every evaluation
    return loss_mtm(p, in, fixed);
  };
  for (const auto& [name, f] : std::vector<std::pair<std::string, std::function<Tensor()>>>{
           {"mtc", mtc}, {"single", single}, {"mcap", mcap}, {"mtm", mtm}}) {
    const auto r = numerics::grad_check(f, std::span<Tensor>(xs), 1e-4);
    EXPECT_LT(r.max_rel_error, 1e-4) << name << " element " << r.worst_index << " " << r.analytic << " vs "
                                     << r.numeric;
  }
}
