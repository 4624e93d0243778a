#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "molalign/mqformer/mqformer.hpp"
#include "molalign/numerics/gradcheck.hpp"
#include "molalign/numerics/ops.hpp"

using namespace molalign;
using namespace molalign::mqformer;
using numerics::Precision;
using numerics::Rng;
using numerics::Tensor;

namespace {

MQFormerConfig tiny_config(Precision p = Precision::kFloat32) {
  MQFormerConfig c;
  c.d = 16;
  c.heads = 2;
  c.queries = 3;
  c.ffn_hidden = 24;
  c.d_enc = 8;
  c.vocab_size = 30;
  c.max_text_len = 16;
  c.precision = p;
  return c;
}

MQInputs random_inputs(int m, const MQFormerConfig& c, Rng& rng, Precision p = Precision::kFloat32) {
  MQInputs in;
  for (int i = 0; i < m; ++i) {
    const auto atoms = 2 + static_cast<std::int64_t>(rng.uniform_int(5));
    in.h2d.push_back(numerics::normal_tensor({atoms, c.d_enc}, 1.0, rng, p, false));
    in.h3d.push_back(numerics::normal_tensor({atoms, c.d_enc}, 1.0, rng, p, false));
    std::vector<std::int64_t> text = {moldata::kClsId};
    const auto len = 2 + rng.uniform_int(6);
    for (std::uint64_t t = 0; t < len; ++t) text.push_back(5 + static_cast<std::int64_t>(rng.uniform_int(c.vocab_size - 5)));
    text.push_back(moldata::kSepId);
    in.texts.push_back(text);
  }
  return in;
}

std::vector<double> rows_of(const Tensor& t, numerics::Segment seg) {
  const auto d = t.dim(1);
  auto data = t.data();
  return {data.begin() + seg.offset * d, data.begin() + (seg.offset + seg.length) * d};
}

ForwardOptions with_mode(MaskMode m, QueryVisibility v = QueryVisibility::kBoth) {
  ForwardOptions o;
  o.mode = m;
  o.visible = v;
  return o;
}

}  // namespace

TEST(MQFormer, UniversalQueryShape) {
  Rng rng(1);
  auto cfg = tiny_config();
  cfg.d = 64;
  cfg.heads = 4;
  cfg.queries = 12;
  auto p = MQFormerParams::make(cfg, rng);
  auto in = random_inputs(2, cfg, rng);
  auto out = forward(p, in, paired_streams(2), with_mode(MaskMode::kUnimodal));
  EXPECT_EQ(out.queries.shape(), (numerics::Shape{2 * 24, 64}));
  ASSERT_EQ(out.query_segments.size(), 2u);
  EXPECT_EQ(out.query_segments[1].offset, 24);
  EXPECT_EQ(out.query_segments[1].length, 24);
  // 2D rows come first within each sample.
  auto [a, b] = split_universal(numerics::slice(out.queries, 0, 24, 48));
  EXPECT_EQ(std::vector<double>(a.data().begin(), a.data().end()), rows_of(out.q2d, {12, 12}));
  EXPECT_EQ(std::vector<double>(b.data().begin(), b.data().end()), rows_of(out.q3d, {12, 12}));
}

TEST(MQFormer, ZeroBlocksIsIdentityOnQueries) {
  Rng rng(2);
  auto cfg = tiny_config();
  cfg.blocks = 0;
  auto p = MQFormerParams::make(cfg, rng);
  auto in = random_inputs(2, cfg, rng);
  auto out = forward(p, in, paired_streams(2), with_mode(MaskMode::kBimodal));
  const auto q = p.query2d.data();
  for (int s = 0; s < 2; ++s) {
    auto rows = rows_of(out.q2d, {s * cfg.queries, cfg.queries});
    EXPECT_EQ(rows, std::vector<double>(q.begin(), q.end()));
  }
}

TEST(MQFormer, UnimodalTextIgnoresMolecule) {
  Rng rng(3);
  auto cfg = tiny_config();
  auto p = MQFormerParams::make(cfg, rng);
  auto in = random_inputs(3, cfg, rng);
  auto base = forward(p, in, paired_streams(3), with_mode(MaskMode::kUnimodal));
  auto other = in;
  other.h2d[1] = numerics::normal_tensor({5, cfg.d_enc}, 1.0, rng, Precision::kFloat32, false);
  other.h3d[1] = numerics::normal_tensor({5, cfg.d_enc}, 1.0, rng, Precision::kFloat32, false);
  auto changed = forward(p, other, paired_streams(3), with_mode(MaskMode::kUnimodal));
  EXPECT_EQ(std::vector<double>(base.text.data().begin(), base.text.data().end()),
            std::vector<double>(changed.text.data().begin(), changed.text.data().end()));
  EXPECT_NE(rows_of(base.queries, base.query_segments[1]), rows_of(changed.queries, changed.query_segments[1]));
  // Bimodal text does depend on the molecule.
  auto bi = forward(p, in, paired_streams(3), with_mode(MaskMode::kBimodal));
  auto bi_changed = forward(p, other, paired_streams(3), with_mode(MaskMode::kBimodal));
  EXPECT_NE(rows_of(bi.text, bi.text_segments[1]), rows_of(bi_changed.text, bi_changed.text_segments[1]));
}

TEST(MQFormer, CausalTextIgnoresFutureTokens) {
  Rng rng(4);
  auto cfg = tiny_config();
  auto p = MQFormerParams::make(cfg, rng);
  auto in = random_inputs(2, cfg, rng);
  in.texts[0] = {2, 7, 8, 9, 10, 11, 4};
  auto base = forward(p, in, paired_streams(2), with_mode(MaskMode::kCausalText));
  for (std::size_t cut = 1; cut < in.texts[0].size(); ++cut) {
    auto other = in;
    for (std::size_t t = cut; t < other.texts[0].size(); ++t) other.texts[0][t] = 20 + static_cast<std::int64_t>(t);
    auto out = forward(p, other, paired_streams(2), with_mode(MaskMode::kCausalText));
    EXPECT_EQ(rows_of(base.text, {0, static_cast<std::int64_t>(cut)}), rows_of(out.text, {0, static_cast<std::int64_t>(cut)}));
    EXPECT_NE(rows_of(base.text, {0, 7}), rows_of(out.text, {0, 7}));
  }
}

TEST(MQFormer, CausalVisibilityHidesTheOtherView) {
  Rng rng(5);
  auto cfg = tiny_config();
  auto p = MQFormerParams::make(cfg, rng);
  auto in = random_inputs(2, cfg, rng);
  auto other = in;
  other.h3d[0] = numerics::normal_tensor(other.h3d[0].shape(), 1.0, rng, Precision::kFloat32, false);
  auto a = forward(p, in, paired_streams(2), with_mode(MaskMode::kCausalText, QueryVisibility::k2D));
  auto b = forward(p, other, paired_streams(2), with_mode(MaskMode::kCausalText, QueryVisibility::k2D));
  // With two blocks the 3D change reaches the 2D query rows through the shared
  // self-attention, so only the single-block case below is exactly blind to it.
  auto c = forward(p, in, paired_streams(2), with_mode(MaskMode::kCausalText, QueryVisibility::k3D));
  auto d = forward(p, other, paired_streams(2), with_mode(MaskMode::kCausalText, QueryVisibility::k3D));
  EXPECT_NE(rows_of(c.text, c.text_segments[0]), rows_of(d.text, d.text_segments[0]));
  // Sample 1 is untouched in both cases.
  EXPECT_EQ(rows_of(a.text, a.text_segments[1]), rows_of(b.text, b.text_segments[1]));

  cfg.blocks = 1;  // one block: 2D queries at the self-attention input do not depend on 3D yet
  auto p1 = MQFormerParams::make(cfg, rng);
  auto e = forward(p1, in, paired_streams(2), with_mode(MaskMode::kCausalText, QueryVisibility::k2D));
  auto f = forward(p1, other, paired_streams(2), with_mode(MaskMode::kCausalText, QueryVisibility::k2D));
  EXPECT_EQ(rows_of(e.text, e.text_segments[0]), rows_of(f.text, f.text_segments[0]));
}

TEST(MQFormer, BatchIndependence) {
  Rng rng(6);
  auto cfg = tiny_config();
  auto p = MQFormerParams::make(cfg, rng);
  auto in = random_inputs(4, cfg, rng);
  auto replaced = random_inputs(4, cfg, rng);
  replaced.h2d[2] = in.h2d[2];
  replaced.h3d[2] = in.h3d[2];
  replaced.texts[2] = in.texts[2];
  for (auto mode : {MaskMode::kUnimodal, MaskMode::kBimodal, MaskMode::kCausalText}) {
    auto a = forward(p, in, paired_streams(4), with_mode(mode));
    auto b = forward(p, replaced, paired_streams(4), with_mode(mode));
    EXPECT_EQ(rows_of(a.queries, a.query_segments[2]), rows_of(b.queries, b.query_segments[2])) << to_string(mode);
    EXPECT_EQ(rows_of(a.text, a.text_segments[2]), rows_of(b.text, b.text_segments[2])) << to_string(mode);
  }
}

TEST(MQFormer, SelfAttentionIsSharedStorage) {
  Rng rng(7);
  auto p = MQFormerParams::make(tiny_config(), rng);
  for (int b = 0; b < p.config.blocks; ++b) {
    const auto& a = p.self_attention(b, Branch::k2D);
    const auto& c = p.self_attention(b, Branch::k3D);
    const auto& t = p.self_attention(b, Branch::kText);
    EXPECT_TRUE(a.q.weight.same_storage(c.q.weight));
    EXPECT_TRUE(a.o.weight.same_storage(t.o.weight));
    EXPECT_TRUE(a.ln.gamma.same_storage(t.ln.gamma));
  }
  EXPECT_THROW(p.self_attention(5, Branch::kText), std::out_of_range);
  // No duplicated names means no copies were registered.
  std::set<std::string> names;
  const auto params = p.parameters();
  for (const auto& item : params.items()) EXPECT_TRUE(names.insert(item.name).second);
}

TEST(MQFormer, ConcatUniversal) {
  auto a = Tensor::from({1, 2}, {1, 2}, Precision::kFloat64, true);
  auto b = Tensor::from({1, 2}, {3, 4}, Precision::kFloat64, true);
  auto q = concat_universal(a, b);
  EXPECT_EQ(std::vector<double>(q.data().begin(), q.data().end()), (std::vector<double>{1, 2, 3, 4}));
  auto [x, y] = split_universal(q);
  EXPECT_EQ(std::vector<double>(x.data().begin(), x.data().end()), (std::vector<double>{1, 2}));
  EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()), (std::vector<double>{3, 4}));
  numerics::backward(numerics::sum(q));
  for (double g : a.grad()) EXPECT_EQ(g, 1.0);
  for (double g : b.grad()) EXPECT_EQ(g, 1.0);
  EXPECT_THROW(concat_universal(a, Tensor::zeros({2, 2})), numerics::ShapeError);
}

TEST(MQFormer, InputValidation) {
  Rng rng(8);
  auto cfg = tiny_config();
  auto p = MQFormerParams::make(cfg, rng);
  auto in = random_inputs(2, cfg, rng);
  in.h3d.pop_back();
  EXPECT_THROW(forward(p, in, paired_streams(2), {}), std::invalid_argument);
  auto in2 = random_inputs(2, cfg, rng);
  EXPECT_THROW(forward(p, in2, paired_streams(3), {}), std::invalid_argument);
}

TEST(MQFormer, ViewAblationShapes) {
  Rng rng(9);
  for (auto views : {ViewMode::k2D, ViewMode::k3D, ViewMode::kPrecombined}) {
    auto cfg = tiny_config();
    cfg.views = views;
    auto p = MQFormerParams::make(cfg, rng);
    auto in = random_inputs(3, cfg, rng);
    auto out = forward(p, in, paired_streams(3), with_mode(MaskMode::kBimodal));
    EXPECT_EQ(out.queries.dim(0), 3 * cfg.queries) << to_string(views);
    EXPECT_EQ(out.q2d.defined(), views != ViewMode::k3D);
    EXPECT_EQ(out.q3d.defined(), views == ViewMode::k3D);
  }
}

TEST(MQFormer, PrecombinedQueriesSeeBothViews) {
  Rng rng(10);
  auto cfg = tiny_config();
  cfg.views = ViewMode::kPrecombined;
  auto p = MQFormerParams::make(cfg, rng);
  auto in = random_inputs(2, cfg, rng);
  auto other = in;
  other.h3d[0] = numerics::normal_tensor(in.h3d[0].shape(), 1.0, rng, Precision::kFloat32, false);
  auto a = forward(p, in, paired_streams(2), with_mode(MaskMode::kUnimodal));
  auto b = forward(p, other, paired_streams(2), with_mode(MaskMode::kUnimodal));
  EXPECT_NE(rows_of(a.queries, a.query_segments[0]), rows_of(b.queries, b.query_segments[0]));
}

TEST(MQFormer, GradientsMatchFiniteDifferences) {
  Rng rng(11);
  auto cfg = tiny_config(Precision::kFloat64);
  cfg.d = 8;
  cfg.queries = 2;
  cfg.ffn_hidden = 8;
  cfg.blocks = 1;
  auto p = MQFormerParams::make(cfg, rng);
  auto in = random_inputs(2, cfg, rng, Precision::kFloat64);
  const auto probe_q = numerics::normal_tensor({2 * 2 * cfg.queries, cfg.d}, 1.0, rng, Precision::kFloat64, false);
  for (auto mode : {MaskMode::kUnimodal, MaskMode::kBimodal, MaskMode::kCausalText}) {
    auto f = [&] {
      auto out = forward(p, in, paired_streams(2), with_mode(mode));
      const auto probe_t = numerics::Tensor::full(out.text.shape(), 0.3, Precision::kFloat64);
      return numerics::add(numerics::sum(numerics::mul(out.queries, probe_q)),
                           numerics::sum(numerics::mul(numerics::mul(out.text, out.text), probe_t)));
    };
    std::vector<Tensor> xs = {p.query2d, p.query3d, p.blocks[0].self.q.weight, p.blocks[0].cross3d.v.weight,
                              p.token_embedding};
    const auto r = numerics::grad_check(f, std::span<Tensor>(xs), 1e-4);
    // A few gradients sit near 1e-7, where central differences lose digits.
    EXPECT_LT(r.max_rel_error, 1e-3) << to_string(mode) << " element " << r.worst_index;
  }
}

TEST(MQFormer, AttentionExport) {
  Rng rng(12);
  auto cfg = tiny_config();
  auto p = MQFormerParams::make(cfg, rng);
  auto in = random_inputs(2, cfg, rng);
  moldata::Vocabulary vocab;
  for (int i = 5; i < cfg.vocab_size; ++i) vocab.add("w" + std::to_string(i));
  const std::vector<std::string> ids = {"a", "b"};
  for (auto mode : {MaskMode::kUnimodal, MaskMode::kBimodal}) {
    auto rows = attention_rows(p, in, ids, vocab, mode, 1);
    EXPECT_EQ(rows.size(), 2u * 2 * static_cast<std::size_t>(cfg.queries * cfg.heads));
    for (const auto& r : rows) {
      double total = 0.0, on_text = 0.0;
      for (std::size_t c = 0; c < r.weights.size(); ++c) {
        total += r.weights[c];
        if (r.tokens[c].rfind("<q", 0) != 0) on_text += r.weights[c];
      }
      EXPECT_NEAR(total, 1.0, 1e-5);
      if (mode == MaskMode::kUnimodal) EXPECT_EQ(on_text, 0.0);
      if (mode == MaskMode::kBimodal) EXPECT_GT(on_text, 0.0);
    }
    const auto path = std::filesystem::temp_directory_path() / "molalign_attn.jsonl";
    export_attention(path, rows);
    auto back = load_attention_export(path);
    std::filesystem::remove(path);
    ASSERT_EQ(back.size(), rows.size());
    EXPECT_EQ(back[3].weights, rows[3].weights);
    EXPECT_EQ(back[3].tokens, rows[3].tokens);
  }
  EXPECT_THROW(attention_rows(p, in, ids, vocab, MaskMode::kUnimodal, 2), std::out_of_range);
}

TEST(MQFormer, ParameterPredicates) {
  EXPECT_TRUE(is_3d_only_parameter("mq.block1.cross3d.q.weight"));
  EXPECT_TRUE(is_3d_only_parameter("mq.query3d"));
  EXPECT_FALSE(is_3d_only_parameter("mq.block1.self.q.weight"));
  EXPECT_TRUE(is_text_path_parameter("mq.block0.text.ffn.up.weight"));
  EXPECT_TRUE(is_text_path_parameter("mq.text.lm_head.weight"));
  EXPECT_FALSE(is_text_path_parameter("mq.block0.self.q.weight"));
}
