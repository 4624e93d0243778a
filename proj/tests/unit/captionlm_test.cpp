#include <gtest/gtest.h>

#include <cmath>

#include "molalign/captionlm/captionlm.hpp"
#include "molalign/numerics/gradcheck.hpp"
#include "molalign/numerics/ops.hpp"

using namespace molalign;
using namespace molalign::captionlm;
using numerics::Precision;
using numerics::Rng;

namespace {

DecoderConfig small_config(Precision p = Precision::kFloat32) {
  DecoderConfig c;
  c.d_dec = 32;
  c.heads = 4;
  c.ffn_hidden = 48;
  c.d_soft = 16;
  c.vocab_size = 40;
  c.max_seq = 64;
  c.precision = p;
  return c;
}

std::vector<std::int64_t> ids(std::initializer_list<std::int64_t> v) { return v; }

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(AssembleInput, LengthsAndTargets) {
  Rng rng(1);
  auto p = DecoderParams::make(small_config(), rng);
  const auto q = numerics::normal_tensor({8, 16}, 1.0, rng, Precision::kFloat32, false);
  const auto prompt = ids({5, 6, 7, 8, 9});
  const auto smiles = ids({10, 11, 12, 13, 14, 15});
  const auto caption = ids({20, 21, 22, 23, 24, 25, 26, 27, 28, 4});
  const auto in = assemble_input(p, q, smiles, prompt, caption);
  EXPECT_EQ(in.length, 29);
  EXPECT_EQ(in.embeds.shape(), (numerics::Shape{29, 32}));
  EXPECT_EQ(in.target_count, 10);
  EXPECT_EQ(in.caption_start, 19);
  int counted = 0;
  for (std::size_t t = 0; t < in.targets.size(); ++t) {
    if (in.targets[t] == numerics::kIgnoreIndex) continue;
    ++counted;
    EXPECT_EQ(in.targets[t], caption[t - 18]);
  }
  EXPECT_EQ(counted, 10);
  EXPECT_EQ(assemble_input(p, q, smiles, prompt, {}).target_count, 0);
}

TEST(AssembleInput, QueryRowsAreContinuous) {
  Rng rng(2);
  auto p = DecoderParams::make(small_config(), rng);
  const auto q = numerics::normal_tensor({4, 16}, 1.0, rng, Precision::kFloat32, false);
  auto q2 = q.clone();
  q2.mutable_data()[0] += 0.5;
  const auto a = assemble_input(p, q, ids({10}), ids({5, 6}), ids({20, 4}));
  const auto b = assemble_input(p, q2, ids({10}), ids({5, 6}), ids({20, 4}));
  const auto d = 32;
  auto va = values(a.embeds), vb = values(b.embeds);
  EXPECT_NE(std::vector<double>(va.begin(), va.begin() + d), std::vector<double>(vb.begin(), vb.begin() + d));
  EXPECT_EQ(std::vector<double>(va.begin() + 4 * d, va.end()), std::vector<double>(vb.begin() + 4 * d, vb.end()));
}

TEST(AssembleInput, OrderIsConfigurable) {
  EXPECT_EQ(to_string(parse_input_order("prompt,queries,smiles")), "prompt,queries,smiles");
  EXPECT_THROW(parse_input_order("queries,prompt"), std::invalid_argument);
  EXPECT_THROW(parse_input_order("queries,prompt,prompt"), std::invalid_argument);
  EXPECT_THROW(parse_input_order("queries,text,smiles"), std::invalid_argument);

  Rng rng(3);
  auto cfg = small_config();
  auto a = DecoderParams::make(cfg, rng);
  auto b = a;
  b.config.order = parse_input_order("smiles,prompt,queries");
  const auto q = numerics::normal_tensor({2, 16}, 1.0, rng, Precision::kFloat32, false);
  const auto x = assemble_input(a, q, ids({10, 11}), ids({5}), {});
  const auto y = assemble_input(b, q, ids({10, 11}), ids({5}), {});
  EXPECT_EQ(x.length, y.length);
  EXPECT_NE(values(x.embeds), values(y.embeds));
}

TEST(AssembleInput, TooLongIsAnError) {
  Rng rng(4);
  auto cfg = small_config();
  cfg.max_seq = 10;
  auto p = DecoderParams::make(cfg, rng);
  const auto q = numerics::normal_tensor({4, 16}, 1.0, rng, Precision::kFloat32, false);
  EXPECT_NO_THROW(assemble_input(p, q, ids({10, 11}), ids({5, 6}), ids({20, 4})));
  EXPECT_THROW(assemble_input(p, q, ids({10, 11}), ids({5, 6}), ids({20, 21, 4})), std::invalid_argument);
}

TEST(LoRA, IdentityAtInit) {
  Rng rng(5);
  auto p = DecoderParams::make(small_config(), rng);
  const auto q = numerics::normal_tensor({4, 16}, 1.0, rng, Precision::kFloat32, false);
  const AssembledInput in[] = {assemble_input(p, q, ids({10, 11, 12}), ids({5, 6}), ids({20, 21, 4}))};
  const auto base = values(decode(p, in));
  auto adapted = p;
  adapted.attach_lora(LoRAConfig{}, rng);
  ASSERT_TRUE(adapted.has_lora());
  const AssembledInput in2[] = {assemble_input(adapted, q, ids({10, 11, 12}), ids({5, 6}), ids({20, 21, 4}))};
  EXPECT_EQ(values(decode(adapted, in2)), base);
}

TEST(LoRA, ScalingAndRankLimits) {
  EXPECT_DOUBLE_EQ((LoRAConfig{8, 32.0, 0.1}).scaling(), 4.0);
  Rng rng(6);
  LoRAConfig lc;
  lc.rank = 16;
  EXPECT_THROW(LoRAAdapter::make(16, 32, lc, rng, Precision::kFloat32), std::invalid_argument);
  EXPECT_THROW(LoRAAdapter::make(32, 16, lc, rng, Precision::kFloat32), std::invalid_argument);
  EXPECT_NO_THROW(LoRAAdapter::make(17, 32, lc, rng, Precision::kFloat32));
  lc.rank = 0;
  EXPECT_THROW(LoRAAdapter::make(32, 32, lc, rng, Precision::kFloat32), std::invalid_argument);
}

TEST(LoRA, ApplyMatchesExplicitFormula) {
  Rng rng(7);
  const auto base = numerics::Linear::make(6, 5, rng, Precision::kFloat64);
  LoRAConfig lc;
  lc.rank = 2;
  lc.alpha = 3.0;
  auto ad = LoRAAdapter::make(6, 5, lc, rng, Precision::kFloat64);
  for (double& v : ad.b.mutable_data()) v = rng.normal();
  const auto x = numerics::normal_tensor({3, 6}, 1.0, rng, Precision::kFloat64, false);
  const auto y = lora_apply(base, ad, x);
  for (std::int64_t i = 0; i < 3; ++i)
    for (std::int64_t o = 0; o < 5; ++o) {
      double ref = base.bias.at(o);
      for (std::int64_t c = 0; c < 6; ++c) ref += x.at(i, c) * base.weight.at(c, o);
      double delta = 0.0;
      for (std::int64_t r = 0; r < 2; ++r) {
        double ax = 0.0;
        for (std::int64_t c = 0; c < 6; ++c) ax += ad.a.at(r, c) * x.at(i, c);
        delta += ad.b.at(o, r) * ax;
      }
      EXPECT_NEAR(y.at(i, o), ref + 1.5 * delta, 1e-12);
    }
}

TEST(LoRA, ParameterWalkMatchesCount) {
  Rng rng(8);
  auto cfg = small_config();
  auto p = DecoderParams::make(cfg, rng);
  LoRAConfig lc;
  p.attach_lora(lc, rng);
  p.freeze_base();
  std::int64_t walked = 0;
  for (const auto& item : p.parameters().items()) {
    const bool is_lora = item.name.find(".lora_") != std::string::npos;
    EXPECT_EQ(item.tensor.requires_grad(), is_lora) << item.name;
    if (item.tensor.requires_grad()) walked += item.tensor.numel();
  }
  // Per adapted matrix r * (d_in + d_out); a square d x d matrix gives 2 r d.
  const std::int64_t d = cfg.d_dec, h = cfg.ffn_hidden, r = lc.rank;
  const std::int64_t per_block = 4 * (2 * r * d) + 2 * r * (d + h) + r * (h + d);
  EXPECT_EQ(walked, cfg.blocks * per_block);
  EXPECT_EQ(walked, p.lora_parameters().count(true));
}

TEST(Decoder, StageTwoGradientFlow) {
  Rng rng(9);
  auto p = DecoderParams::make(small_config(), rng);
  p.attach_lora(LoRAConfig{}, rng);
  p.freeze_base();
  auto q = numerics::normal_tensor({4, 16}, 1.0, rng, Precision::kFloat32, true);
  const AssembledInput in[] = {assemble_input(p, q, ids({10, 11}), ids({5}), ids({20, 21, 4}))};
  numerics::backward(caption_loss(p, in, &rng));
  for (const auto& item : p.base_parameters().items()) EXPECT_FALSE(item.tensor.has_grad()) << item.name;
  for (const auto& item : p.lora_parameters().items()) EXPECT_TRUE(item.tensor.has_grad()) << item.name;
  EXPECT_TRUE(q.has_grad());
}

TEST(Decoder, CausalAndBatchIndependent) {
  Rng rng(10);
  auto p = DecoderParams::make(small_config(), rng);
  const auto q = numerics::normal_tensor({4, 16}, 1.0, rng, Precision::kFloat32, false);
  const AssembledInput a[] = {assemble_input(p, q, ids({10, 11}), ids({5}), ids({20, 21, 22, 4}))};
  const AssembledInput b[] = {assemble_input(p, q, ids({10, 11}), ids({5}), ids({20, 30, 31, 4}))};
  const auto la = values(decode(p, a)), lb = values(decode(p, b));
  const std::size_t v = 40;
  // Positions up to and including the one holding token 20 see identical prefixes.
  const std::size_t same = static_cast<std::size_t>(a[0].caption_start + 1) * v;
  EXPECT_EQ(std::vector<double>(la.begin(), la.begin() + same), std::vector<double>(lb.begin(), lb.begin() + same));
  EXPECT_NE(la, lb);
  // Batching with another sequence leaves each sequence's logits unchanged.
  const AssembledInput both[] = {a[0], b[0]};
  const auto lab = values(decode(p, both));
  EXPECT_EQ(std::vector<double>(lab.begin(), lab.begin() + la.size()), la);
  EXPECT_EQ(std::vector<double>(lab.begin() + la.size(), lab.end()), lb);
}

TEST(Decoder, UntrainedLossIsNearUniform) {
  Rng rng(11);
  auto cfg = small_config();
  cfg.vocab_size = 80;
  auto p = DecoderParams::make(cfg, rng);
  std::vector<AssembledInput> batch;
  for (int i = 0; i < 16; ++i) {
    std::vector<std::int64_t> cap;
    for (int t = 0; t < 8; ++t) cap.push_back(5 + static_cast<std::int64_t>(rng.uniform_int(75)));
    const auto q = numerics::normal_tensor({4, 16}, 1.0, rng, Precision::kFloat32, false);
    batch.push_back(assemble_input(p, q, ids({10, 11}), ids({5, 6}), cap));
  }
  EXPECT_NEAR(caption_loss(p, batch).item(), std::log(80.0), 0.15 * std::log(80.0));
}

TEST(Decoder, GradientsMatchFiniteDifferences) {
  Rng rng(12);
  auto cfg = small_config(Precision::kFloat64);
  cfg.d_dec = 8;
  cfg.heads = 2;
  cfg.ffn_hidden = 8;
  cfg.d_soft = 4;
  cfg.vocab_size = 12;
  cfg.blocks = 1;
  auto p = DecoderParams::make(cfg, rng);
  LoRAConfig lc;
  lc.rank = 2;
  p.attach_lora(lc, rng);
  for (double& v : p.blocks[0].v.lora->b.mutable_data()) v = 0.1 * rng.normal();
  for (double& v : p.blocks[0].down.lora->b.mutable_data()) v = 0.1 * rng.normal();
  p.freeze_base();
  auto q = numerics::normal_tensor({2, 4}, 1.0, rng, Precision::kFloat64, true);
  auto f = [&] {
    const AssembledInput in[] = {assemble_input(p, q, ids({6, 7}), ids({5}), ids({8, 9, 4})),
                                 assemble_input(p, q, ids({7}), ids({5}), ids({10, 4}))};
    return caption_loss(p, in);
  };
  std::vector<Tensor> xs = {q, p.blocks[0].v.lora->a, p.blocks[0].v.lora->b, p.blocks[0].down.lora->a,
                            p.blocks[0].gate.lora->b};
  EXPECT_LT(numerics::grad_check(f, std::span<Tensor>(xs)).max_rel_error, 1e-4);
}

TEST(Decoder, GreedyGenerationContracts) {
  Rng rng(13);
  auto p = DecoderParams::make(small_config(), rng);
  const auto q = numerics::normal_tensor({4, 16}, 1.0, rng, Precision::kFloat32, false);
  EXPECT_TRUE(generate_greedy(p, q, ids({10}), ids({5}), 0).empty());
  const auto a = generate_greedy(p, q, ids({10}), ids({5}), 12);
  const auto b = generate_greedy(p, q, ids({10}), ids({5}), 12);
  EXPECT_EQ(a, b);
  EXPECT_LE(a.size(), 12u);
}

TEST(Decoder, OverfitsOnePairAndRegeneratesIt) {
  Rng rng(14);
  // Default width: with the final norm and head frozen, the reachable logit margin grows with sqrt(d_dec).
  auto cfg = small_config();
  cfg.d_dec = DecoderConfig{}.d_dec;
  auto p = DecoderParams::make(cfg, rng);
  p.attach_lora(LoRAConfig{}, rng);
  p.freeze_base();
  auto q = numerics::normal_tensor({4, 16}, 1.0, rng, Precision::kFloat32, true);
  const auto caption = ids({20, 21, 22, 23, 24, 25, 4});
  std::vector<numerics::NamedTensor> trainable = p.lora_parameters().trainable();
  trainable.push_back({"q", q});
  numerics::AdamW opt(trainable, {0.9, 0.999, 1e-8, 0.0});
  double loss = 0.0;
  for (int step = 0; step < 500; ++step) {
    const AssembledInput in[] = {assemble_input(p, q, ids({10, 11}), ids({5, 6}), caption)};
    opt.zero_grad();
    const auto l = caption_loss(p, in, &rng);
    numerics::backward(l);
    opt.step(3e-3);
    loss = l.item();
  }
  const AssembledInput in[] = {assemble_input(p, q, ids({10, 11}), ids({5, 6}), caption)};
  EXPECT_LT(caption_loss(p, in).item(), 0.05) << "last training loss " << loss;
  EXPECT_EQ(generate_greedy(p, q, ids({10, 11}), ids({5, 6}), 20), ids({20, 21, 22, 23, 24, 25}));
}

TEST(Decoder, LanguageModelPretrainingLowersLoss) {
  Rng rng(15);
  auto p = DecoderParams::make(small_config(), rng);
  std::vector<std::vector<std::int64_t>> texts;
  for (int i = 0; i < 12; ++i) texts.push_back({2, 20 + i % 3, 30, 31 + i % 2, 4});
  auto before = p.parameters().count(true);
  LMPretrainConfig lc;
  lc.epochs = 1;
  const double first = pretrain_decoder(p, texts, lc);
  lc.epochs = 40;
  const double later = pretrain_decoder(p, texts, lc);
  EXPECT_LT(later, first);
  EXPECT_EQ(p.parameters().count(true), 0);
  EXPECT_GT(before, 0);
}

TEST(Decoder, TokenHelpers) {
  moldata::Vocabulary v;
  for (const char* w : {"Describe", "the", "molecule", ":", "C", "Cl", "O", "(", ")", "=", "cat"}) v.add(w);
  DecoderConfig c;
  EXPECT_EQ(prompt_tokens(c, v), (std::vector<std::int64_t>{v.id("Describe"), v.id("the"), v.id("molecule"), v.id(":")}));
  EXPECT_EQ(smiles_tokens("ClC(=O)", v),
            (std::vector<std::int64_t>{v.id("Cl"), v.id("C"), v.id("("), v.id("="), v.id("O"), v.id(")")}));
  EXPECT_EQ(caption_tokens("the cat", v), (std::vector<std::int64_t>{v.id("the"), v.id("cat"), moldata::kSepId}));
}
