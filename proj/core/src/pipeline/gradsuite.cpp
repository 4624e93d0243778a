#include "molalign/pipeline/gradsuite.hpp"

#include <functional>
#include <limits>
#include <map>

#include "molalign/numerics/gradcheck.hpp"
#include "molalign/objectives/objectives.hpp"

namespace molalign::pipeline {

using numerics::Rng;
using numerics::Segment;
using numerics::Tensor;

namespace {

// Smallest gap between the two largest entries of any max reduction in the
// token-level similarity, over rows (tokens of one text) and columns (queries
// of one molecule). Below the perturbation scale, finite differences straddle
// the switch of the maximizer and stop measuring the gradient.
double max_margin(const mqformer::MQFormerParams& p, const mqformer::MQInputs& in) {
  numerics::NoGradGuard guard;
  const auto out = objectives::retrieval_forward(p, in);
  const Tensor c = numerics::cosine_similarity(out.queries, out.text);
  const auto v = c.data();
  const auto cols = c.dim(1);
  double margin = std::numeric_limits<double>::infinity();
  auto gap = [&](auto at, std::int64_t n) {
    if (n < 2) return;
    double a = -2.0, b = -2.0;
    for (std::int64_t k = 0; k < n; ++k) {
      const double x = at(k);
      if (x > a) {
        b = a;
        a = x;
      } else if (x > b) {
        b = x;
      }
    }
    margin = std::min(margin, a - b);
  };
  for (const Segment& ts : out.text_segments)
    for (std::int64_t r = 0; r < c.dim(0); ++r)
      gap([&](std::int64_t k) { return v[static_cast<std::size_t>(r * cols + ts.offset + k)]; }, ts.length);
  for (const Segment& qs : out.query_segments)
    for (std::int64_t t = 0; t < cols; ++t)
      gap([&](std::int64_t k) { return v[static_cast<std::size_t>((qs.offset + k) * cols + t)]; }, qs.length);
  return margin;
}

}  // namespace

std::vector<GradTermResult> gradient_suite(int batches, std::uint64_t seed, double step) {
  const auto p64 = numerics::Precision::kFloat64;
  std::map<std::string, GradTermResult> worst;
  const char* terms[] = {"mtc", "mtm", "mcap", "total"};
  for (const char* t : terms) worst[t] = {t, 0.0, "", 0.0, 0.0};

  for (int b = 0; b < batches; ++b) {
    Rng rng(seed * 1000 + static_cast<std::uint64_t>(b));
    // Redraw instances that sit within kMinMargin of a tie.
    constexpr double kMinMargin = 2e-3;
    mqformer::MQFormerParams p;
    mqformer::MQInputs in;
    do {
      mqformer::MQFormerConfig c;
      c.d = 8;
      c.heads = 2;
      c.queries = 1 + static_cast<std::int64_t>(rng.uniform_int(2));
      c.ffn_hidden = 8;
      c.d_enc = 6;
      c.blocks = 1 + static_cast<int>(rng.uniform_int(2));
      c.vocab_size = 12;
      c.max_text_len = 8;
      c.precision = p64;
      p = mqformer::MQFormerParams::make(c, rng);

      const int m = 2 + static_cast<int>(rng.uniform_int(2));
      in = {};
      for (int i = 0; i < m; ++i) {
        const auto atoms = 2 + static_cast<std::int64_t>(rng.uniform_int(3));
        in.h2d.push_back(numerics::normal_tensor({atoms, c.d_enc}, 1.0, rng, p64, false));
        in.h3d.push_back(numerics::normal_tensor({atoms, c.d_enc}, 1.0, rng, p64, false));
        std::vector<std::int64_t> text = {moldata::kDecId};
        const auto words = 1 + rng.uniform_int(2);
        for (std::uint64_t k = 0; k < words; ++k) text.push_back(5 + static_cast<std::int64_t>(rng.uniform_int(7)));
        text.push_back(moldata::kSepId);
        in.texts.push_back(text);
      }
    } while (max_margin(p, in) < kMinMargin);

    const auto& blk = p.blocks.front();
    std::vector<std::pair<std::string, Tensor>> checked = {
        {"query2d", p.query2d},          {"query3d", p.query3d},
        {"proj2d.weight", p.proj2d.weight}, {"proj3d.weight", p.proj3d.weight},
        {"self.q.weight", blk.self.q.weight}, {"self.v.weight", blk.self.v.weight},
        {"cross2d.k.weight", blk.cross2d.k.weight}, {"cross3d.o.weight", blk.cross3d.o.weight},
        {"token_embedding", p.token_embedding}, {"mtm_head.weight", p.mtm_head.weight},
        {"lm_head.bias", p.lm_head.bias}};
    const std::uint64_t neg_seed = seed * 7919 + static_cast<std::uint64_t>(b);
    objectives::ObjectiveConfig oc;
    const std::map<std::string, std::function<Tensor()>> fns = {
        {"mtc", [&] { return objectives::loss_mtc(p, in, oc.tau); }},
        {"mtm",
         [&] {
           Rng fixed(neg_seed);  // same negatives on every evaluation
           return objectives::loss_mtm(p, in, fixed);
         }},
        {"mcap", [&] { return objectives::loss_mcap(p, in); }},
        {"total",
         [&] {
           Rng fixed(neg_seed);
           return objectives::stage1_losses(p, in, oc, fixed).total;
         }},
    };
    for (const auto& [term, f] : fns) {
      for (auto& [name, t] : checked) {
        const auto r = numerics::grad_check(f, t, step);
        auto& w = worst[term];
        if (w.worst_tensor.empty() || r.max_rel_error > w.max_rel_error) {
          w.max_rel_error = r.max_rel_error;
          w.worst_tensor = name + " (batch " + std::to_string(b) + ")";
          w.analytic = r.analytic;
          w.numeric = r.numeric;
        }
      }
    }
  }
  std::vector<GradTermResult> out;
  for (const char* t : terms) out.push_back(worst[t]);
  return out;
}

}  // namespace molalign::pipeline
