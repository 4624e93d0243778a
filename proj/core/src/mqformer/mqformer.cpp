#include "molalign/mqformer/mqformer.hpp"

#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <stdexcept>

#include "molalign/numerics/ops.hpp"

namespace molalign::mqformer {

using namespace numerics;
using json = nlohmann::json;

const char* to_string(MaskMode m) {
  switch (m) {
    case MaskMode::kUnimodal: return "unimodal";
    case MaskMode::kBimodal: return "bimodal";
    case MaskMode::kCausalText: return "causal_text";
  }
  return "?";
}

const char* to_string(ViewMode v) {
  switch (v) {
    case ViewMode::kBoth: return "both";
    case ViewMode::k2D: return "2d";
    case ViewMode::k3D: return "3d";
    case ViewMode::kPrecombined: return "precombined";
  }
  return "?";
}

ViewMode parse_view_mode(const std::string& s) {
  if (s == "both") return ViewMode::kBoth;
  if (s == "2d") return ViewMode::k2D;
  if (s == "3d") return ViewMode::k3D;
  if (s == "precombined") return ViewMode::kPrecombined;
  throw std::invalid_argument("unknown views '" + s + "' (expected 2d, 3d, both or precombined)");
}

void MQFormerConfig::validate() const {
  if (d <= 0 || blocks < 0 || heads <= 0 || queries < 1 || ffn_hidden <= 0 || d_enc <= 0 ||
      max_text_len <= 0) {
    throw std::invalid_argument("projector dimensions must be positive");
  }
  if (d % heads != 0) throw std::invalid_argument("d must be divisible by heads");
  if (vocab_size <= 0) throw std::invalid_argument("vocab_size must be set");
}

void AttentionBlock::collect(ParameterSet& ps, const std::string& prefix) const {
  q.collect(ps, prefix + ".q");
  k.collect(ps, prefix + ".k");
  v.collect(ps, prefix + ".v");
  o.collect(ps, prefix + ".o");
  ln.collect(ps, prefix + ".ln");
}

namespace {

AttentionBlock make_attention(std::int64_t d, Rng& rng, Precision p) {
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  return {Linear::make(d, d, rng, p, true, s), Linear::make(d, d, rng, p, true, s),
          Linear::make(d, d, rng, p, true, s), Linear::make(d, d, rng, p, true, s),
          LayerNorm::make(d, p)};
}

FeedForward make_ffn(std::int64_t d, std::int64_t hidden, Rng& rng, Precision p) {
  return {Linear::make(d, hidden, rng, p, true, 1.0 / std::sqrt(static_cast<double>(d))),
          Linear::make(hidden, d, rng, p, true, 1.0 / std::sqrt(static_cast<double>(hidden)))};
}

bool contains(const std::string& name, const char* part) { return name.find(part) != std::string::npos; }

}  // namespace

MQFormerParams MQFormerParams::make(const MQFormerConfig& config, Rng& rng) {
  config.validate();
  const auto p = config.precision;
  const auto d = config.d;
  MQFormerParams m;
  m.config = config;
  m.query2d = normal_tensor({config.queries, d}, 0.02, rng, p);
  m.query3d = normal_tensor({config.queries, d}, 0.02, rng, p);
  m.proj2d = Linear::make(config.d_enc, d, rng, p, true, 1.0 / std::sqrt(static_cast<double>(config.d_enc)));
  m.proj3d = Linear::make(config.d_enc, d, rng, p, true, 1.0 / std::sqrt(static_cast<double>(config.d_enc)));
  m.token_embedding = normal_tensor({config.vocab_size, d}, 0.02, rng, p);
  m.position_embedding = normal_tensor({config.max_text_len, d}, 0.02, rng, p);
  m.ln_embed = LayerNorm::make(d, p);
  for (int b = 0; b < config.blocks; ++b) {
    MQBlock blk;
    blk.self = make_attention(d, rng, p);
    blk.cross2d = make_attention(d, rng, p);
    blk.cross3d = make_attention(d, rng, p);
    blk.ffn2d = make_ffn(d, config.ffn_hidden, rng, p);
    blk.ffn3d = make_ffn(d, config.ffn_hidden, rng, p);
    blk.ffn_text = make_ffn(d, config.ffn_hidden, rng, p);
    blk.ln_ffn2d = LayerNorm::make(d, p);
    blk.ln_ffn3d = LayerNorm::make(d, p);
    blk.ln_ffn_text = LayerNorm::make(d, p);
    m.blocks.push_back(std::move(blk));
  }
  m.mtm_head = Linear::make(d, 1, rng, p, true, 0.02);
  m.lm_head = Linear::make(d, config.vocab_size, rng, p, true, 0.02);
  return m;
}

ParameterSet MQFormerParams::parameters() const {
  ParameterSet ps;
  ps.add("mq.query2d", query2d);
  ps.add("mq.query3d", query3d);
  proj2d.collect(ps, "mq.proj2d");
  proj3d.collect(ps, "mq.proj3d");
  ps.add("mq.text.token_embedding", token_embedding);
  ps.add("mq.text.position_embedding", position_embedding);
  ln_embed.collect(ps, "mq.text.ln_embed");
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const auto& blk = blocks[b];
    const std::string bp = "mq.block" + std::to_string(b);
    blk.self.collect(ps, bp + ".self");
    blk.cross2d.collect(ps, bp + ".cross2d");
    blk.cross3d.collect(ps, bp + ".cross3d");
    blk.ffn2d.collect(ps, bp + ".ffn2d");
    blk.ln_ffn2d.collect(ps, bp + ".ln_ffn2d");
    blk.ffn3d.collect(ps, bp + ".ffn3d");
    blk.ln_ffn3d.collect(ps, bp + ".ln_ffn3d");
    blk.ffn_text.collect(ps, bp + ".text.ffn");
    blk.ln_ffn_text.collect(ps, bp + ".text.ln_ffn");
  }
  mtm_head.collect(ps, "mq.text.mtm_head");
  lm_head.collect(ps, "mq.text.lm_head");
  return ps;
}

const AttentionBlock& MQFormerParams::self_attention(int block, Branch) const {
  if (block < 0 || block >= static_cast<int>(blocks.size())) {
    throw std::out_of_range("block " + std::to_string(block) + " out of range");
  }
  return blocks[static_cast<std::size_t>(block)].self;
}

bool is_3d_only_parameter(const std::string& name) {
  return contains(name, "query3d") || contains(name, "proj3d") || contains(name, "cross3d") ||
         contains(name, "ffn3d");
}

bool is_2d_only_parameter(const std::string& name) {
  return contains(name, "query2d") || contains(name, "proj2d") || contains(name, "cross2d") ||
         contains(name, "ffn2d");
}

bool is_text_path_parameter(const std::string& name) { return contains(name, "mq.text.") || contains(name, ".text."); }

std::vector<Stream> paired_streams(std::int64_t m) {
  std::vector<Stream> s;
  for (int i = 0; i < m; ++i) s.push_back({i, i});
  return s;
}

Tensor concat_universal(const Tensor& q2d, const Tensor& q3d) {
  if (q2d.rank() != 2 || q3d.rank() != 2 || q2d.shape() != q3d.shape()) {
    throw ShapeError("concat_universal: query blocks must share one [K,d] shape, got " +
                     numerics::to_string(q2d.shape()) + " and " + numerics::to_string(q3d.shape()));
  }
  const Tensor parts[] = {q2d, q3d};
  return concat(parts, 0);
}

std::pair<Tensor, Tensor> split_universal(const Tensor& q) {
  if (q.rank() != 2 || q.dim(0) % 2 != 0) {
    throw ShapeError("split_universal: expected [2K,d], got " + numerics::to_string(q.shape()));
  }
  const auto k = q.dim(0) / 2;
  return {slice(q, 0, 0, k), slice(q, 0, k, 2 * k)};
}

namespace {

Tensor attend(const AttentionBlock& a, const Tensor& x, const Tensor& memory, int heads,
              const AttentionMask& mask, AttentionTrace* trace = nullptr) {
  const Tensor out = attention(a.q(x), a.k(memory), a.v(memory), heads, mask, trace);
  return a.ln(add(x, a.o(out)));
}

Tensor stacked(const std::vector<Tensor>& parts, const char* what) {
  if (parts.empty()) throw std::invalid_argument(std::string("forward: no ") + what + " inputs");
  return concat(parts, 0);
}

}  // namespace

MQOutput forward(const MQFormerParams& p, const MQInputs& in, const std::vector<Stream>& streams,
                 const ForwardOptions& opt) {
  const auto& cfg = p.config;
  const auto K = cfg.queries;
  const bool use2d = cfg.has_2d_branch();
  const bool use3d = cfg.has_3d_branch();
  const bool needs_h2d = use2d;
  const bool needs_h3d = use3d || cfg.views == ViewMode::kPrecombined;

  MQOutput out;
  std::vector<int> mol_pos(streams.size(), -1), text_pos(streams.size(), -1);
  for (std::size_t s = 0; s < streams.size(); ++s) {
    const auto& st = streams[s];
    if (st.molecule >= 0) {
      if ((needs_h2d && st.molecule >= static_cast<int>(in.h2d.size())) ||
          (needs_h3d && st.molecule >= static_cast<int>(in.h3d.size()))) {
        throw std::invalid_argument("forward: stream " + std::to_string(s) + " refers to molecule " +
                                    std::to_string(st.molecule) + " but the batch has " +
                                    std::to_string(needs_h2d ? in.h2d.size() : in.h3d.size()));
      }
      mol_pos[s] = static_cast<int>(out.query_stream.size());
      out.query_stream.push_back(static_cast<int>(s));
    }
    if (st.text >= 0) {
      if (st.text >= static_cast<int>(in.texts.size())) {
        throw std::invalid_argument("forward: stream " + std::to_string(s) + " refers to text " +
                                    std::to_string(st.text) + " but the batch has " +
                                    std::to_string(in.texts.size()));
      }
      if (in.texts[static_cast<std::size_t>(st.text)].empty()) throw std::invalid_argument("forward: empty text");
      if (static_cast<std::int64_t>(in.texts[static_cast<std::size_t>(st.text)].size()) > cfg.max_text_len) {
        throw std::invalid_argument("forward: text longer than max_text_len");
      }
      text_pos[s] = static_cast<int>(out.text_stream.size());
      out.text_stream.push_back(static_cast<int>(s));
    }
    if (st.molecule < 0 && st.text < 0) throw std::invalid_argument("forward: empty stream");
  }
  if (needs_h2d && needs_h3d && !in.h2d.empty() && in.h2d.size() != in.h3d.size()) {
    throw std::invalid_argument("forward: batch has " + std::to_string(in.h2d.size()) + " 2D and " +
                                std::to_string(in.h3d.size()) + " 3D molecules");
  }
  const auto S = static_cast<std::int64_t>(out.query_stream.size());
  const std::int64_t n2 = use2d ? S * K : 0;
  const std::int64_t n3 = use3d ? S * K : 0;
  out.rows_2d = n2;
  out.rows_3d = n3;

  // Projected encoder memories and their per-molecule segments.
  Tensor mem2d, mem3d;
  std::vector<Segment> seg2d, seg3d;
  if (S > 0) {
    std::vector<Segment> atom_seg;
    std::int64_t off = 0;
    const auto& ref = needs_h2d ? in.h2d : in.h3d;
    for (const auto& h : ref) {
      atom_seg.push_back({off, h.dim(0)});
      off += h.dim(0);
    }
    if (cfg.views == ViewMode::kPrecombined) {
      const Tensor p2 = p.proj2d(stacked(in.h2d, "2D"));
      const Tensor p3 = p.proj3d(stacked(in.h3d, "3D"));
      std::vector<RowRef> refs;
      std::int64_t moff = 0;
      for (std::size_t i = 0; i < in.h2d.size(); ++i) {
        if (in.h3d[i].dim(0) != atom_seg[i].length) {
          throw std::invalid_argument("forward: 2D and 3D atom counts differ for molecule " + std::to_string(i));
        }
        for (std::int64_t r = 0; r < atom_seg[i].length; ++r) refs.push_back({0, atom_seg[i].offset + r});
        for (std::int64_t r = 0; r < atom_seg[i].length; ++r) refs.push_back({1, atom_seg[i].offset + r});
        seg2d.push_back({moff, 2 * atom_seg[i].length});
        moff += 2 * atom_seg[i].length;
      }
      const Tensor parts[] = {p2, p3};
      mem2d = gather_rows(parts, refs);
    } else {
      if (use2d) {
        mem2d = p.proj2d(stacked(in.h2d, "2D"));
        seg2d = atom_seg;
      }
      if (use3d) {
        std::int64_t o3 = 0;
        for (const auto& h : in.h3d) {
          seg3d.push_back({o3, h.dim(0)});
          o3 += h.dim(0);
        }
        mem3d = p.proj3d(stacked(in.h3d, "3D"));
      }
    }
  }

  // Initial query rows.
  Tensor x2d, x3d, xt;
  if (S > 0) {
    std::vector<std::int64_t> rows;
    for (std::int64_t s = 0; s < S; ++s)
      for (std::int64_t k = 0; k < K; ++k) rows.push_back(k);
    if (use2d) x2d = index_rows(p.query2d, rows);
    if (use3d) x3d = index_rows(p.query3d, rows);
  }
  // Text embeddings.
  std::vector<std::int64_t> text_start;  // combined-row offset of each text stream
  if (!out.text_stream.empty()) {
    std::vector<std::int64_t> ids, positions;
    std::int64_t off = 0;
    for (int s : out.text_stream) {
      const auto& t = in.texts[static_cast<std::size_t>(streams[static_cast<std::size_t>(s)].text)];
      out.text_segments.push_back({off, static_cast<std::int64_t>(t.size())});
      text_start.push_back(n2 + n3 + off);
      off += static_cast<std::int64_t>(t.size());
      for (std::size_t i = 0; i < t.size(); ++i) {
        ids.push_back(t[i]);
        positions.push_back(static_cast<std::int64_t>(i));
      }
    }
    for (auto id : ids) {
      if (id < 0 || id >= cfg.vocab_size) throw std::invalid_argument("forward: token id " + std::to_string(id) + " outside vocabulary");
    }
    xt = p.ln_embed(add(embedding(p.token_embedding, ids), embedding(p.position_embedding, positions)));
  }

  // Shared self-attention pattern over [2D queries | 3D queries | text].
  AttentionMask self_mask;
  {
    auto query_keys = [&](int ms, bool with2d, bool with3d) {
      std::vector<std::int32_t> keys;
      if (use2d && with2d)
        for (std::int64_t k = 0; k < K; ++k) keys.push_back(static_cast<std::int32_t>(ms * K + k));
      if (use3d && with3d)
        for (std::int64_t k = 0; k < K; ++k) keys.push_back(static_cast<std::int32_t>(n2 + ms * K + k));
      return keys;
    };
    auto text_keys = [&](int ts, std::int64_t upto) {
      std::vector<std::int32_t> keys;
      for (std::int64_t t = 0; t < upto; ++t) keys.push_back(static_cast<std::int32_t>(text_start[static_cast<std::size_t>(ts)] + t));
      return keys;
    };
    auto query_row = [&](int ms) {
      const int s = out.query_stream[static_cast<std::size_t>(ms)];
      auto keys = query_keys(ms, true, true);
      if (opt.mode == MaskMode::kBimodal && text_pos[static_cast<std::size_t>(s)] >= 0) {
        const int ts = text_pos[static_cast<std::size_t>(s)];
        auto tk = text_keys(ts, out.text_segments[static_cast<std::size_t>(ts)].length);
        keys.insert(keys.end(), tk.begin(), tk.end());
      }
      self_mask.add_row(keys);
    };
    for (int pass = 0; pass < (use2d ? 1 : 0) + (use3d ? 1 : 0); ++pass)
      for (int ms = 0; ms < S; ++ms)
        for (std::int64_t k = 0; k < K; ++k) query_row(ms);
    for (int ts = 0; ts < static_cast<int>(out.text_stream.size()); ++ts) {
      const int s = out.text_stream[static_cast<std::size_t>(ts)];
      const int ms = mol_pos[static_cast<std::size_t>(s)];
      const auto len = out.text_segments[static_cast<std::size_t>(ts)].length;
      for (std::int64_t t = 0; t < len; ++t) {
        std::vector<std::int32_t> keys;
        if (ms >= 0 && opt.mode != MaskMode::kUnimodal) {
          const bool v2 = opt.mode == MaskMode::kBimodal || opt.visible != QueryVisibility::k3D;
          const bool v3 = opt.mode == MaskMode::kBimodal || opt.visible != QueryVisibility::k2D;
          keys = query_keys(ms, v2, v3);
        }
        auto tk = text_keys(ts, opt.mode == MaskMode::kCausalText ? t + 1 : len);
        keys.insert(keys.end(), tk.begin(), tk.end());
        self_mask.add_row(keys);
      }
    }
  }
  // Cross-attention patterns: each query row sees its own molecule's atoms.
  auto cross_mask = [&](const std::vector<Segment>& segs) {
    AttentionMask m;
    for (int ms = 0; ms < S; ++ms) {
      const int mol = streams[static_cast<std::size_t>(out.query_stream[static_cast<std::size_t>(ms)])].molecule;
      const auto seg = segs[static_cast<std::size_t>(mol)];
      std::vector<std::int32_t> keys;
      for (std::int64_t r = 0; r < seg.length; ++r) keys.push_back(static_cast<std::int32_t>(seg.offset + r));
      for (std::int64_t k = 0; k < K; ++k) m.add_row(keys);
    }
    return m;
  };
  AttentionMask cmask2d, cmask3d;
  if (use2d && S > 0) cmask2d = cross_mask(seg2d);
  if (use3d && S > 0) cmask3d = cross_mask(seg3d);

  for (const auto& blk : p.blocks) {
    std::vector<Tensor> parts;
    if (x2d.defined()) parts.push_back(x2d);
    if (x3d.defined()) parts.push_back(x3d);
    if (xt.defined()) parts.push_back(xt);
    const Tensor x = parts.size() == 1 ? parts[0] : concat(parts, 0);
    AttentionTrace* trace = nullptr;
    if (opt.record_attention) trace = &out.self_traces.emplace_back();
    const Tensor y = attend(blk.self, x, x, cfg.heads, self_mask, trace);
    std::int64_t off = 0;
    auto take = [&](Tensor& part) {
      if (!part.defined()) return;
      const auto n = part.dim(0);
      part = parts.size() == 1 ? y : slice(y, 0, off, off + n);
      off += n;
    };
    take(x2d);
    take(x3d);
    take(xt);
    if (x2d.defined()) {
      x2d = attend(blk.cross2d, x2d, mem2d, cfg.heads, cmask2d);
      x2d = blk.ln_ffn2d(add(x2d, blk.ffn2d(x2d)));
    }
    if (x3d.defined()) {
      x3d = attend(blk.cross3d, x3d, mem3d, cfg.heads, cmask3d);
      x3d = blk.ln_ffn3d(add(x3d, blk.ffn3d(x3d)));
    }
    if (xt.defined()) xt = blk.ln_ffn_text(add(xt, blk.ffn_text(xt)));
  }

  out.q2d = x2d;
  out.q3d = x3d;
  out.text = xt;
  if (S > 0) {
    const auto U = cfg.universal_rows();
    std::vector<RowRef> refs;
    for (std::int64_t s = 0; s < S; ++s) {
      if (use2d)
        for (std::int64_t k = 0; k < K; ++k) refs.push_back({0, s * K + k});
      if (use3d)
        for (std::int64_t k = 0; k < K; ++k) refs.push_back({1, s * K + k});
      out.query_segments.push_back({s * U, U});
    }
    const Tensor sources[] = {use2d ? x2d : x3d, use3d ? x3d : x2d};
    out.queries = gather_rows(sources, refs);
  }
  return out;
}

std::vector<AttentionExportRow> attention_rows(const MQFormerParams& p, const MQInputs& inputs,
                                               const std::vector<std::string>& sample_ids,
                                               const moldata::Vocabulary& vocab, MaskMode mode,
                                               int layer) {
  if (layer < 0 || layer >= p.config.blocks) {
    throw std::out_of_range("export_attention: layer " + std::to_string(layer) + " out of range [0, " +
                            std::to_string(p.config.blocks) + ")");
  }
  const auto m = static_cast<std::int64_t>(inputs.texts.size());
  if (static_cast<std::int64_t>(sample_ids.size()) != m) {
    throw std::invalid_argument("export_attention: one sample id per text required");
  }
  NoGradGuard no_grad;
  ForwardOptions opt;
  opt.mode = mode;
  opt.record_attention = true;
  const auto out = forward(p, inputs, paired_streams(m), opt);
  const auto& trace = out.self_traces[static_cast<std::size_t>(layer)];
  const auto K = p.config.queries;
  const bool use2d = p.config.has_2d_branch(), use3d = p.config.has_3d_branch();

  std::vector<AttentionExportRow> rows;
  for (std::int64_t s = 0; s < m; ++s) {
    // Column layout of the stream: its 2D queries, its 3D queries, its text.
    const auto& text = inputs.texts[static_cast<std::size_t>(s)];
    std::vector<std::string> labels;
    std::vector<std::pair<std::int64_t, std::int64_t>> column_ranges;  // combined-row start, count
    if (use2d) {
      for (std::int64_t k = 0; k < K; ++k) labels.push_back("<q2d_" + std::to_string(k) + ">");
      column_ranges.push_back({s * K, K});
    }
    if (use3d) {
      for (std::int64_t k = 0; k < K; ++k) labels.push_back("<q3d_" + std::to_string(k) + ">");
      column_ranges.push_back({out.rows_2d + s * K, K});
    }
    for (auto id : text) labels.push_back(vocab.token(id));
    column_ranges.push_back({out.rows_2d + out.rows_3d + out.text_segments[static_cast<std::size_t>(s)].offset,
                             static_cast<std::int64_t>(text.size())});
    auto column_of = [&](std::int64_t key) -> std::int64_t {
      std::int64_t base = 0;
      for (auto [start, count] : column_ranges) {
        if (key >= start && key < start + count) return base + key - start;
        base += count;
      }
      throw std::logic_error("attention key outside its stream");
    };
    auto emit = [&](const char* view, std::int64_t row, std::int64_t k) {
      const auto b = trace.mask.offsets[static_cast<std::size_t>(row)];
      const auto e = trace.mask.offsets[static_cast<std::size_t>(row) + 1];
      for (int h = 0; h < p.config.heads; ++h) {
        AttentionExportRow r;
        r.sample_id = sample_ids[static_cast<std::size_t>(s)];
        r.layer = layer;
        r.head = h;
        r.query_view = view;
        r.query_index = k;
        r.tokens = labels;
        r.weights.assign(labels.size(), 0.0);
        for (auto i = b; i < e; ++i) {
          r.weights[static_cast<std::size_t>(column_of(trace.mask.keys[static_cast<std::size_t>(i)]))] +=
              trace.probs[static_cast<std::size_t>(h)][static_cast<std::size_t>(i)];
        }
        rows.push_back(std::move(r));
      }
    };
    if (use2d)
      for (std::int64_t k = 0; k < K; ++k) emit("2d", s * K + k, k);
    if (use3d)
      for (std::int64_t k = 0; k < K; ++k) emit("3d", out.rows_2d + s * K + k, k);
  }
  return rows;
}

void export_attention(const std::filesystem::path& path, const std::vector<AttentionExportRow>& rows) {
  std::ofstream f(path);
  if (!f) throw std::ios_base::failure("cannot write attention export " + path.string());
  for (const auto& r : rows) {
    json j;
    j["sample_id"] = r.sample_id;
    j["layer"] = r.layer;
    j["head"] = r.head;
    j["query_view"] = r.query_view;
    j["query_index"] = r.query_index;
    j["weights"] = r.weights;
    j["tokens"] = r.tokens;
    f << j.dump() << '\n';
  }
  if (!f) throw std::ios_base::failure("write failed for " + path.string());
}

std::vector<AttentionExportRow> load_attention_export(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::ios_base::failure("cannot open attention export " + path.string());
  std::vector<AttentionExportRow> rows;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const auto j = json::parse(line);
    AttentionExportRow r;
    r.sample_id = j.at("sample_id").get<std::string>();
    r.layer = j.at("layer").get<int>();
    r.head = j.at("head").get<int>();
    r.query_view = j.at("query_view").get<std::string>();
    r.query_index = j.at("query_index").get<std::int64_t>();
    r.weights = j.at("weights").get<std::vector<double>>();
    r.tokens = j.at("tokens").get<std::vector<std::string>>();
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace molalign::mqformer
