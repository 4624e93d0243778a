#include "molalign/encoders/encoders.hpp"

#include <cmath>
#include <stdexcept>

#include "molalign/numerics/ops.hpp"
#include "molalign/numerics/optim.hpp"

namespace molalign::encoders {

using namespace numerics;

const char* to_string(View v) { return v == View::k2D ? "2d" : "3d"; }

void EncoderConfig::validate() const {
  if (d_enc <= 0 || layers < 0 || heads <= 0 || ffn_hidden <= 0 || basis_size <= 0) {
    throw std::invalid_argument("encoder dimensions must be positive");
  }
  if (d_enc % heads != 0) throw std::invalid_argument("d_enc must be divisible by heads");
  if (lambda_attn < 0 || lambda_dist < 0 || lambda_graph < 0 ||
      lambda_attn + lambda_dist + lambda_graph <= 0) {
    throw std::invalid_argument("mixing weights must be non-negative with a positive sum");
  }
}

EncoderParams EncoderParams::make(View view, const EncoderConfig& config, Rng& rng) {
  config.validate();
  const auto p = config.precision;
  const auto d = config.d_enc;
  EncoderParams e;
  e.config = config;
  e.view = view;
  if (view == View::k2D) {
    e.atom_in = Linear::make(moldata::kAtomFeatureDim, d, rng, p, true, 0.5);
  } else {
    e.element_embedding = normal_tensor({moldata::kNumElements + 1, d}, 0.5, rng, p);
    e.basis_widths = Tensor::full({config.basis_size}, 1.0, p, true);
    e.radial_in = Linear::make(config.basis_size, d, rng, p, false, 0.5);
    for (int k = 0; k < config.basis_size; ++k) {
      e.basis_centres.push_back(config.basis_size == 1 ? 0.0
                                                       : config.basis_max * k / (config.basis_size - 1));
    }
  }
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  for (int l = 0; l < config.layers; ++l) {
    EncoderLayer layer;
    layer.q = Linear::make(d, d, rng, p, true, s);
    layer.k = Linear::make(d, d, rng, p, true, s);
    layer.v = Linear::make(d, d, rng, p, true, s);
    layer.o = Linear::make(d, d, rng, p, true, s);
    layer.ln_attn = LayerNorm::make(d, p);
    layer.ffn = FeedForward{Linear::make(d, config.ffn_hidden, rng, p, true, s),
                            Linear::make(config.ffn_hidden, d, rng, p, true,
                                         1.0 / std::sqrt(static_cast<double>(config.ffn_hidden)))};
    layer.ln_ffn = LayerNorm::make(d, p);
    if (view == View::k3D) layer.pair_bias = Linear::make(config.basis_size, config.heads, rng, p, true, 0.5);
    e.layers.push_back(std::move(layer));
  }
  return e;
}

ParameterSet EncoderParams::parameters(const std::string& prefix) const {
  ParameterSet ps;
  const std::string base = prefix.empty() ? std::string("enc") + to_string(view) : prefix;
  if (view == View::k2D) {
    atom_in.collect(ps, base + ".atom_in");
  } else {
    ps.add(base + ".element_embedding", element_embedding);
    ps.add(base + ".basis_widths", basis_widths);
    radial_in.collect(ps, base + ".radial_in");
  }
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& L = layers[l];
    const std::string lp = base + ".layer" + std::to_string(l);
    L.q.collect(ps, lp + ".q");
    L.k.collect(ps, lp + ".k");
    L.v.collect(ps, lp + ".v");
    L.o.collect(ps, lp + ".o");
    L.ln_attn.collect(ps, lp + ".ln_attn");
    L.ffn.collect(ps, lp + ".ffn");
    L.ln_ffn.collect(ps, lp + ".ln_ffn");
    if (L.pair_bias.weight.defined()) L.pair_bias.collect(ps, lp + ".pair_bias");
  }
  return ps;
}

void EncoderParams::freeze() {
  set_requires_grad(parameters(), false);
  frozen = true;
}

std::array<double, 3> EncoderParams::mixing_weights() const {
  const double total = config.lambda_attn + config.lambda_dist + config.lambda_graph;
  return {config.lambda_attn / total, config.lambda_dist / total, config.lambda_graph / total};
}

namespace {

// One post-norm transformer layer. fixed_mix (2D) is added to the scaled
// softmax; head_bias (3D) is added to the logits of each head.
Tensor layer_forward(const EncoderLayer& L, const Tensor& h, int heads, double attn_weight,
                     const Tensor& fixed_mix, const std::vector<Tensor>& head_bias) {
  const auto d = h.dim(1);
  const auto dh = d / heads;
  const Tensor q = L.q(h), k = L.k(h), v = L.v(h);
  std::vector<Tensor> outs;
  for (int hd = 0; hd < heads; ++hd) {
    const Tensor qh = slice(q, 1, hd * dh, (hd + 1) * dh);
    const Tensor kh = slice(k, 1, hd * dh, (hd + 1) * dh);
    const Tensor vh = slice(v, 1, hd * dh, (hd + 1) * dh);
    Tensor logits = scale(matmul_transposed(qh, kh), 1.0 / std::sqrt(static_cast<double>(dh)));
    if (!head_bias.empty()) logits = add(logits, head_bias[static_cast<std::size_t>(hd)]);
    Tensor probs = softmax_rows(logits);
    if (fixed_mix.defined()) probs = add(scale(probs, attn_weight), fixed_mix);
    outs.push_back(matmul(probs, vh));
  }
  const Tensor mixed = concat(outs, 1);
  const Tensor x = L.ln_attn(add(h, L.o(mixed)));
  return L.ln_ffn(add(x, L.ffn(x)));
}

std::vector<double> row_normalized(std::vector<double> m, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += m[i * n + j];
    if (s > 0)
      for (std::size_t j = 0; j < n; ++j) m[i * n + j] /= s;
  }
  return m;
}

void check_not_empty(const moldata::Molecule& m, const char* who) {
  if (m.atom_count() == 0) throw std::invalid_argument(std::string(who) + ": empty molecule");
}

}  // namespace

EncoderOutput encode_2d(const moldata::Molecule& m, const EncoderParams& p, int masked_atom) {
  if (p.view != View::k2D) throw std::invalid_argument("encode_2d: parameters are for the 3D view");
  check_not_empty(m, "encode_2d");
  const auto n = static_cast<std::int64_t>(m.atom_count());
  const auto un = static_cast<std::size_t>(n);
  const auto prec = p.config.precision;
  // The 2D view sees the bond graph only, so distances are topological even
  // when the record carries coordinates.
  moldata::Molecule graph = m;
  graph.coords.reset();
  const auto s = moldata::structure_matrices(graph);
  std::vector<double> kernel(un * un), adj(s.adjacency);
  for (std::size_t i = 0; i < kernel.size(); ++i) kernel[i] = std::exp(-s.distance[i]);
  for (std::size_t i = 0; i < un; ++i) adj[i * un + i] += 1.0;
  kernel = row_normalized(std::move(kernel), un);
  adj = row_normalized(std::move(adj), un);
  const auto w = p.mixing_weights();
  std::vector<double> mix(un * un);
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = w[1] * kernel[i] + w[2] * adj[i];
  const Tensor fixed = Tensor::from({n, n}, std::move(mix), prec);

  Tensor h = p.atom_in(Tensor::from({n, moldata::kAtomFeatureDim}, m.atom_features(masked_atom), prec));
  for (const auto& layer : p.layers) h = layer_forward(layer, h, p.config.heads, w[0], fixed, {});
  return {h, View::k2D};
}

EncoderOutput encode_3d(const moldata::Molecule& m, const EncoderParams& p, int masked_atom) {
  if (p.view != View::k3D) throw std::invalid_argument("encode_3d: parameters are for the 2D view");
  check_not_empty(m, "encode_3d");
  if (!m.coords) throw std::invalid_argument("encode_3d: molecule has no coordinates");
  const auto n = static_cast<std::int64_t>(m.atom_count());
  const auto dist = moldata::pairwise_distances(*m.coords);
  const Tensor basis = gaussian_basis(dist, p.basis_centres, p.basis_widths);  // [n*n, K]
  // Each atom also starts from its mean radial profile. Without it a molecule
  // of one element has identical rows, which attention cannot tell apart.
  std::vector<numerics::Segment> per_atom;
  for (std::int64_t i = 0; i < n; ++i) per_atom.push_back({i * n, n});
  Tensor h = add(embedding(p.element_embedding, m.element_ids(masked_atom)),
                 p.radial_in(segment_mean_rows(basis, per_atom)));
  for (const auto& layer : p.layers) {
    const Tensor bias = layer.pair_bias(basis);  // [n*n, heads]
    std::vector<Tensor> per_head;
    for (int hd = 0; hd < p.config.heads; ++hd) per_head.push_back(reshape(slice(bias, 1, hd, hd + 1), {n, n}));
    h = layer_forward(layer, h, p.config.heads, 1.0, Tensor{}, per_head);
  }
  return {h, View::k3D};
}

EncoderOutput encode(const moldata::Molecule& m, const EncoderParams& p, int masked_atom) {
  return p.view == View::k2D ? encode_2d(m, p, masked_atom) : encode_3d(m, p, masked_atom);
}

PretrainReport pretrain_toy(EncoderParams& p, std::span<const moldata::DatasetRecord> records,
                            const PretrainConfig& config) {
  if (records.empty()) throw std::invalid_argument("pretrain_toy: no records");
  Rng rng(config.seed);
  const auto prec = p.config.precision;
  Linear head = Linear::make(p.config.d_enc, moldata::kNumElements, rng, prec);
  ParameterSet params = p.parameters();
  set_requires_grad(params, true);
  p.frozen = false;
  head.collect(params, "pretrain_head");
  AdamW opt(params.trainable(), AdamWConfig{});

  // One fixed masked atom per molecule keeps the reported accuracy reproducible.
  std::vector<int> masked;
  for (const auto& r : records) masked.push_back(static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(r.molecule.atom_count()))));

  auto logits_for = [&](std::size_t i) {
    const auto& m = records[i].molecule;
    const Tensor h = encode(m, p, masked[i]).h;
    return head(reshape(mean_axis(h, 0), {1, p.config.d_enc}));
  };
  std::vector<std::size_t> order(records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  PretrainReport report;
  constexpr std::size_t kBatch = 16;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t start = 0; start < order.size(); start += kBatch) {
      const std::size_t end = std::min(order.size(), start + kBatch);
      std::vector<Tensor> rows;
      std::vector<std::int64_t> targets;
      for (std::size_t b = start; b < end; ++b) {
        const auto i = order[b];
        rows.push_back(logits_for(i));
        targets.push_back(records[i].molecule.atoms[static_cast<std::size_t>(masked[i])].element);
      }
      const Tensor loss = cross_entropy(concat(rows, 0), targets);
      opt.zero_grad();
      backward(loss);
      opt.step(config.lr);
      report.final_loss = loss.item();
    }
  }
  {
    NoGradGuard no_grad;
    int hits = 0;
    for (std::size_t i = 0; i < records.size(); ++i) {
      const Tensor out = logits_for(i);
      const auto logits = out.data();
      const auto best = std::max_element(logits.begin(), logits.end()) - logits.begin();
      if (best == records[i].molecule.atoms[static_cast<std::size_t>(masked[i])].element) ++hits;
    }
    report.accuracy = static_cast<double>(hits) / static_cast<double>(records.size());
  }
  p.freeze();
  return report;
}

}  // namespace molalign::encoders
