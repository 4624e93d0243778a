#include <gtest/gtest.h>

#include <Eigen/Geometry>
#include <cmath>

#include "molalign/encoders/encoders.hpp"
#include "molalign/moldata/dataset.hpp"
#include "molalign/numerics/gradcheck.hpp"
#include "molalign/numerics/ops.hpp"

using namespace molalign;
using namespace molalign::encoders;
using numerics::Precision;
using numerics::Rng;

namespace {

EncoderConfig small_config(Precision p = Precision::kFloat32) {
  EncoderConfig c;
  c.d_enc = 16;
  c.heads = 2;
  c.ffn_hidden = 24;
  c.precision = p;
  return c;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

moldata::Coords rigid_motion(const moldata::Coords& c, Rng& rng) {
  Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  q.normalize();
  const Eigen::Vector3d t(rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5));
  moldata::Coords out;
  for (const auto& p : c) {
    const Eigen::Vector3d v = q * Eigen::Vector3d(p[0], p[1], p[2]) + t;
    out.push_back({v(0), v(1), v(2)});
  }
  return out;
}

std::vector<int> random_permutation(int n, Rng& rng) {
  std::vector<int> perm(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
  rng.shuffle(std::span<int>(perm));
  return perm;
}

}  // namespace

TEST(Encoders, SingleAtom) {
  Rng rng(1);
  auto p2 = EncoderParams::make(View::k2D, small_config(), rng);
  auto p3 = EncoderParams::make(View::k3D, small_config(), rng);
  auto m = moldata::parse_smiles("C");
  m.coords = moldata::Coords{{0.3, -1.0, 2.0}};
  EXPECT_EQ(encode_2d(m, p2).h.shape(), (numerics::Shape{1, 16}));
  EXPECT_EQ(encode_3d(m, p3).h.shape(), (numerics::Shape{1, 16}));
}

TEST(Encoders, InputErrors) {
  Rng rng(1);
  auto p2 = EncoderParams::make(View::k2D, small_config(), rng);
  auto p3 = EncoderParams::make(View::k3D, small_config(), rng);
  EXPECT_THROW(encode_2d(moldata::Molecule{}, p2), std::invalid_argument);
  EXPECT_THROW(encode_3d(moldata::parse_smiles("CC"), p3), std::invalid_argument);
  EXPECT_THROW(encode_2d(moldata::parse_smiles("CC"), p3), std::invalid_argument);
}

TEST(Encoders, PermutationEquivariance) {
  Rng rng(2);
  auto p2 = EncoderParams::make(View::k2D, small_config(), rng);
  auto p3 = EncoderParams::make(View::k3D, small_config(), rng);
  const auto records = moldata::gen_synthetic(20, 4);
  for (const auto& r : records) {
    const auto perm = random_permutation(r.molecule.atom_count(), rng);
    const auto pm = r.molecule.permuted(perm);
    for (const auto* p : {&p2, &p3}) {
      const auto h = encode(r.molecule, *p).h;
      const auto hp = encode(pm, *p).h;
      const auto d = h.dim(1);
      for (std::size_t i = 0; i < perm.size(); ++i)
        for (std::int64_t c = 0; c < d; ++c)
          ASSERT_EQ(hp.at(static_cast<std::int64_t>(i), c), h.at(perm[i], c)) << to_string(p->view);
    }
  }
}

TEST(Encoders, PureAttentionMixingMatchesPlainTransformer) {
  Rng rng(3);
  auto cfg = small_config(Precision::kFloat64);
  cfg.lambda_dist = 0.0;
  cfg.lambda_graph = 0.0;
  auto p = EncoderParams::make(View::k2D, cfg, rng);
  const auto m = moldata::parse_smiles("CC(=O)Nc1ccccc1");
  const auto got = encode_2d(m, p).h;

  // Reference: fused multi-head attention over all atom pairs.
  using namespace numerics;
  const auto n = static_cast<std::int64_t>(m.atom_count());
  AttentionMask full;
  std::vector<std::int32_t> all(static_cast<std::size_t>(n));
  for (std::int32_t i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = i;
  for (std::int64_t i = 0; i < n; ++i) full.add_row(all);
  Tensor h = p.atom_in(Tensor::from({n, moldata::kAtomFeatureDim}, m.atom_features(), Precision::kFloat64));
  for (const auto& L : p.layers) {
    const Tensor a = attention(L.q(h), L.k(h), L.v(h), cfg.heads, full);
    const Tensor x = L.ln_attn(add(h, L.o(a)));
    h = L.ln_ffn(add(x, L.ffn(x)));
  }
  EXPECT_LT(max_abs_diff(got.data(), h.data()), 1e-12);
}

TEST(Encoders, DistanceAndGraphTermsChangeTheOutput) {
  Rng rng(3);
  auto p = EncoderParams::make(View::k2D, small_config(Precision::kFloat64), rng);
  auto q = p;
  q.config.lambda_dist = 0.0;
  q.config.lambda_graph = 0.0;
  const auto m = moldata::parse_smiles("CC(=O)Nc1ccccc1");
  EXPECT_GT(max_abs_diff(encode_2d(m, p).h.data(), encode_2d(m, q).h.data()), 1e-3);
  const auto w = p.mixing_weights();
  EXPECT_NEAR(w[0] + w[1] + w[2], 1.0, 1e-15);
}

TEST(Encoders, RigidMotionInvariance) {
  for (auto prec : {Precision::kFloat32, Precision::kFloat64}) {
    Rng rng(5);
    auto p = EncoderParams::make(View::k3D, small_config(prec), rng);
    const auto records = moldata::gen_synthetic(25, 9);
    double worst = 0.0;
    for (const auto& r : records) {
      const auto h = encode_3d(r.molecule, p).h;
      for (int t = 0; t < 5; ++t) {
        auto moved = r.molecule;
        moved.coords = rigid_motion(*r.molecule.coords, rng);
        worst = std::max(worst, max_abs_diff(h.data(), encode_3d(moved, p).h.data()));
      }
    }
    EXPECT_LE(worst, prec == Precision::kFloat32 ? 1e-5 : 1e-10);
  }
}

TEST(Encoders, ScalingAndSeparationChangeOutput) {
  Rng rng(6);
  auto p = EncoderParams::make(View::k3D, small_config(), rng);
  auto m = moldata::gen_synthetic(1, 3)[0].molecule;
  auto scaled = m;
  for (auto& xyz : *scaled.coords)
    for (double& v : xyz) v *= 2.0;
  EXPECT_GT(max_abs_diff(encode_3d(m, p).h.data(), encode_3d(scaled, p).h.data()), 1e-3);

  auto pair = moldata::parse_smiles("CO");
  pair.coords = moldata::Coords{{0, 0, 0}, {0, 0, 0}};
  auto apart = pair;
  apart.coords = moldata::Coords{{0, 0, 0}, {10, 0, 0}};
  EXPECT_GT(max_abs_diff(encode_3d(pair, p).h.data(), encode_3d(apart, p).h.data()), 1e-3);
}

TEST(Encoders, BasisWidthGradientMatchesFiniteDifferences) {
  Rng rng(7);
  auto cfg = small_config(Precision::kFloat64);
  cfg.d_enc = 8;
  cfg.basis_size = 4;
  cfg.layers = 1;
  auto p = EncoderParams::make(View::k3D, cfg, rng);
  const auto m = moldata::gen_synthetic(1, 5)[0].molecule;
  Tensor widths = p.basis_widths;
  // Layer-normed rows have a fixed sum of squares, so probe with a random projection.
  const auto probe = numerics::normal_tensor({m.atom_count(), 8}, 1.0, rng, Precision::kFloat64, false);
  auto f = [&] { return numerics::sum(numerics::mul(encode_3d(m, p).h, probe)); };
  EXPECT_LT(numerics::grad_check(f, widths).max_rel_error, 1e-4);
}

TEST(Encoders, FrozenParametersReceiveNoGradient) {
  Rng rng(8);
  auto p = EncoderParams::make(View::k2D, small_config(), rng);
  p.freeze();
  EXPECT_TRUE(p.frozen);
  EXPECT_EQ(p.parameters().count(true), 0);
  const auto m = moldata::parse_smiles("CCO");
  auto x = numerics::Tensor::full({1, 16}, 1.0, Precision::kFloat32, true);
  auto h = encode_2d(m, p).h;
  EXPECT_FALSE(h.tracks_grad());
  numerics::backward(numerics::sum(numerics::matmul_transposed(x, h)));
  for (const auto& item : p.parameters().items()) EXPECT_FALSE(item.tensor.has_grad()) << item.name;
}

TEST(Encoders, ToyPretrainingBeatsChance) {
  const auto records = moldata::gen_synthetic(50, 21);
  for (auto view : {View::k2D, View::k3D}) {
    Rng rng(9);
    auto p = EncoderParams::make(view, small_config(), rng);
    PretrainConfig pc;
    pc.epochs = 8;
    const auto report = pretrain_toy(p, records, pc);
    EXPECT_GT(report.accuracy, report.chance) << to_string(view);
    EXPECT_TRUE(p.frozen);
    EXPECT_EQ(p.parameters().count(true), 0);
  }
}
