#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "molalign/moldata/dataset.hpp"
#include "molalign/moldata/molecule.hpp"
#include "molalign/numerics/layers.hpp"

namespace molalign::encoders {

using numerics::Tensor;

enum class View { k2D, k3D };
const char* to_string(View v);

struct EncoderConfig {
  std::int64_t d_enc = 64;
  int layers = 2;
  int heads = 4;
  std::int64_t ffn_hidden = 128;
  // 2D mixing weights for learned attention, distance kernel and adjacency;
  // normalised to sum to one at use.
  double lambda_attn = 1.0 / 3.0;
  double lambda_dist = 1.0 / 3.0;
  double lambda_graph = 1.0 / 3.0;
  // 3D radial basis
  int basis_size = 16;
  double basis_max = 10.0;
  numerics::Precision precision = numerics::Precision::kFloat32;

  void validate() const;
};

struct EncoderOutput {
  Tensor h;  // [atoms, d_enc]
  View view = View::k2D;
};

struct EncoderLayer {
  numerics::Linear q, k, v, o;
  numerics::LayerNorm ln_attn;
  numerics::FeedForward ffn;
  numerics::LayerNorm ln_ffn;
  numerics::Linear pair_bias;  // 3D only: basis -> one bias per head
};

struct EncoderParams {
  EncoderConfig config;
  View view = View::k2D;
  numerics::Linear atom_in;   // 2D: atom features -> d_enc
  Tensor element_embedding;   // 3D: [elements + mask, d_enc]
  Tensor basis_widths;        // 3D: [basis_size], positive
  numerics::Linear radial_in; // 3D: mean radial basis per atom -> d_enc
  std::vector<double> basis_centres;
  std::vector<EncoderLayer> layers;
  bool frozen = false;

  static EncoderParams make(View view, const EncoderConfig& config, numerics::Rng& rng);
  numerics::ParameterSet parameters(const std::string& prefix = "") const;
  void freeze();
  std::array<double, 3> mixing_weights() const;  // normalised (attn, dist, graph)
};

// masked_atom >= 0 hides that atom's element (pretraining only).
EncoderOutput encode_2d(const moldata::Molecule& m, const EncoderParams& p, int masked_atom = -1);
EncoderOutput encode_3d(const moldata::Molecule& m, const EncoderParams& p, int masked_atom = -1);
EncoderOutput encode(const moldata::Molecule& m, const EncoderParams& p, int masked_atom = -1);

struct PretrainConfig {
  int epochs = 20;
  double lr = 3e-3;
  std::uint64_t seed = 0;
};

struct PretrainReport {
  double final_loss = 0.0;
  double accuracy = 0.0;  // masked-atom accuracy after training
  double chance = 1.0 / moldata::kNumElements;
};

// Masked-atom element prediction from the mean-pooled representation, with a
// throwaway linear head. The encoder is frozen afterwards.
PretrainReport pretrain_toy(EncoderParams& p, std::span<const moldata::DatasetRecord> records,
                            const PretrainConfig& config);

}  // namespace molalign::encoders
