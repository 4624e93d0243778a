#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "molalign/numerics/rng.hpp"
#include "molalign/numerics/tensor.hpp"

// Differentiable primitives. Every function here registers a backward rule and
// reports shape errors naming itself and the offending dimensions. Matrices are
// rank-2 row-major; no broadcasting except the explicit bias-add forms.
namespace molalign::numerics {

// Value used by masked_fill ahead of a softmax.
inline constexpr double kMaskedValue = -1e9;

struct Segment {
  std::int64_t offset = 0;
  std::int64_t length = 0;
};

// Row reference into one of several source tensors (see gather_rows).
struct RowRef {
  std::int32_t source = 0;
  std::int64_t row = 0;
};

// --- linear algebra -------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);             // [m,k]·[k,n]
Tensor matmul_transposed(const Tensor& a, const Tensor& b);  // [m,k]·[n,k]^T
Tensor transpose(const Tensor& a);
// x·w + b with w [in,out] and optional bias [out].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = {});

// --- elementwise ----------------------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor add_bias(const Tensor& x, const Tensor& bias);  // [m,n] + [n]
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);  // erf form
Tensor masked_fill(const Tensor& a, std::span<const std::uint8_t> mask,
                   double value = kMaskedValue);
Tensor dropout(const Tensor& a, double p, Rng& rng, bool training = true);

// --- structure ------------------------------------------------------------
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(std::span<const Tensor> parts, int axis);
Tensor slice(const Tensor& a, int axis, std::int64_t begin, std::int64_t end);
Tensor index_rows(const Tensor& a, std::span<const std::int64_t> rows);
Tensor gather_rows(std::span<const Tensor> sources, std::span<const RowRef> rows);
Tensor embedding(const Tensor& table, std::span<const std::int64_t> ids);

// --- normalisation / reductions --------------------------------------------
Tensor softmax_rows(const Tensor& a);
Tensor row_normalize(const Tensor& a);  // each row divided by its sum
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_axis(const Tensor& a, int axis);   // rank-2 -> rank-1
Tensor mean_axis(const Tensor& a, int axis);  // rank-2 -> rank-1
Tensor max_axis(const Tensor& a, int axis);   // ties: lowest index receives the gradient
Tensor segment_mean_rows(const Tensor& a, std::span<const Segment> segments);

// --- similarity -----------------------------------------------------------
// cos(a_i, b_j) for a [m,d], b [n,d]; norms are floored at 1e-12.
Tensor cosine_similarity(const Tensor& a, const Tensor& b);
// Block reduction over a score matrix c whose rows and columns are grouped into
// segments. Result [R, C]: for block (r, c)
//   kMeanRowsOfMaxCols: mean over rows in r of max over columns in c
//   kMeanColsOfMaxRows: mean over columns in c of max over rows in r
enum class BlockReduce { kMeanRowsOfMaxCols, kMeanColsOfMaxRows };
Tensor block_max_mean(const Tensor& c, std::span<const Segment> row_segments,
                      std::span<const Segment> col_segments, BlockReduce mode);
// Result [R, cols]: max over the rows of each segment.
Tensor segment_max_rows(const Tensor& c, std::span<const Segment> row_segments);

// --- losses ---------------------------------------------------------------
inline constexpr std::int64_t kIgnoreIndex = -1;
// Mean over rows whose target != kIgnoreIndex, or the weighted sum of per-row
// negative log-likelihoods when weights is non-empty.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets,
                     std::span<const double> weights = {});
// Mean binary cross-entropy of sigmoid(logits) against targets in [0, 1].
Tensor bce_with_logits(const Tensor& logits, std::span<const double> targets);

// --- attention ------------------------------------------------------------
// Sparse attention pattern in CSR form: query row r may attend to key rows
// keys[offsets[r] .. offsets[r+1]). Keys not listed behave as if filled with
// kMaskedValue before the softmax, i.e. they receive exactly zero weight.
struct AttentionMask {
  std::vector<std::int64_t> offsets{0};
  std::vector<std::int32_t> keys;

  void add_row(std::span<const std::int32_t> row_keys);
  std::int64_t rows() const { return static_cast<std::int64_t>(offsets.size()) - 1; }
};

// Per-head attention probabilities in the same CSR layout as the mask:
// probs[h][offsets[r] + i] is the weight of row r on keys[offsets[r] + i].
struct AttentionTrace {
  AttentionMask mask;
  std::vector<std::vector<double>> probs;
};

// Multi-head scaled dot-product attention. q [Rq, d], k and v [Rk, d]; d must be
// divisible by heads. Each query row needs at least one key.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                 const AttentionMask& mask, AttentionTrace* trace = nullptr);

// exp(-((x - centre_k) / width_k)^2 / 2) for each scalar x. Result [n, K].
// Gradient flows to widths only.
Tensor gaussian_basis(std::span<const double> x, std::span<const double> centres,
                      const Tensor& widths);

}  // namespace molalign::numerics
