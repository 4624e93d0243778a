#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace molalign::pipeline {

struct GradTermResult {
  std::string term;  // "mtc", "mtm", "mcap", "total"
  double max_rel_error = 0.0;
  std::string worst_tensor;
  double analytic = 0.0, numeric = 0.0;  // at the worst element
};

// Finite-difference check of every stage-1 loss term and their weighted sum
// on seeded 64-bit micro-batches (M in {2,3}, K <= 2, T <= 4, d = 8). The
// checked tensors cover queries, projections, shared self-attention, both
// cross-attentions, the text embedding and both heads.
std::vector<GradTermResult> gradient_suite(int batches = 10, std::uint64_t seed = 0, double step = 5e-5);

}  // namespace molalign::pipeline
