#pragma once

#include <string>

#include "molalign/numerics/ops.hpp"
#include "molalign/numerics/optim.hpp"
#include "molalign/numerics/rng.hpp"
#include "molalign/numerics/tensor.hpp"

namespace molalign::numerics {

Tensor normal_tensor(Shape shape, double stddev, Rng& rng, Precision p, bool requires_grad = true);

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out], may be undefined

  static Linear make(std::int64_t in, std::int64_t out, Rng& rng, Precision p, bool with_bias = true,
                     double stddev = 0.02);
  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
  void collect(ParameterSet& params, const std::string& prefix) const;
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  static LayerNorm make(std::int64_t width, Precision p);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }
  void collect(ParameterSet& params, const std::string& prefix) const;
};

// Two-layer GELU feed-forward.
struct FeedForward {
  Linear up;
  Linear down;

  static FeedForward make(std::int64_t width, std::int64_t hidden, Rng& rng, Precision p);
  Tensor operator()(const Tensor& x) const { return down(gelu(up(x))); }
  void collect(ParameterSet& params, const std::string& prefix) const;
};

void set_requires_grad(const ParameterSet& params, bool flag);

}  // namespace molalign::numerics
