#include "molalign/numerics/layers.hpp"

namespace molalign::numerics {

Tensor normal_tensor(Shape shape, double stddev, Rng& rng, Precision p, bool requires_grad) {
  std::vector<double> values(static_cast<std::size_t>(numel_of(shape)));
  for (double& v : values) v = rng.normal(0.0, stddev);
  return Tensor::from(std::move(shape), std::move(values), p, requires_grad);
}

Linear Linear::make(std::int64_t in, std::int64_t out, Rng& rng, Precision p, bool with_bias,
                    double stddev) {
  Linear l;
  l.weight = normal_tensor({in, out}, stddev, rng, p);
  if (with_bias) l.bias = Tensor::zeros({out}, p, true);
  return l;
}

void Linear::collect(ParameterSet& params, const std::string& prefix) const {
  params.add(prefix + ".weight", weight);
  if (bias.defined()) params.add(prefix + ".bias", bias);
}

LayerNorm LayerNorm::make(std::int64_t width, Precision p) {
  return {Tensor::full({width}, 1.0, p, true), Tensor::zeros({width}, p, true)};
}

void LayerNorm::collect(ParameterSet& params, const std::string& prefix) const {
  params.add(prefix + ".gamma", gamma);
  params.add(prefix + ".beta", beta);
}

FeedForward FeedForward::make(std::int64_t width, std::int64_t hidden, Rng& rng, Precision p) {
  return {Linear::make(width, hidden, rng, p), Linear::make(hidden, width, rng, p)};
}

void FeedForward::collect(ParameterSet& params, const std::string& prefix) const {
  up.collect(params, prefix + ".up");
  down.collect(params, prefix + ".down");
}

void set_requires_grad(const ParameterSet& params, bool flag) {
  for (const auto& item : params.items()) {
    Tensor t = item.tensor;
    t.set_requires_grad(flag);
    if (!flag) t.clear_grad();
  }
}

}  // namespace molalign::numerics
