#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "molalign/numerics/tensor.hpp"

namespace molalign::numerics {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Ordered name -> tensor registry. Order is insertion order and is what
// optimizers, checkpoints and parameter walks iterate over.
class ParameterSet {
 public:
  void add(std::string name, Tensor t);
  const std::vector<NamedTensor>& items() const& { return items_; }
  // Called on a temporary set, hand the entries over so range-for stays safe.
  std::vector<NamedTensor> items() && { return std::move(items_); }
  std::size_t size() const { return items_.size(); }
  const Tensor* find(const std::string& name) const;
  std::vector<NamedTensor> trainable() const;
  std::int64_t count(bool trainable_only) const;
  void zero_grad();
  void clear_grad();

 private:
  std::vector<NamedTensor> items_;
};

// Linear warmup over warmup_steps followed by multiplicative decay per epoch:
//   lr(step, epoch) = base * min(1, step / warmup_steps) * decay^epoch
// step counts from 1.
struct LrSchedule {
  double base_lr = 1e-3;
  std::int64_t warmup_steps = 20;
  double decay = 0.9;

  double at(std::int64_t step, std::int64_t epoch) const;
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

class AdamW {
 public:
  AdamW(std::vector<NamedTensor> params, AdamWConfig config = {});

  // Applies one update with learning rate lr. Every parameter must carry a
  // gradient; the error lists each one that does not.
  void step(double lr);
  void zero_grad();
  std::int64_t steps_taken() const { return t_; }
  const std::vector<NamedTensor>& params() const { return params_; }

 private:
  std::vector<NamedTensor> params_;
  AdamWConfig config_;
  std::vector<std::vector<double>> m_, v_;
  std::int64_t t_ = 0;
};

}  // namespace molalign::numerics
