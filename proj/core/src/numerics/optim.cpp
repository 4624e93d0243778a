#include "molalign/numerics/optim.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace molalign::numerics {

void ParameterSet::add(std::string name, Tensor t) {
  if (find(name)) throw std::invalid_argument("duplicate parameter name '" + name + "'");
  t.set_name(name);
  items_.push_back({std::move(name), std::move(t)});
}

const Tensor* ParameterSet::find(const std::string& name) const {
  for (const auto& item : items_)
    if (item.name == name) return &item.tensor;
  return nullptr;
}

std::vector<NamedTensor> ParameterSet::trainable() const {
  std::vector<NamedTensor> out;
  for (const auto& item : items_)
    if (item.tensor.requires_grad()) out.push_back(item);
  return out;
}

std::int64_t ParameterSet::count(bool trainable_only) const {
  std::int64_t n = 0;
  for (const auto& item : items_)
    if (!trainable_only || item.tensor.requires_grad()) n += item.tensor.numel();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& item : items_) item.tensor.zero_grad();
}

void ParameterSet::clear_grad() {
  for (auto& item : items_) item.tensor.clear_grad();
}

double LrSchedule::at(std::int64_t step, std::int64_t epoch) const {
  double warm = 1.0;
  if (warmup_steps > 0 && step < warmup_steps) {
    warm = static_cast<double>(std::max<std::int64_t>(step, 0)) / static_cast<double>(warmup_steps);
  }
  return base_lr * warm * std::pow(decay, static_cast<double>(epoch));
}

AdamW::AdamW(std::vector<NamedTensor> params, AdamWConfig config)
    : params_(std::move(params)), config_(config) {
  for (const auto& p : params_) {
    m_.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0);
    v_.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0);
  }
}

void AdamW::step(double lr) {
  std::string missing;
  for (const auto& p : params_) {
    if (p.tensor.requires_grad() && !p.tensor.has_grad()) {
      missing += (missing.empty() ? "" : ", ") + p.name;
    }
  }
  if (!missing.empty()) {
    throw AutogradError("optimizer step: no gradient for parameter(s): " + missing);
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& t = params_[i].tensor;
    if (!t.requires_grad()) continue;
    auto data = t.mutable_data();
    const auto grad = t.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    const Precision prec = t.precision();
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = grad[j];
      m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g;
      v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g * g;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      double x = data[j];
      x -= lr * config_.weight_decay * x;
      x -= lr * mhat / (std::sqrt(vhat) + config_.eps);
      data[j] = round_to(x, prec);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

}  // namespace molalign::numerics
