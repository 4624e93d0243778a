#include "molalign/numerics/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace molalign::numerics {

namespace {
thread_local bool g_grad_enabled = true;
bool g_deterministic = false;

std::vector<double> rounded(std::vector<double> values, Precision p) {
  if (p == Precision::kFloat32) {
    for (double& v : values) v = round_to(v, p);
  }
  return values;
}
}  // namespace

std::int64_t numel_of(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + to_string(shape));
    n *= d;
  }
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

const char* to_string(Precision p) { return p == Precision::kFloat32 ? "f32" : "f64"; }

Tensor Tensor::zeros(Shape shape, Precision p, bool requires_grad) {
  return full(std::move(shape), 0.0, p, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, Precision p, bool requires_grad) {
  const auto n = numel_of(shape);
  return from(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), value), p,
              requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, Precision p, bool requires_grad) {
  if (numel_of(shape) != static_cast<std::int64_t>(values.size())) {
    throw ShapeError("Tensor::from: shape " + to_string(shape) + " needs " +
                     std::to_string(numel_of(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->precision = p;
  impl->data = rounded(std::move(values), p);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, Precision p) { return from({}, {value}, p); }

const detail::TensorImpl& Tensor::checked() const {
  if (!impl_) throw std::logic_error("use of undefined Tensor");
  return *impl_;
}
detail::TensorImpl& Tensor::checked() {
  if (!impl_) throw std::logic_error("use of undefined Tensor");
  return *impl_;
}

const Shape& Tensor::shape() const { return checked().shape; }
std::int64_t Tensor::dim(int axis) const {
  const auto& s = shape();
  if (axis < 0) axis += static_cast<int>(s.size());
  if (axis < 0 || axis >= static_cast<int>(s.size())) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + to_string(s));
  }
  return s[static_cast<std::size_t>(axis)];
}
std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(checked().data.size()); }
Precision Tensor::precision() const { return checked().precision; }
std::span<const double> Tensor::data() const { return checked().data; }
std::span<double> Tensor::mutable_data() { return checked().data; }

double Tensor::at(std::int64_t r, std::int64_t c) const {
  return checked().data[static_cast<std::size_t>(r * dim(1) + c)];
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return checked().data[0];
}

bool Tensor::requires_grad() const { return checked().requires_grad; }
Tensor& Tensor::set_requires_grad(bool flag) {
  checked().requires_grad = flag;
  return *this;
}
bool Tensor::tracks_grad() const { return checked().tracks_grad(); }

bool Tensor::has_grad() const { return checked().has_grad; }
std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw AutogradError("tensor '" + name() + "' has no gradient");
  return checked().grad;
}
std::span<double> Tensor::mutable_grad() {
  auto& impl = checked();
  if (!impl.has_grad) {
    impl.grad.assign(impl.data.size(), 0.0);
    impl.has_grad = true;
  }
  return impl.grad;
}
void Tensor::zero_grad() {
  auto& impl = checked();
  if (impl.has_grad) std::fill(impl.grad.begin(), impl.grad.end(), 0.0);
}
void Tensor::clear_grad() {
  auto& impl = checked();
  impl.grad.clear();
  impl.has_grad = false;
}

const std::string& Tensor::name() const { return checked().name; }
Tensor& Tensor::set_name(std::string name) {
  checked().name = std::move(name);
  return *this;
}

Tensor Tensor::clone() const {
  const auto& impl = checked();
  Tensor out = from(impl.shape, impl.data, impl.precision, false);
  out.set_name(impl.name);
  return out;
}

Tensor Tensor::to(Precision p) const {
  const auto& impl = checked();
  return from(impl.shape, impl.data, p, false);
}

bool grad_enabled() { return g_grad_enabled; }
NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool deterministic() { return g_deterministic; }
void set_deterministic(bool on) { g_deterministic = on; }

Precision common_precision(std::initializer_list<const Tensor*> tensors) {
  for (const Tensor* t : tensors) {
    if (t && t->defined() && t->precision() == Precision::kFloat64) return Precision::kFloat64;
  }
  return Precision::kFloat32;
}

Tensor make_result(Shape shape, Precision precision, std::vector<double> values, std::string op,
                   std::vector<Tensor> inputs, detail::BackwardFn backward) {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->precision = precision;
  impl->data = rounded(std::move(values), precision);
  if (numel_of(impl->shape) != static_cast<std::int64_t>(impl->data.size())) {
    throw ShapeError(op + ": result shape " + to_string(impl->shape) + " does not match " +
                     std::to_string(impl->data.size()) + " values");
  }
  if (g_grad_enabled && backward) {
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.defined() && t.tracks_grad(); });
    if (any) {
      auto fn = std::make_shared<detail::GradFn>();
      fn->op = std::move(op);
      fn->inputs.reserve(inputs.size());
      for (auto& t : inputs) fn->inputs.push_back(t.impl());
      fn->backward = std::move(backward);
      impl->grad_fn = std::move(fn);
    }
  }
  return Tensor(std::move(impl));
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw AutogradError("backward on undefined tensor");
  if (loss.numel() != 1) {
    throw AutogradError("backward requires a scalar loss, got shape " + to_string(loss.shape()));
  }
  using Impl = detail::TensorImpl;
  Impl* root = loss.impl().get();

  // Iterative post-order DFS gives a topological order (inputs before users).
  std::vector<Impl*> order;
  std::unordered_set<Impl*> visited;
  std::vector<std::pair<Impl*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (node->grad_fn && next < node->grad_fn->inputs.size()) {
      Impl* child = node->grad_fn->inputs[next++].get();
      if (child && child->tracks_grad() && visited.insert(child).second) {
        stack.emplace_back(child, 0);
      }
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  // Every node gets a per-call buffer; leaves receive theirs in one addition at
  // the end, so a repeated sweep adds exactly the same amount again.
  std::unordered_map<Impl*, std::vector<double>> buffers;
  std::vector<Impl*> leaves;
  auto buffer_for = [&](Impl* t) -> std::vector<double>* {
    if (!t->grad_fn && !t->requires_grad) return nullptr;
    auto [it, inserted] = buffers.try_emplace(t);
    if (inserted) {
      it->second.assign(t->data.size(), 0.0);
      if (!t->grad_fn) leaves.push_back(t);
    }
    return &it->second;
  };
  auto flush_leaves = [&] {
    for (Impl* leaf : leaves) {
      const auto& g = buffers[leaf];
      if (!leaf->has_grad) {
        leaf->grad.assign(leaf->data.size(), 0.0);
        leaf->has_grad = true;
      }
      for (std::size_t i = 0; i < g.size(); ++i) leaf->grad[i] += g[i];
    }
  };

  if (root->grad_fn) {
    buffers[root] = std::vector<double>(1, 1.0);
  } else if (root->requires_grad) {
    (*buffer_for(root))[0] = 1.0;
    flush_leaves();
    return;
  } else {
    throw AutogradError("backward: loss does not depend on any tensor requiring grad");
  }

  std::vector<std::vector<double>*> grad_inputs;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Impl* node = *it;
    if (!node->grad_fn) continue;
    auto found = buffers.find(node);
    if (found == buffers.end()) continue;
    const std::vector<double> grad_out = std::move(found->second);
    buffers.erase(found);
    grad_inputs.clear();
    for (auto& in : node->grad_fn->inputs) {
      grad_inputs.push_back(in && in->tracks_grad() ? buffer_for(in.get()) : nullptr);
    }
    node->grad_fn->backward(grad_out, grad_inputs);
  }
  flush_leaves();
}

}  // namespace molalign::numerics
