#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace molalign::numerics {

// Storage precision. Values are held as doubles; a kFloat32 tensor rounds every
// stored value to the nearest IEEE binary32 after each primitive.
enum class Precision : std::uint8_t { kFloat32, kFloat64 };

using Shape = std::vector<std::int64_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class AutogradError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::int64_t numel_of(const Shape& shape);
std::string to_string(const Shape& shape);
const char* to_string(Precision p);

inline double round_to(double v, Precision p) {
  return p == Precision::kFloat32 ? static_cast<double>(static_cast<float>(v)) : v;
}

namespace detail {

struct TensorImpl;

// grad_inputs[i] is null when input i does not take part in differentiation.
using BackwardFn = std::function<void(std::span<const double> grad_out,
                                      std::span<std::vector<double>*> grad_inputs)>;

struct GradFn {
  std::string op;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;
};

struct TensorImpl {
  Shape shape;
  Precision precision = Precision::kFloat32;
  std::vector<double> data;
  std::vector<double> grad;  // empty when absent
  bool has_grad = false;
  bool requires_grad = false;
  std::shared_ptr<GradFn> grad_fn;
  std::string name;

  bool tracks_grad() const { return requires_grad || grad_fn != nullptr; }
};

}  // namespace detail

// Dense row-major tensor handle. Copies share storage; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, Precision p = Precision::kFloat32, bool requires_grad = false);
  static Tensor full(Shape shape, double value, Precision p = Precision::kFloat32,
                     bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     Precision p = Precision::kFloat32, bool requires_grad = false);
  static Tensor scalar(double value, Precision p = Precision::kFloat32);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::int64_t dim(int axis) const;
  int rank() const { return static_cast<int>(shape().size()); }
  std::int64_t numel() const;
  Precision precision() const;

  std::span<const double> data() const;
  // Direct write access, for parameter initialisation and optimizer updates.
  // The written values are not rounded; callers must respect precision().
  std::span<double> mutable_data();
  double at(std::int64_t i) const { return data()[static_cast<std::size_t>(i)]; }
  double at(std::int64_t r, std::int64_t c) const;
  double item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  bool tracks_grad() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();
  void clear_grad();

  const std::string& name() const;
  Tensor& set_name(std::string name);

  // Deep copy of values only, detached from any graph.
  Tensor clone() const;
  Tensor detach() const { return clone(); }
  // Same values converted to another precision, detached.
  Tensor to(Precision p) const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  const detail::TensorImpl& checked() const;
  detail::TensorImpl& checked();
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Graph recording switch; thread-local.
bool grad_enabled();
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// When set, dropout is the identity everywhere.
bool deterministic();
void set_deterministic(bool on);

// Builds an op result: rounds to precision and, when recording, attaches the
// backward rule. Used by the primitives; exposed for composite ops in other modules.
Tensor make_result(Shape shape, Precision precision, std::vector<double> values, std::string op,
                   std::vector<Tensor> inputs, detail::BackwardFn backward);

Precision common_precision(std::initializer_list<const Tensor*> tensors);

// Reverse-mode sweep from a scalar. Leaf gradients accumulate across calls.
void backward(const Tensor& loss);

}  // namespace molalign::numerics
