#include "molalign/numerics/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

namespace molalign::numerics {

namespace {

using Grads = std::span<std::vector<double>*>;
using std::size_t;

[[noreturn]] void fail(const std::string& op, const std::string& what) {
  throw ShapeError(op + ": " + what);
}

void require_rank(const Tensor& t, int rank, const std::string& op, const char* arg) {
  if (!t.defined()) fail(op, std::string(arg) + " is undefined");
  if (t.rank() != rank) {
    fail(op, std::string(arg) + " must be rank " + std::to_string(rank) + ", got shape " +
                 to_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const std::string& op) {
  if (a.shape() != b.shape()) {
    fail(op, "shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

size_t u(std::int64_t v) { return static_cast<size_t>(v); }

// Binary elementwise op with identical shapes.
template <typename Fwd, typename Bwd>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
  require_same_shape(a, b, op);
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
  return make_result(a.shape(), common_precision({&a, &b}), std::move(out), op, {a, b},
                     [a, b, bwd](std::span<const double> g, Grads gi) {
                       const auto av = a.data();
                       const auto bv = b.data();
                       for (size_t i = 0; i < g.size(); ++i) {
                         auto [da, db] = bwd(av[i], bv[i], g[i]);
                         if (gi[0]) (*gi[0])[i] += da;
                         if (gi[1]) (*gi[1])[i] += db;
                       }
                     });
}

// Unary elementwise op whose derivative is expressed via input x and output y.
template <typename Fwd, typename Deriv>
Tensor unary(const char* op, const Tensor& a, Fwd fwd, Deriv deriv) {
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
  std::vector<double> saved = out;
  return make_result(a.shape(), a.precision(), std::move(out), op, {a},
                     [a, saved = std::move(saved), deriv](std::span<const double> g, Grads gi) {
                       if (!gi[0]) return;
                       const auto av = a.data();
                       auto& ga = *gi[0];
                       for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * deriv(av[i], saved[i]);
                     });
}

// Matrix products go through Eigen. It runs single-threaded here, so results are
// reproducible run to run on one machine.
using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using Map = Eigen::Map<RowMajor>;

// out[m,n] += a[m,k] * b[k,n]
void gemm_nn(const double* a, const double* b, double* out, std::int64_t m, std::int64_t k,
             std::int64_t n) {
  Map(out, m, n).noalias() += ConstMap(a, m, k) * ConstMap(b, k, n);
}

// out[m,n] += a[m,k] * b[n,k]^T
void gemm_nt(const double* a, const double* b, double* out, std::int64_t m, std::int64_t k,
             std::int64_t n) {
  Map(out, m, n).noalias() += ConstMap(a, m, k) * ConstMap(b, n, k).transpose();
}

// out[k,n] += a[m,k]^T * b[m,n]
void gemm_tn(const double* a, const double* b, double* out, std::int64_t m, std::int64_t k,
             std::int64_t n) {
  Map(out, k, n).noalias() += ConstMap(a, m, k).transpose() * ConstMap(b, m, n);
}

void check_segments(std::span<const Segment> segs, std::int64_t extent, const std::string& op,
                    const char* what) {
  for (const auto& s : segs) {
    if (s.offset < 0 || s.length <= 0 || s.offset + s.length > extent) {
      fail(op, std::string(what) + " segment [" + std::to_string(s.offset) + ", +" +
                   std::to_string(s.length) + ") outside extent " + std::to_string(extent) +
                   " or empty");
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul", "lhs");
  require_rank(b, 2, "matmul", "rhs");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    fail("matmul", "inner dims differ: lhs " + to_string(a.shape()) + ", rhs " +
                       to_string(b.shape()));
  }
  std::vector<double> out(u(m * n), 0.0);
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return make_result({m, n}, common_precision({&a, &b}), std::move(out), "matmul", {a, b},
                     [a, b, m, k, n](std::span<const double> g, Grads gi) {
                       if (gi[0]) gemm_nt(g.data(), b.data().data(), gi[0]->data(), m, n, k);
                       if (gi[1]) gemm_tn(a.data().data(), g.data(), gi[1]->data(), m, k, n);
                     });
}

Tensor matmul_transposed(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_transposed", "lhs");
  require_rank(b, 2, "matmul_transposed", "rhs");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    fail("matmul_transposed", "feature dims differ: lhs " + to_string(a.shape()) + ", rhs " +
                                  to_string(b.shape()));
  }
  std::vector<double> out(u(m * n), 0.0);
  gemm_nt(a.data().data(), b.data().data(), out.data(), m, k, n);
  return make_result({m, n}, common_precision({&a, &b}), std::move(out), "matmul_transposed",
                     {a, b}, [a, b, m, k, n](std::span<const double> g, Grads gi) {
                       // dA = G·B, dB = G^T·A
                       if (gi[0]) gemm_nn(g.data(), b.data().data(), gi[0]->data(), m, n, k);
                       if (gi[1]) gemm_tn(g.data(), a.data().data(), gi[1]->data(), m, n, k);
                     });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose", "input");
  const auto m = a.dim(0), n = a.dim(1);
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) out[u(j * m + i)] = av[u(i * n + j)];
  return make_result({n, m}, a.precision(), std::move(out), "transpose", {a},
                     [m, n](std::span<const double> g, Grads gi) {
                       if (!gi[0]) return;
                       auto& ga = *gi[0];
                       for (std::int64_t i = 0; i < m; ++i)
                         for (std::int64_t j = 0; j < n; ++j) ga[u(i * n + j)] += g[u(j * m + i)];
                     });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_rank(x, 2, "linear", "input");
  require_rank(w, 2, "linear", "weight");
  const auto m = x.dim(0), k = x.dim(1), n = w.dim(1);
  if (w.dim(0) != k) {
    fail("linear", "input " + to_string(x.shape()) + " does not match weight " +
                       to_string(w.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != n)) {
    fail("linear", "bias " + to_string(bias.shape()) + " does not match weight " +
                       to_string(w.shape()));
  }
  std::vector<double> out(u(m * n), 0.0);
  if (has_bias) {
    const auto bv = bias.data();
    for (std::int64_t i = 0; i < m; ++i) std::copy(bv.begin(), bv.end(), out.begin() + i * n);
  }
  gemm_nn(x.data().data(), w.data().data(), out.data(), m, k, n);
  return make_result({m, n}, common_precision({&x, &w, &bias}), std::move(out), "linear",
                     {x, w, bias}, [x, w, m, k, n](std::span<const double> g, Grads gi) {
                       if (gi[0]) gemm_nt(g.data(), w.data().data(), gi[0]->data(), m, n, k);
                       if (gi[1]) gemm_tn(x.data().data(), g.data(), gi[1]->data(), m, k, n);
                       if (gi.size() > 2 && gi[2]) {
                         auto& gb = *gi[2];
                         for (std::int64_t i = 0; i < m; ++i)
                           for (std::int64_t j = 0; j < n; ++j) gb[u(j)] += g[u(i * n + j)];
                       }
                     });
}

// ---------------------------------------------------------------------------
// elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double g) { return std::pair{g, g}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double g) { return std::pair{g, -g}; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double g) { return std::pair{g * y, g * x}; });
}

Tensor scale(const Tensor& a, double s) {
  return unary(
      "scale", a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(
      "add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_rank(x, 2, "add_bias", "input");
  require_rank(bias, 1, "add_bias", "bias");
  const auto m = x.dim(0), n = x.dim(1);
  if (bias.dim(0) != n) {
    fail("add_bias", "bias " + to_string(bias.shape()) + " vs input " + to_string(x.shape()));
  }
  const auto xv = x.data();
  const auto bv = bias.data();
  std::vector<double> out(xv.size());
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) out[u(i * n + j)] = xv[u(i * n + j)] + bv[u(j)];
  return make_result(x.shape(), common_precision({&x, &bias}), std::move(out), "add_bias",
                     {x, bias}, [m, n](std::span<const double> g, Grads gi) {
                       if (gi[0])
                         for (size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
                       if (gi[1])
                         for (std::int64_t i = 0; i < m; ++i)
                           for (std::int64_t j = 0; j < n; ++j) (*gi[1])[u(j)] += g[u(i * n + j)];
                     });
}

Tensor exp(const Tensor& a) {
  return unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  for (double v : a.data()) {
    if (!(v > 0.0)) fail("log", "non-positive input " + std::to_string(v));
  }
  return unary(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      "sigmoid", a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& a) {
  return unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary(
      "gelu", a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x, double) {
        return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
      });
}

Tensor masked_fill(const Tensor& a, std::span<const std::uint8_t> mask, double value) {
  if (static_cast<std::int64_t>(mask.size()) != a.numel()) {
    fail("masked_fill", "mask has " + std::to_string(mask.size()) + " entries for input " +
                            to_string(a.shape()));
  }
  const auto av = a.data();
  std::vector<double> out(av.begin(), av.end());
  for (size_t i = 0; i < out.size(); ++i)
    if (mask[i]) out[i] = value;
  std::vector<std::uint8_t> keep(mask.begin(), mask.end());
  return make_result(a.shape(), a.precision(), std::move(out), "masked_fill", {a},
                     [keep = std::move(keep)](std::span<const double> g, Grads gi) {
                       if (!gi[0]) return;
                       for (size_t i = 0; i < g.size(); ++i)
                         if (!keep[i]) (*gi[0])[i] += g[i];
                     });
}

Tensor dropout(const Tensor& a, double p, Rng& rng, bool training) {
  if (p < 0.0 || p >= 1.0) fail("dropout", "probability " + std::to_string(p) + " not in [0,1)");
  if (!training || p == 0.0 || deterministic()) return a;
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> factor(u(a.numel()));
  for (double& f : factor) f = rng.uniform() < p ? 0.0 : keep_scale;
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor[i];
  return make_result(a.shape(), a.precision(), std::move(out), "dropout", {a},
                     [factor = std::move(factor)](std::span<const double> g, Grads gi) {
                       if (!gi[0]) return;
                       for (size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * factor[i];
                     });
}

// ---------------------------------------------------------------------------
// structure

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel_of(shape) != a.numel()) {
    fail("reshape", "cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result(std::move(shape), a.precision(), std::move(out), "reshape", {a},
                     [](std::span<const double> g, Grads gi) {
                       if (!gi[0]) return;
                       for (size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
                     });
}

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) fail("concat", "no inputs");
  const int rank = parts[0].rank();
  if (rank != 1 && rank != 2) fail("concat", "rank must be 1 or 2, got " + to_string(parts[0].shape()));
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) fail("concat", "axis out of range");
  Precision prec = Precision::kFloat32;
  std::int64_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != rank) fail("concat", "rank mismatch " + to_string(p.shape()));
    if (rank == 2 && p.dim(1 - axis) != parts[0].dim(1 - axis)) {
      fail("concat", "non-concat dim mismatch " + to_string(p.shape()) + " vs " +
                         to_string(parts[0].shape()));
    }
    total += p.dim(axis);
    if (p.precision() == Precision::kFloat64) prec = Precision::kFloat64;
  }
  Shape shape = parts[0].shape();
  shape[u(axis)] = total;
  std::vector<double> out;
  out.reserve(u(numel_of(shape)));
  std::vector<std::int64_t> widths;
  if (rank == 1 || axis == 0) {
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  } else {
    const auto rows = parts[0].dim(0);
    for (std::int64_t r = 0; r < rows; ++r)
      for (const auto& p : parts) {
        const auto w = p.dim(1);
        auto d = p.data().subspan(u(r * w), u(w));
        out.insert(out.end(), d.begin(), d.end());
      }
  }
  std::vector<size_t> sizes;
  for (const auto& p : parts) {
    widths.push_back(p.dim(axis));
    sizes.push_back(u(p.numel()));
  }
  const bool by_rows = rank == 1 || axis == 0;
  const std::int64_t rows = rank == 2 ? parts[0].dim(0) : 1;
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return make_result(std::move(shape), prec, std::move(out), "concat", std::move(inputs),
                     [widths, sizes, by_rows, rows, total](std::span<const double> g, Grads gi) {
                       if (by_rows) {
                         size_t off = 0;
                         for (size_t i = 0; i < gi.size(); ++i) {
                           if (gi[i])
                             for (size_t j = 0; j < sizes[i]; ++j) (*gi[i])[j] += g[off + j];
                           off += sizes[i];
                         }
                         return;
                       }
                       std::int64_t col = 0;
                       for (size_t i = 0; i < gi.size(); ++i) {
                         const auto w = widths[i];
                         if (gi[i])
                           for (std::int64_t r = 0; r < rows; ++r)
                             for (std::int64_t c = 0; c < w; ++c)
                               (*gi[i])[u(r * w + c)] += g[u(r * total + col + c)];
                         col += w;
                       }
                     });
}

Tensor slice(const Tensor& a, int axis, std::int64_t begin, std::int64_t end) {
  const int rank = a.rank();
  if (rank != 1 && rank != 2) fail("slice", "rank must be 1 or 2, got " + to_string(a.shape()));
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) fail("slice", "axis out of range");
  const auto extent = a.dim(axis);
  if (begin < 0 || end > extent || begin > end) {
    fail("slice", "range [" + std::to_string(begin) + "," + std::to_string(end) +
                      ") invalid for axis " + std::to_string(axis) + " of " + to_string(a.shape()));
  }
  Shape shape = a.shape();
  shape[u(axis)] = end - begin;
  const auto av = a.data();
  std::vector<double> out;
  out.reserve(u(numel_of(shape)));
  const std::int64_t rows = rank == 2 ? a.dim(0) : 1;
  const std::int64_t cols = rank == 2 ? a.dim(1) : a.dim(0);
  const bool by_rows = rank == 2 && axis == 0;
  if (by_rows) {
    out.assign(av.begin() + begin * cols, av.begin() + end * cols);
  } else {
    for (std::int64_t r = 0; r < rows; ++r)
      out.insert(out.end(), av.begin() + r * cols + begin, av.begin() + r * cols + end);
  }
  return make_result(std::move(shape), a.precision(), std::move(out), "slice", {a},
                     [by_rows, rows, cols, begin, end](std::span<const double> g, Grads gi) {
                       if (!gi[0]) return;
                       auto& ga = *gi[0];
                       if (by_rows) {
                         for (size_t i = 0; i < g.size(); ++i) ga[u(begin * cols) + i] += g[i];
                         return;
                       }
                       const auto w = end - begin;
                       for (std::int64_t r = 0; r < rows; ++r)
                         for (std::int64_t c = 0; c < w; ++c)
                           ga[u(r * cols + begin + c)] += g[u(r * w + c)];
                     });
}

Tensor index_rows(const Tensor& a, std::span<const std::int64_t> rows) {
  require_rank(a, 2, "index_rows", "input");
  std::vector<RowRef> refs;
  refs.reserve(rows.size());
  for (auto r : rows) refs.push_back({0, r});
  const Tensor src[] = {a};
  return gather_rows(src, refs);
}

Tensor gather_rows(std::span<const Tensor> sources, std::span<const RowRef> rows) {
  if (sources.empty()) fail("gather_rows", "no sources");
  const auto cols = sources[0].dim(1);
  Precision prec = Precision::kFloat32;
  for (const auto& s : sources) {
    require_rank(s, 2, "gather_rows", "source");
    if (s.dim(1) != cols) {
      fail("gather_rows", "column mismatch " + to_string(s.shape()) + " vs " +
                              to_string(sources[0].shape()));
    }
    if (s.precision() == Precision::kFloat64) prec = Precision::kFloat64;
  }
  std::vector<double> out;
  out.reserve(rows.size() * u(cols));
  for (const auto& r : rows) {
    if (r.source < 0 || static_cast<size_t>(r.source) >= sources.size()) {
      fail("gather_rows", "source index " + std::to_string(r.source) + " out of range");
    }
    const auto& s = sources[u(r.source)];
    if (r.row < 0 || r.row >= s.dim(0)) {
      fail("gather_rows", "row " + std::to_string(r.row) + " out of range for " +
                              to_string(s.shape()));
    }
    auto d = s.data().subspan(u(r.row * cols), u(cols));
    out.insert(out.end(), d.begin(), d.end());
  }
  std::vector<RowRef> refs(rows.begin(), rows.end());
  std::vector<Tensor> inputs(sources.begin(), sources.end());
  return make_result({static_cast<std::int64_t>(rows.size()), cols}, prec, std::move(out),
                     "gather_rows", std::move(inputs),
                     [refs = std::move(refs), cols](std::span<const double> g, Grads gi) {
                       for (size_t i = 0; i < refs.size(); ++i) {
                         auto* dst = gi[u(refs[i].source)];
                         if (!dst) continue;
                         for (std::int64_t c = 0; c < cols; ++c)
                           (*dst)[u(refs[i].row * cols + c)] += g[i * u(cols) + u(c)];
                       }
                     });
}

Tensor embedding(const Tensor& table, std::span<const std::int64_t> ids) {
  require_rank(table, 2, "embedding", "table");
  for (auto id : ids) {
    if (id < 0 || id >= table.dim(0)) {
      fail("embedding", "id " + std::to_string(id) + " outside table of " +
                            std::to_string(table.dim(0)) + " rows");
    }
  }
  return index_rows(table, ids);
}

// ---------------------------------------------------------------------------
// normalisation / reductions

namespace {
struct RowView {
  std::int64_t rows;
  std::int64_t cols;
};
RowView as_rows(const Tensor& a, const char* op) {
  if (a.rank() == 1) return {1, a.dim(0)};
  if (a.rank() == 2) return {a.dim(0), a.dim(1)};
  fail(op, "rank must be 1 or 2, got " + to_string(a.shape()));
}
}  // namespace

Tensor softmax_rows(const Tensor& a) {
  const auto [rows, cols] = as_rows(a, "softmax_rows");
  if (cols == 0) fail("softmax_rows", "empty rows");
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * cols;
    double* y = out.data() + r * cols;
    const double mx = *std::max_element(x, x + cols);
    double z = 0.0;
    for (std::int64_t c = 0; c < cols; ++c) z += (y[c] = std::exp(x[c] - mx));
    for (std::int64_t c = 0; c < cols; ++c) y[c] /= z;
  }
  std::vector<double> probs = out;
  return make_result(a.shape(), a.precision(), std::move(out), "softmax_rows", {a},
                     [probs = std::move(probs), rows, cols](std::span<const double> g, Grads gi) {
                       if (!gi[0]) return;
                       auto& ga = *gi[0];
                       for (std::int64_t r = 0; r < rows; ++r) {
                         const double* p = probs.data() + r * cols;
                         const double* gr = g.data() + r * cols;
                         double dot = 0.0;
                         for (std::int64_t c = 0; c < cols; ++c) dot += gr[c] * p[c];
                         for (std::int64_t c = 0; c < cols; ++c)
                           ga[u(r * cols + c)] += p[c] * (gr[c] - dot);
                       }
                     });
}

Tensor row_normalize(const Tensor& a) {
  const auto [rows, cols] = as_rows(a, "row_normalize");
  const auto av = a.data();
  std::vector<double> out(av.size());
  std::vector<double> sums(u(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::int64_t c = 0; c < cols; ++c) s += av[u(r * cols + c)];
    if (s == 0.0) fail("row_normalize", "row " + std::to_string(r) + " sums to zero");
    sums[u(r)] = s;
    for (std::int64_t c = 0; c < cols; ++c) out[u(r * cols + c)] = av[u(r * cols + c)] / s;
  }
  std::vector<double> y = out;
  return make_result(a.shape(), a.precision(), std::move(out), "row_normalize", {a},
                     [y = std::move(y), sums = std::move(sums), rows, cols](
                         std::span<const double> g, Grads gi) {
                       if (!gi[0]) return;
                       for (std::int64_t r = 0; r < rows; ++r) {
                         double dot = 0.0;
                         for (std::int64_t c = 0; c < cols; ++c)
                           dot += g[u(r * cols + c)] * y[u(r * cols + c)];
                         for (std::int64_t c = 0; c < cols; ++c)
                           (*gi[0])[u(r * cols + c)] += (g[u(r * cols + c)] - dot) / sums[u(r)];
                       }
                     });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_rank(x, 2, "layer_norm", "input");
  require_rank(gamma, 1, "layer_norm", "gamma");
  require_rank(beta, 1, "layer_norm", "beta");
  const auto rows = x.dim(0), cols = x.dim(1);
  if (gamma.dim(0) != cols || beta.dim(0) != cols) {
    fail("layer_norm", "affine params " + to_string(gamma.shape()) + "/" +
                           to_string(beta.shape()) + " vs input " + to_string(x.shape()));
  }
  const auto xv = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  std::vector<double> out(xv.size());
  std::vector<double> xhat(xv.size());
  std::vector<double> inv_std(u(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * cols;
    double mu = 0.0;
    for (std::int64_t c = 0; c < cols; ++c) mu += xr[c];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::int64_t c = 0; c < cols; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(cols);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[u(r)] = is;
    for (std::int64_t c = 0; c < cols; ++c) {
      const double h = (xr[c] - mu) * is;
      xhat[u(r * cols + c)] = h;
      out[u(r * cols + c)] = h * gv[u(c)] + bv[u(c)];
    }
  }
  return make_result(
      x.shape(), common_precision({&x, &gamma, &beta}), std::move(out), "layer_norm",
      {x, gamma, beta},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), gamma, rows, cols](
          std::span<const double> g, Grads gi) {
        const auto gv = gamma.data();
        std::vector<double> dxhat(u(cols));
        for (std::int64_t r = 0; r < rows; ++r) {
          const double* gr = g.data() + r * cols;
          const double* hr = xhat.data() + r * cols;
          if (gi[1])
            for (std::int64_t c = 0; c < cols; ++c) (*gi[1])[u(c)] += gr[c] * hr[c];
          if (gi[2])
            for (std::int64_t c = 0; c < cols; ++c) (*gi[2])[u(c)] += gr[c];
          if (!gi[0]) continue;
          double mean_d = 0.0, mean_dh = 0.0;
          for (std::int64_t c = 0; c < cols; ++c) {
            dxhat[u(c)] = gr[c] * gv[u(c)];
            mean_d += dxhat[u(c)];
            mean_dh += dxhat[u(c)] * hr[c];
          }
          mean_d /= static_cast<double>(cols);
          mean_dh /= static_cast<double>(cols);
          for (std::int64_t c = 0; c < cols; ++c)
            (*gi[0])[u(r * cols + c)] += inv_std[u(r)] * (dxhat[u(c)] - mean_d - hr[c] * mean_dh);
        }
      });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_result({}, a.precision(), {s}, "sum", {a},
                     [](std::span<const double> g, Grads gi) {
                       if (!gi[0]) return;
                       for (double& v : *gi[0]) v += g[0];
                     });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) fail("mean", "empty input");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

namespace {
Tensor reduce_axis(const Tensor& a, int axis, bool average, const char* op) {
  require_rank(a, 2, op, "input");
  if (axis < 0) axis += 2;
  if (axis != 0 && axis != 1) fail(op, "axis must be 0 or 1");
  const auto rows = a.dim(0), cols = a.dim(1);
  const auto n_out = axis == 0 ? cols : rows;
  const auto n_red = axis == 0 ? rows : cols;
  if (n_red == 0) fail(op, "reducing an empty axis");
  const double f = average ? 1.0 / static_cast<double>(n_red) : 1.0;
  const auto av = a.data();
  std::vector<double> out(u(n_out), 0.0);
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t c = 0; c < cols; ++c) out[u(axis == 0 ? c : r)] += av[u(r * cols + c)];
  for (double& v : out) v *= f;
  return make_result({n_out}, a.precision(), std::move(out), op, {a},
                     [axis, rows, cols, f](std::span<const double> g, Grads gi) {
                       if (!gi[0]) return;
                       for (std::int64_t r = 0; r < rows; ++r)
                         for (std::int64_t c = 0; c < cols; ++c)
                           (*gi[0])[u(r * cols + c)] += f * g[u(axis == 0 ? c : r)];
                     });
}
}  // namespace

Tensor sum_axis(const Tensor& a, int axis) { return reduce_axis(a, axis, false, "sum_axis"); }
Tensor mean_axis(const Tensor& a, int axis) { return reduce_axis(a, axis, true, "mean_axis"); }

Tensor max_axis(const Tensor& a, int axis) {
  require_rank(a, 2, "max_axis", "input");
  if (axis < 0) axis += 2;
  if (axis != 0 && axis != 1) fail("max_axis", "axis must be 0 or 1");
  const auto rows = a.dim(0), cols = a.dim(1);
  const auto n_out = axis == 0 ? cols : rows;
  const auto n_red = axis == 0 ? rows : cols;
  if (n_red == 0) fail("max_axis", "reducing an empty axis");
  const auto av = a.data();
  std::vector<double> out(u(n_out));
  std::vector<std::int64_t> arg(u(n_out));
  for (std::int64_t o = 0; o < n_out; ++o) {
    double best = -std::numeric_limits<double>::infinity();
    std::int64_t bi = -1;
    for (std::int64_t i = 0; i < n_red; ++i) {
      const auto idx = axis == 0 ? i * cols + o : o * cols + i;
      if (bi < 0 || av[u(idx)] > best) {
        best = av[u(idx)];
        bi = idx;
      }
    }
    out[u(o)] = best;
    arg[u(o)] = bi;
  }
  return make_result({n_out}, a.precision(), std::move(out), "max_axis", {a},
                     [arg = std::move(arg)](std::span<const double> g, Grads gi) {
                       if (!gi[0]) return;
                       for (size_t o = 0; o < arg.size(); ++o) (*gi[0])[u(arg[o])] += g[o];
                     });
}

Tensor segment_mean_rows(const Tensor& a, std::span<const Segment> segments) {
  require_rank(a, 2, "segment_mean_rows", "input");
  check_segments(segments, a.dim(0), "segment_mean_rows", "row");
  const auto cols = a.dim(1);
  const auto av = a.data();
  std::vector<double> out(segments.size() * u(cols), 0.0);
  for (size_t s = 0; s < segments.size(); ++s) {
    const auto& seg = segments[s];
    for (std::int64_t r = seg.offset; r < seg.offset + seg.length; ++r)
      for (std::int64_t c = 0; c < cols; ++c) out[s * u(cols) + u(c)] += av[u(r * cols + c)];
    for (std::int64_t c = 0; c < cols; ++c)
      out[s * u(cols) + u(c)] /= static_cast<double>(seg.length);
  }
  std::vector<Segment> segs(segments.begin(), segments.end());
  return make_result({static_cast<std::int64_t>(segments.size()), cols}, a.precision(),
                     std::move(out), "segment_mean_rows", {a},
                     [segs = std::move(segs), cols](std::span<const double> g, Grads gi) {
                       if (!gi[0]) return;
                       for (size_t s = 0; s < segs.size(); ++s) {
                         const double f = 1.0 / static_cast<double>(segs[s].length);
                         for (std::int64_t r = segs[s].offset; r < segs[s].offset + segs[s].length; ++r)
                           for (std::int64_t c = 0; c < cols; ++c)
                             (*gi[0])[u(r * cols + c)] += f * g[s * u(cols) + u(c)];
                       }
                     });
}

// ---------------------------------------------------------------------------
// similarity

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "cosine_similarity", "lhs");
  require_rank(b, 2, "cosine_similarity", "rhs");
  const auto m = a.dim(0), n = b.dim(0), d = a.dim(1);
  if (b.dim(1) != d) {
    fail("cosine_similarity", "feature dims differ: " + to_string(a.shape()) + " vs " +
                                  to_string(b.shape()));
  }
  auto normalise = [d](std::span<const double> v, std::int64_t rows, std::vector<double>& unit,
                       std::vector<double>& norms) {
    unit.resize(v.size());
    norms.resize(u(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::int64_t c = 0; c < d; ++c) s += v[u(r * d + c)] * v[u(r * d + c)];
      const double nr = std::max(std::sqrt(s), 1e-12);
      norms[u(r)] = nr;
      for (std::int64_t c = 0; c < d; ++c) unit[u(r * d + c)] = v[u(r * d + c)] / nr;
    }
  };
  std::vector<double> ua, na, ub, nb;
  normalise(a.data(), m, ua, na);
  normalise(b.data(), n, ub, nb);
  // Plain in-order dot products keep the forward value bit-reproducible by any
  // straightforward reference loop.
  std::vector<double> out(u(m * n), 0.0);
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::int64_t c = 0; c < d; ++c) s += ua[u(i * d + c)] * ub[u(j * d + c)];
      out[u(i * n + j)] = std::clamp(s, -1.0, 1.0);
    }
  return make_result(
      {m, n}, common_precision({&a, &b}), std::move(out), "cosine_similarity", {a, b},
      [ua = std::move(ua), na = std::move(na), ub = std::move(ub), nb = std::move(nb), m, n, d](
          std::span<const double> g, Grads gi) {
        // d unit_a = G·unit_b ; da = (d unit_a - unit_a <unit_a, d unit_a>) / |a|
        auto project = [d](const std::vector<double>& unit, const std::vector<double>& norms,
                           std::vector<double>& du, std::int64_t rows, std::vector<double>& dst) {
          for (std::int64_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::int64_t c = 0; c < d; ++c) dot += unit[u(r * d + c)] * du[u(r * d + c)];
            for (std::int64_t c = 0; c < d; ++c)
              dst[u(r * d + c)] += (du[u(r * d + c)] - unit[u(r * d + c)] * dot) / norms[u(r)];
          }
        };
        if (gi[0]) {
          std::vector<double> du(u(m * d), 0.0);
          gemm_nn(g.data(), ub.data(), du.data(), m, n, d);
          project(ua, na, du, m, *gi[0]);
        }
        if (gi[1]) {
          std::vector<double> du(u(n * d), 0.0);
          gemm_tn(g.data(), ua.data(), du.data(), m, n, d);
          project(ub, nb, du, n, *gi[1]);
        }
      });
}

Tensor block_max_mean(const Tensor& c, std::span<const Segment> row_segments,
                      std::span<const Segment> col_segments, BlockReduce mode) {
  require_rank(c, 2, "block_max_mean", "scores");
  check_segments(row_segments, c.dim(0), "block_max_mean", "row");
  check_segments(col_segments, c.dim(1), "block_max_mean", "column");
  const auto cols = c.dim(1);
  const auto cv = c.data();
  const auto R = static_cast<std::int64_t>(row_segments.size());
  const auto C = static_cast<std::int64_t>(col_segments.size());
  std::vector<double> out(u(R * C), 0.0);
  // For every output cell, the flat indices of the selected maxima.
  std::vector<std::vector<std::int64_t>> picks(u(R * C));
  for (std::int64_t rs = 0; rs < R; ++rs) {
    const auto& rseg = row_segments[u(rs)];
    for (std::int64_t cs = 0; cs < C; ++cs) {
      const auto& cseg = col_segments[u(cs)];
      auto& pick = picks[u(rs * C + cs)];
      double acc = 0.0;
      if (mode == BlockReduce::kMeanRowsOfMaxCols) {
        for (std::int64_t r = rseg.offset; r < rseg.offset + rseg.length; ++r) {
          std::int64_t best = r * cols + cseg.offset;
          for (std::int64_t k = cseg.offset + 1; k < cseg.offset + cseg.length; ++k)
            if (cv[u(r * cols + k)] > cv[u(best)]) best = r * cols + k;
          acc += cv[u(best)];
          pick.push_back(best);
        }
        out[u(rs * C + cs)] = acc / static_cast<double>(rseg.length);
      } else {
        for (std::int64_t k = cseg.offset; k < cseg.offset + cseg.length; ++k) {
          std::int64_t best = rseg.offset * cols + k;
          for (std::int64_t r = rseg.offset + 1; r < rseg.offset + rseg.length; ++r)
            if (cv[u(r * cols + k)] > cv[u(best)]) best = r * cols + k;
          acc += cv[u(best)];
          pick.push_back(best);
        }
        out[u(rs * C + cs)] = acc / static_cast<double>(cseg.length);
      }
    }
  }
  return make_result({R, C}, c.precision(), std::move(out), "block_max_mean", {c},
                     [picks = std::move(picks)](std::span<const double> g, Grads gi) {
                       if (!gi[0]) return;
                       for (size_t o = 0; o < picks.size(); ++o) {
                         const double f = g[o] / static_cast<double>(picks[o].size());
                         for (auto idx : picks[o]) (*gi[0])[u(idx)] += f;
                       }
                     });
}

Tensor segment_max_rows(const Tensor& c, std::span<const Segment> row_segments) {
  require_rank(c, 2, "segment_max_rows", "scores");
  check_segments(row_segments, c.dim(0), "segment_max_rows", "row");
  const auto cols = c.dim(1);
  const auto cv = c.data();
  const auto R = static_cast<std::int64_t>(row_segments.size());
  std::vector<double> out(u(R * cols));
  std::vector<std::int64_t> arg(u(R * cols));
  for (std::int64_t s = 0; s < R; ++s) {
    const auto& seg = row_segments[u(s)];
    for (std::int64_t k = 0; k < cols; ++k) {
      std::int64_t best = seg.offset * cols + k;
      for (std::int64_t r = seg.offset + 1; r < seg.offset + seg.length; ++r)
        if (cv[u(r * cols + k)] > cv[u(best)]) best = r * cols + k;
      out[u(s * cols + k)] = cv[u(best)];
      arg[u(s * cols + k)] = best;
    }
  }
  return make_result({R, cols}, c.precision(), std::move(out), "segment_max_rows", {c},
                     [arg = std::move(arg)](std::span<const double> g, Grads gi) {
                       if (!gi[0]) return;
                       for (size_t o = 0; o < arg.size(); ++o) (*gi[0])[u(arg[o])] += g[o];
                     });
}

// ---------------------------------------------------------------------------
// losses

Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets,
                     std::span<const double> weights) {
  require_rank(logits, 2, "cross_entropy", "logits");
  const auto rows = logits.dim(0), classes = logits.dim(1);
  if (static_cast<std::int64_t>(targets.size()) != rows) {
    fail("cross_entropy", std::to_string(targets.size()) + " targets for logits " +
                              to_string(logits.shape()));
  }
  if (!weights.empty() && weights.size() != targets.size()) {
    fail("cross_entropy", "weights/targets length mismatch");
  }
  std::vector<double> w(u(rows), 0.0);
  std::int64_t valid = 0;
  for (std::int64_t r = 0; r < rows; ++r) {
    const auto t = targets[u(r)];
    if (t == kIgnoreIndex) continue;
    if (t < 0 || t >= classes) {
      fail("cross_entropy", "target " + std::to_string(t) + " outside " +
                                std::to_string(classes) + " classes");
    }
    ++valid;
  }
  if (weights.empty()) {
    if (valid == 0) fail("cross_entropy", "no valid targets");
    for (std::int64_t r = 0; r < rows; ++r)
      if (targets[u(r)] != kIgnoreIndex) w[u(r)] = 1.0 / static_cast<double>(valid);
  } else {
    for (std::int64_t r = 0; r < rows; ++r)
      if (targets[u(r)] != kIgnoreIndex) w[u(r)] = weights[u(r)];
  }
  const auto lv = logits.data();
  std::vector<double> probs(lv.size(), 0.0);
  double loss = 0.0;
  for (std::int64_t r = 0; r < rows; ++r) {
    if (w[u(r)] == 0.0) continue;
    const double* x = lv.data() + r * classes;
    const double mx = *std::max_element(x, x + classes);
    double z = 0.0;
    for (std::int64_t c = 0; c < classes; ++c) z += std::exp(x[c] - mx);
    const double lse = mx + std::log(z);
    for (std::int64_t c = 0; c < classes; ++c) probs[u(r * classes + c)] = std::exp(x[c] - lse);
    loss += w[u(r)] * (lse - x[targets[u(r)]]);
  }
  std::vector<std::int64_t> tg(targets.begin(), targets.end());
  return make_result({}, logits.precision(), {loss}, "cross_entropy", {logits},
                     [probs = std::move(probs), w = std::move(w), tg = std::move(tg), rows,
                      classes](std::span<const double> g, Grads gi) {
                       if (!gi[0]) return;
                       for (std::int64_t r = 0; r < rows; ++r) {
                         if (w[u(r)] == 0.0) continue;
                         const double f = g[0] * w[u(r)];
                         for (std::int64_t c = 0; c < classes; ++c)
                           (*gi[0])[u(r * classes + c)] += f * probs[u(r * classes + c)];
                         (*gi[0])[u(r * classes + tg[u(r)])] -= f;
                       }
                     });
}

Tensor bce_with_logits(const Tensor& logits, std::span<const double> targets) {
  if (logits.numel() != static_cast<std::int64_t>(targets.size()) || targets.empty()) {
    fail("bce_with_logits", std::to_string(targets.size()) + " targets for logits " +
                                to_string(logits.shape()));
  }
  const auto zv = logits.data();
  const double n = static_cast<double>(targets.size());
  double loss = 0.0;
  for (size_t i = 0; i < targets.size(); ++i) {
    const double z = zv[i];
    loss += std::max(z, 0.0) - z * targets[i] + std::log1p(std::exp(-std::abs(z)));
  }
  std::vector<double> y(targets.begin(), targets.end());
  return make_result({}, logits.precision(), {loss / n}, "bce_with_logits", {logits},
                     [logits, y = std::move(y), n](std::span<const double> g, Grads gi) {
                       if (!gi[0]) return;
                       const auto zv = logits.data();
                       for (size_t i = 0; i < y.size(); ++i) {
                         const double z = zv[i];
                         const double s = z >= 0 ? 1.0 / (1.0 + std::exp(-z))
                                                 : std::exp(z) / (1.0 + std::exp(z));
                         (*gi[0])[i] += g[0] * (s - y[i]) / n;
                       }
                     });
}

// ---------------------------------------------------------------------------
// attention

void AttentionMask::add_row(std::span<const std::int32_t> row_keys) {
  keys.insert(keys.end(), row_keys.begin(), row_keys.end());
  offsets.push_back(static_cast<std::int64_t>(keys.size()));
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                 const AttentionMask& mask, AttentionTrace* trace) {
  require_rank(q, 2, "attention", "query");
  require_rank(k, 2, "attention", "key");
  require_rank(v, 2, "attention", "value");
  const auto rq = q.dim(0), rk = k.dim(0), d = q.dim(1);
  if (k.dim(1) != d || v.dim(1) != d || v.dim(0) != rk) {
    fail("attention", "q " + to_string(q.shape()) + ", k " + to_string(k.shape()) + ", v " +
                          to_string(v.shape()) + " are not conformant");
  }
  if (heads <= 0 || d % heads != 0) {
    fail("attention", "width " + std::to_string(d) + " not divisible by " +
                          std::to_string(heads) + " heads");
  }
  if (mask.rows() != rq) {
    fail("attention", "mask has " + std::to_string(mask.rows()) + " rows for " +
                          std::to_string(rq) + " queries");
  }
  for (std::int64_t r = 0; r < rq; ++r) {
    if (mask.offsets[u(r + 1)] <= mask.offsets[u(r)]) {
      fail("attention", "query row " + std::to_string(r) + " has no visible keys");
    }
  }
  for (auto key : mask.keys) {
    if (key < 0 || key >= rk) fail("attention", "mask key " + std::to_string(key) + " out of range");
  }
  const auto dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto qv = q.data(), kv = k.data(), vv = v.data();
  std::vector<std::vector<double>> probs(u(heads), std::vector<double>(mask.keys.size()));
  std::vector<double> out(u(rq * d), 0.0);
  for (int h = 0; h < heads; ++h) {
    auto& ph = probs[u(h)];
    const auto col = h * dh;
    for (std::int64_t r = 0; r < rq; ++r) {
      const auto b = mask.offsets[u(r)], e = mask.offsets[u(r + 1)];
      const double* qr = qv.data() + r * d + col;
      double mx = -std::numeric_limits<double>::infinity();
      for (auto i = b; i < e; ++i) {
        const double* kr = kv.data() + mask.keys[u(i)] * d + col;
        double s = 0.0;
        for (std::int64_t c = 0; c < dh; ++c) s += qr[c] * kr[c];
        s *= inv_sqrt;
        ph[u(i)] = s;
        mx = std::max(mx, s);
      }
      double z = 0.0;
      for (auto i = b; i < e; ++i) z += (ph[u(i)] = std::exp(ph[u(i)] - mx));
      double* orow = out.data() + r * d + col;
      for (auto i = b; i < e; ++i) {
        ph[u(i)] /= z;
        const double* vr = vv.data() + mask.keys[u(i)] * d + col;
        for (std::int64_t c = 0; c < dh; ++c) orow[c] += ph[u(i)] * vr[c];
      }
    }
  }
  if (trace) {
    trace->mask = mask;
    trace->probs = probs;
  }
  return make_result(
      {rq, d}, common_precision({&q, &k, &v}), std::move(out), "attention", {q, k, v},
      [q, k, v, mask, probs = std::move(probs), heads, dh, d, rq, inv_sqrt](
          std::span<const double> g, Grads gi) {
        const auto qv = q.data(), kv = k.data(), vv = v.data();
        std::vector<double> ds;
        for (int h = 0; h < heads; ++h) {
          const auto& ph = probs[u(h)];
          const auto col = h * dh;
          for (std::int64_t r = 0; r < rq; ++r) {
            const auto b = mask.offsets[u(r)], e = mask.offsets[u(r + 1)];
            const double* gr = g.data() + r * d + col;
            ds.assign(u(e - b), 0.0);
            double dot = 0.0;
            for (auto i = b; i < e; ++i) {
              const auto key = mask.keys[u(i)];
              const double* vr = vv.data() + key * d + col;
              double dp = 0.0;
              for (std::int64_t c = 0; c < dh; ++c) dp += gr[c] * vr[c];
              ds[u(i - b)] = dp;
              dot += dp * ph[u(i)];
              if (gi[2])
                for (std::int64_t c = 0; c < dh; ++c) (*gi[2])[u(key * d + col + c)] += ph[u(i)] * gr[c];
            }
            const double* qr = qv.data() + r * d + col;
            for (auto i = b; i < e; ++i) {
              const auto key = mask.keys[u(i)];
              const double dsc = ph[u(i)] * (ds[u(i - b)] - dot) * inv_sqrt;
              if (dsc == 0.0) continue;
              const double* kr = kv.data() + key * d + col;
              if (gi[0])
                for (std::int64_t c = 0; c < dh; ++c) (*gi[0])[u(r * d + col + c)] += dsc * kr[c];
              if (gi[1])
                for (std::int64_t c = 0; c < dh; ++c) (*gi[1])[u(key * d + col + c)] += dsc * qr[c];
            }
          }
        }
      });
}

Tensor gaussian_basis(std::span<const double> x, std::span<const double> centres,
                      const Tensor& widths) {
  require_rank(widths, 1, "gaussian_basis", "widths");
  const auto K = static_cast<std::int64_t>(centres.size());
  if (widths.dim(0) != K) {
    fail("gaussian_basis", std::to_string(K) + " centres but widths " + to_string(widths.shape()));
  }
  const auto wv = widths.data();
  for (double w : wv)
    if (!(w > 0.0)) fail("gaussian_basis", "non-positive width " + std::to_string(w));
  const auto n = static_cast<std::int64_t>(x.size());
  std::vector<double> out(u(n * K));
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < K; ++j) {
      const double z = (x[u(i)] - centres[u(j)]) / wv[u(j)];
      out[u(i * K + j)] = std::exp(-0.5 * z * z);
    }
  std::vector<double> xs(x.begin(), x.end()), cs(centres.begin(), centres.end());
  std::vector<double> y = out;
  return make_result({n, K}, widths.precision(), std::move(out), "gaussian_basis", {widths},
                     [xs = std::move(xs), cs = std::move(cs), y = std::move(y), widths, n, K](
                         std::span<const double> g, Grads gi) {
                       if (!gi[0]) return;
                       const auto wv = widths.data();
                       for (std::int64_t i = 0; i < n; ++i)
                         for (std::int64_t j = 0; j < K; ++j) {
                           const double diff = xs[u(i)] - cs[u(j)];
                           const double w = wv[u(j)];
                           (*gi[0])[u(j)] += g[u(i * K + j)] * y[u(i * K + j)] * diff * diff / (w * w * w);
                         }
                     });
}

}  // namespace molalign::numerics
