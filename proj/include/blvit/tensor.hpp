// SPDX-License-Identifier: Apache-2.0
/**
 * @file   tensor.hpp
 * @brief  Dense float64 tensors with tape-based reverse-mode autodiff.
 *
 * Every op checks shapes at its boundary and records a backward rule on the
 * thread's active Graph when at least one input requires a gradient. With no
 * active Graph, ops run forward-only. Matrix products add their
 * multiply-accumulate count to a thread-local counter (see flops::Scope).
 */
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace blvit {

using Shape = std::vector<std::size_t>;

/// Per-image lists of token positions, e.g. the primary tokens of a mask.
using RowIndex = std::vector<std::vector<std::size_t>>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

/// Reference-counted handle; copies alias the same storage (use clone()).
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : impl_(std::make_shared<TensorImpl>()) {
    if (numel_of(shape) != data.size())
      throw ShapeError("tensor: shape " + to_string(shape) + " holds " +
                       std::to_string(numel_of(shape)) + " values, got " +
                       std::to_string(data.size()));
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const std::size_t n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor(Shape{}, std::vector<double>{value}, requires_grad);
  }

  bool defined() const noexcept { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  std::vector<double>& values() { return impl_->data; }
  const std::vector<double>& values() const { return impl_->data; }

  /// Empty span when no gradient has reached this tensor.
  std::span<const double> grad() const { return impl_->grad; }
  bool has_grad() const { return !impl_->grad.empty(); }
  void zero_grad() { impl_->grad.clear(); }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool flag) { impl_->requires_grad = flag; }

  double item() const {
    if (numel() != 1) throw ShapeError("item: tensor " + to_string(shape()) + " is not a scalar");
    return impl_->data[0];
  }

  double operator[](std::size_t i) const { return impl_->data.at(i); }

  /// Deep copy of values; the copy carries no gradient and no graph edges.
  Tensor clone(bool requires_grad = false) const { return Tensor(shape(), impl_->data, requires_grad); }
  Tensor detach() const { return clone(false); }

  TensorImpl& impl() const { return *impl_; }
  const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// ---------------------------------------------------------------------------
// FLOP accounting. One multiply-accumulate of a matrix product counts as one
// unit; biases, norms and pointwise ops are not counted.

namespace flops {

inline std::uint64_t& counter() {
  thread_local std::uint64_t value = 0;
  return value;
}

class Scope {
 public:
  Scope() : start_(counter()) {}
  std::uint64_t count() const { return counter() - start_; }

 private:
  std::uint64_t start_;
};

}  // namespace flops

// ---------------------------------------------------------------------------
// Recording tape.

namespace debug {

/// Scales the incoming gradient of every node recorded under `op` during
/// backward. Used to prove the gradient checker catches a broken rule.
struct BackwardFault {
  std::string op;
  double factor = 1.0;
};

inline BackwardFault& backward_fault() {
  thread_local BackwardFault fault;
  return fault;
}

}  // namespace debug

class Graph {
 public:
  using BackwardFn = std::function<void(std::span<const double> out_grad)>;

  Graph() : previous_(slot()) { slot() = this; }
  ~Graph() { slot() = previous_; }
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  static Graph* current() { return slot(); }

  void record(const char* op, const Tensor& out, BackwardFn fn) {
    nodes_.push_back(Node{op, out.impl_ptr(), std::move(fn)});
  }

  std::size_t size() const { return nodes_.size(); }

  /// Walks the recorded nodes in exact reverse order of execution.
  void backward(const Tensor& loss) {
    if (loss.numel() != 1) throw ShapeError("backward: loss must be a scalar, got " + to_string(loss.shape()));
    if (!loss.requires_grad()) throw std::logic_error("backward: loss does not depend on any parameter");
    auto& seed = loss.impl();
    seed.ensure_grad();
    seed.grad[0] += 1.0;
    const auto& fault = debug::backward_fault();
    std::vector<double> skewed;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->out->grad.empty()) continue;
      if (!fault.op.empty() && fault.op == it->op) {
        skewed = it->out->grad;
        for (double& g : skewed) g *= fault.factor;
        it->fn(skewed);
      } else {
        it->fn(it->out->grad);
      }
    }
  }

 private:
  struct Node {
    const char* op;
    std::shared_ptr<TensorImpl> out;
    BackwardFn fn;
  };

  static Graph*& slot() {
    thread_local Graph* active = nullptr;
    return active;
  }

  friend class NoGradGuard;
  Graph* previous_;
  std::vector<Node> nodes_;
};

/// Suspends recording for its lifetime (e.g. frozen-teacher forwards).
class NoGradGuard {
 public:
  NoGradGuard() : saved_(Graph::slot()) { Graph::slot() = nullptr; }
  ~NoGradGuard() { Graph::slot() = saved_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Graph* saved_;
};

namespace detail {

inline void check_finite(const char* op, const std::vector<double>& values) {
  for (double v : values)
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite value in output");
}

inline bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

/// Finalises an op result: finiteness check plus tape recording.
template <class Fn>
Tensor finish(const char* op, Shape shape, std::vector<double> data,
              std::initializer_list<const Tensor*> inputs, Fn&& backward) {
  check_finite(op, data);
  Tensor out(std::move(shape), std::move(data));
  Graph* graph = Graph::current();
  if (graph && any_requires_grad(inputs)) {
    out.set_requires_grad(true);
    graph->record(op, out, std::forward<Fn>(backward));
  }
  return out;
}

/// Gradient buffer of `t`, allocated on first use.
inline std::vector<double>& grad_buffer(const Tensor& t) {
  t.impl().ensure_grad();
  return t.impl().grad;
}

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMajor>;
using ConstMatMap = Eigen::Map<const RowMajor>;

inline void check_axis(const char* op, const Tensor& x, std::size_t axis) {
  if (axis >= x.rank())
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                     to_string(x.shape()));
}

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
}

/// outer * len * inner decomposition around `axis`.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Matrix products

/**
 * Batched matrix product. `a` is [..., m, k]; `b` is either [k, n] (shared by
 * every batch entry) or [..., k, n] with the same leading dims as `a`.
 */
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw ShapeError("matmul: operands must be at least 2-D, got " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  const std::size_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
  const std::size_t kb = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
  const bool shared_b = b.rank() == 2;
  const Shape batch_dims(a.shape().begin(), a.shape().end() - 2);
  if (k != kb || (!shared_b && Shape(b.shape().begin(), b.shape().end() - 2) != batch_dims))
    throw ShapeError("matmul: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));

  const std::size_t batch = numel_of(batch_dims);
  Shape out_shape = batch_dims;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<double> out(batch * m * n, 0.0);

  const double* pa = a.values().data();
  const double* pb = b.values().data();
  if (shared_b) {
    // fold batch into rows: one GEMM
    detail::MatMap(out.data(), batch * m, n).noalias() =
        detail::ConstMatMap(pa, batch * m, k) * detail::ConstMatMap(pb, k, n);
  } else {
    for (std::size_t i = 0; i < batch; ++i)
      detail::MatMap(out.data() + i * m * n, m, n).noalias() =
          detail::ConstMatMap(pa + i * m * k, m, k) * detail::ConstMatMap(pb + i * k * n, k, n);
  }
  flops::counter() += batch * m * k * n;

  return detail::finish("matmul", std::move(out_shape), std::move(out), {&a, &b},
                        [a, b, batch, m, k, n, shared_b](std::span<const double> g) {
                          const double* pa = a.values().data();
                          const double* pb = b.values().data();
                          if (a.requires_grad()) {
                            auto& ga = detail::grad_buffer(a);
                            if (shared_b) {
                              detail::MatMap(ga.data(), batch * m, k).noalias() +=
                                  detail::ConstMatMap(g.data(), batch * m, n) *
                                  detail::ConstMatMap(pb, k, n).transpose();
                            } else {
                              for (std::size_t i = 0; i < batch; ++i)
                                detail::MatMap(ga.data() + i * m * k, m, k).noalias() +=
                                    detail::ConstMatMap(g.data() + i * m * n, m, n) *
                                    detail::ConstMatMap(pb + i * k * n, k, n).transpose();
                            }
                          }
                          if (b.requires_grad()) {
                            auto& gb = detail::grad_buffer(b);
                            if (shared_b) {
                              detail::MatMap(gb.data(), k, n).noalias() +=
                                  detail::ConstMatMap(pa, batch * m, k).transpose() *
                                  detail::ConstMatMap(g.data(), batch * m, n);
                            } else {
                              for (std::size_t i = 0; i < batch; ++i)
                                detail::MatMap(gb.data() + i * k * n, k, n).noalias() +=
                                    detail::ConstMatMap(pa + i * m * k, m, k).transpose() *
                                    detail::ConstMatMap(g.data() + i * m * n, m, n);
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel())
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  return detail::finish("reshape", std::move(shape), x.values(), {&x}, [x](std::span<const double> g) {
    auto& gx = detail::grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

/// Reorders axes: output axis i is input axis perm[i].
inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.rank();
  if (perm.size() != r) throw ShapeError("permute: permutation rank mismatch for " + to_string(x.shape()));
  std::vector<bool> seen(r, false);
  for (std::size_t p : perm) {
    if (p >= r || seen[p]) throw ShapeError("permute: invalid permutation for " + to_string(x.shape()));
    seen[p] = true;
  }
  Shape out_shape(r);
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * x.dim(i);
  std::vector<std::size_t> step(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = x.dim(perm[i]);
    step[i] = in_strides[perm[i]];
  }
  // source offset of each output element, in output order
  const std::size_t n = x.numel();
  std::vector<std::size_t> source(n);
  std::vector<std::size_t> counter(r, 0);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < n; ++i) {
    source[i] = offset;
    for (std::size_t d = r; d-- > 0;) {
      if (++counter[d] < out_shape[d]) {
        offset += step[d];
        break;
      }
      offset -= step[d] * (out_shape[d] - 1);
      counter[d] = 0;
    }
  }
  std::vector<double> out(n);
  const auto& in = x.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = in[source[i]];
  return detail::finish("permute", std::move(out_shape), std::move(out), {&x},
                        [x, source = std::move(source)](std::span<const double> g) {
                          auto& gx = detail::grad_buffer(x);
                          for (std::size_t i = 0; i < g.size(); ++i) gx[source[i]] += g[i];
                        });
}

/// Swaps the last two axes.
inline Tensor transpose(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("transpose: need rank >= 2, got " + to_string(x.shape()));
  std::vector<std::size_t> perm(x.rank());
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[x.rank() - 1], perm[x.rank() - 2]);
  return permute(x, perm);
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  detail::check_axis("concat", parts[0], axis);
  Shape reference = parts[0].shape();
  reference[axis] = 0;
  Shape out_shape = reference;
  for (const Tensor& p : parts) {
    Shape probe = p.shape();
    if (probe.size() == reference.size()) probe[axis] = 0;
    if (probe != reference)
      throw ShapeError("concat: incompatible shapes " + to_string(parts[0].shape()) + " and " +
                       to_string(p.shape()));
    out_shape[axis] += p.dim(axis);
  }
  const auto split = detail::split_at(out_shape, axis);
  std::vector<double> out(numel_of(out_shape));
  std::vector<std::size_t> starts;
  std::size_t col = 0;
  for (const Tensor& p : parts) {
    starts.push_back(col);
    const std::size_t width = p.dim(axis) * split.inner;
    for (std::size_t o = 0; o < split.outer; ++o)
      std::copy_n(p.values().data() + o * width, width, out.data() + (o * split.len + col) * split.inner);
    col += p.dim(axis);
  }
  detail::check_finite("concat", out);
  Tensor result(out_shape, std::move(out));
  Graph* graph = Graph::current();
  if (graph && std::any_of(parts.begin(), parts.end(), [](const Tensor& t) { return t.requires_grad(); })) {
    result.set_requires_grad(true);
    graph->record("concat", result, [parts, starts, split, axis](std::span<const double> g) {
      for (std::size_t i = 0; i < parts.size(); ++i) {
        if (!parts[i].requires_grad()) continue;
        auto& gp = detail::grad_buffer(parts[i]);
        const std::size_t width = parts[i].dim(axis) * split.inner;
        for (std::size_t o = 0; o < split.outer; ++o)
          for (std::size_t j = 0; j < width; ++j) gp[o * width + j] += g[(o * split.len + starts[i]) * split.inner + j];
      }
    });
  }
  return result;
}

namespace detail {

inline void check_rows(const char* op, const Tensor& x, const RowIndex& idx) {
  if (x.rank() != 3) throw ShapeError(std::string(op) + ": expected [B,N,C], got " + to_string(x.shape()));
  if (idx.size() != x.dim(0))
    throw ShapeError(std::string(op) + ": index has " + std::to_string(idx.size()) + " images, tensor " +
                     to_string(x.shape()));
  const std::size_t k = idx.empty() ? 0 : idx[0].size();
  for (const auto& row : idx) {
    if (row.size() != k) throw ShapeError(std::string(op) + ": ragged index lists");
    for (std::size_t t : row)
      if (t >= x.dim(1))
        throw IndexError(std::string(op) + ": token index " + std::to_string(t) + " out of range for " +
                         to_string(x.shape()));
  }
}

}  // namespace detail

/// Selects token rows per image: x [B,N,C], idx B lists of k → [B,k,C].
inline Tensor gather_rows(const Tensor& x, const RowIndex& idx) {
  detail::check_rows("gather_rows", x, idx);
  const std::size_t batch = x.dim(0), n = x.dim(1), c = x.dim(2);
  const std::size_t k = batch ? idx[0].size() : 0;
  std::vector<double> out(batch * k * c);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t r = 0; r < k; ++r)
      std::copy_n(x.values().data() + (b * n + idx[b][r]) * c, c, out.data() + (b * k + r) * c);
  return detail::finish("gather_rows", Shape{batch, k, c}, std::move(out), {&x},
                        [x, idx, batch, n, k, c](std::span<const double> g) {
                          auto& gx = detail::grad_buffer(x);
                          for (std::size_t b = 0; b < batch; ++b)
                            for (std::size_t r = 0; r < k; ++r)
                              for (std::size_t j = 0; j < c; ++j)
                                gx[(b * n + idx[b][r]) * c + j] += g[(b * k + r) * c + j];
                        });
}

/// Copy of `base` [B,N,C] with rows idx[b] overwritten by `rows` [B,k,C].
/// Index lists must not repeat a position.
inline Tensor scatter_rows(const Tensor& base, const Tensor& rows, const RowIndex& idx) {
  detail::check_rows("scatter_rows", base, idx);
  const std::size_t batch = base.dim(0), n = base.dim(1), c = base.dim(2);
  const std::size_t k = batch ? idx[0].size() : 0;
  if (rows.shape() != Shape{batch, k, c})
    throw ShapeError("scatter_rows: rows " + to_string(rows.shape()) + " do not match index of " +
                     std::to_string(k) + " rows into " + to_string(base.shape()));
  std::vector<std::uint8_t> written(batch * n, 0);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t : idx[b]) {
      if (written[b * n + t]) throw IndexError("scatter_rows: duplicate token index " + std::to_string(t));
      written[b * n + t] = 1;
    }
  std::vector<double> out = base.values();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t r = 0; r < k; ++r)
      std::copy_n(rows.values().data() + (b * k + r) * c, c, out.data() + (b * n + idx[b][r]) * c);
  return detail::finish("scatter_rows", Shape{batch, n, c}, std::move(out), {&base, &rows},
                        [base, rows, idx, written = std::move(written), batch, n, k, c](std::span<const double> g) {
                          if (base.requires_grad()) {
                            auto& gb = detail::grad_buffer(base);
                            for (std::size_t i = 0; i < batch * n; ++i)
                              if (!written[i])
                                for (std::size_t j = 0; j < c; ++j) gb[i * c + j] += g[i * c + j];
                          }
                          if (rows.requires_grad()) {
                            auto& gr = detail::grad_buffer(rows);
                            for (std::size_t b = 0; b < batch; ++b)
                              for (std::size_t r = 0; r < k; ++r)
                                for (std::size_t j = 0; j < c; ++j)
                                  gr[(b * k + r) * c + j] += g[(b * n + idx[b][r]) * c + j];
                          }
                        });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("add", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  return detail::finish("add", a.shape(), std::move(out), {&a, &b}, [a, b](std::span<const double> g) {
    for (const Tensor* t : {&a, &b}) {
      if (!t->requires_grad()) continue;
      auto& gt = detail::grad_buffer(*t);
      for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("sub", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
  return detail::finish("sub", a.shape(), std::move(out), {&a, &b}, [a, b](std::span<const double> g) {
    if (a.requires_grad()) {
      auto& ga = detail::grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto& gb = detail::grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("mul", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  return detail::finish("mul", a.shape(), std::move(out), {&a, &b}, [a, b](std::span<const double> g) {
    if (a.requires_grad()) {
      auto& ga = detail::grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.values()[i];
    }
    if (b.requires_grad()) {
      auto& gb = detail::grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.values()[i];
    }
  });
}

/// x * c for a constant c.
inline Tensor scale(const Tensor& x, double c) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] * c;
  return detail::finish("scale", x.shape(), std::move(out), {&x}, [x, c](std::span<const double> g) {
    auto& gx = detail::grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * c;
  });
}

/// x + c for a constant c.
inline Tensor add_scalar(const Tensor& x, double c) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] + c;
  return detail::finish("add_scalar", x.shape(), std::move(out), {&x}, [x](std::span<const double> g) {
    auto& gx = detail::grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

/// x * s where s is a learnable one-element tensor.
inline Tensor mul_scalar(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) throw ShapeError("mul_scalar: factor must hold one value, got " + to_string(s.shape()));
  const double sv = s.values()[0];
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] * sv;
  return detail::finish("mul_scalar", x.shape(), std::move(out), {&x, &s}, [x, s](std::span<const double> g) {
    if (x.requires_grad()) {
      auto& gx = detail::grad_buffer(x);
      const double sv = s.values()[0];
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * sv;
    }
    if (s.requires_grad()) {
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * x.values()[i];
      detail::grad_buffer(s)[0] += acc;
    }
  });
}

/// x + t where t's shape equals the trailing dims of x (bias, positional table).
inline Tensor add_trailing(const Tensor& x, const Tensor& t) {
  if (t.rank() > x.rank() || !std::equal(t.shape().begin(), t.shape().end(), x.shape().end() - t.rank()))
    throw ShapeError("add_trailing: " + to_string(t.shape()) + " is not a suffix of " + to_string(x.shape()));
  const std::size_t inner = t.numel(), outer = x.numel() / std::max<std::size_t>(inner, 1);
  std::vector<double> out(x.numel());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < inner; ++j) out[o * inner + j] = x.values()[o * inner + j] + t.values()[j];
  return detail::finish("add_trailing", x.shape(), std::move(out), {&x, &t},
                        [x, t, outer, inner](std::span<const double> g) {
                          if (x.requires_grad()) {
                            auto& gx = detail::grad_buffer(x);
                            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                          }
                          if (t.requires_grad()) {
                            auto& gt = detail::grad_buffer(t);
                            for (std::size_t o = 0; o < outer; ++o)
                              for (std::size_t j = 0; j < inner; ++j) gt[j] += g[o * inner + j];
                          }
                        });
}

/// Multiplies each row of y [..., R, C] by the matching entry of f [..., R].
inline Tensor scale_rows(const Tensor& y, const Tensor& f) {
  if (y.rank() < 1 || f.shape() != Shape(y.shape().begin(), y.shape().end() - 1))
    throw ShapeError("scale_rows: factors " + to_string(f.shape()) + " do not match rows of " + to_string(y.shape()));
  const std::size_t rows = f.numel(), c = y.shape().back();
  std::vector<double> out(y.numel());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = y.values()[r * c + j] * f.values()[r];
  return detail::finish("scale_rows", y.shape(), std::move(out), {&y, &f}, [y, f, rows, c](std::span<const double> g) {
    if (y.requires_grad()) {
      auto& gy = detail::grad_buffer(y);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) gy[r * c + j] += g[r * c + j] * f.values()[r];
    }
    if (f.requires_grad()) {
      auto& gf = detail::grad_buffer(f);
      for (std::size_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (std::size_t j = 0; j < c; ++j) acc += g[r * c + j] * y.values()[r * c + j];
        gf[r] += acc;
      }
    }
  });
}

/// Exact (erf-based) GELU.
inline Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.values()[i];
    out[i] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
  }
  return detail::finish("gelu", x.shape(), std::move(out), {&x}, [x](std::span<const double> g) {
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    auto& gx = detail::grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = x.values()[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * 0.70710678118654752440));
      gx[i] += g[i] * (cdf + v * inv_sqrt2pi * std::exp(-0.5 * v * v));
    }
  });
}

// ---------------------------------------------------------------------------
// Normalisation and reductions

/// Max-subtracted softmax along `axis`.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  detail::check_axis("softmax", x, axis);
  const auto s = detail::split_at(x.shape(), axis);
  std::vector<double> out(x.numel());
  const auto& in = x.values();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      double peak = in[base];
      for (std::size_t j = 1; j < s.len; ++j) peak = std::max(peak, in[base + j * s.inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < s.len; ++j) {
        const double e = std::exp(in[base + j * s.inner] - peak);
        out[base + j * s.inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < s.len; ++j) out[base + j * s.inner] /= total;
    }
  std::vector<double> y = out;
  return detail::finish("softmax", x.shape(), std::move(out), {&x}, [x, y = std::move(y), s](std::span<const double> g) {
    auto& gx = detail::grad_buffer(x);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.len * s.inner + i;
        double dot = 0.0;
        for (std::size_t j = 0; j < s.len; ++j) dot += g[base + j * s.inner] * y[base + j * s.inner];
        for (std::size_t j = 0; j < s.len; ++j) {
          const std::size_t at = base + j * s.inner;
          gx[at] += y[at] * (g[at] - dot);
        }
      }
  });
}

inline constexpr double kLayerNormEps = 1e-6;

/// Normalises each last-axis vector to zero mean / unit variance, then applies gain and bias.
inline Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = kLayerNormEps) {
  if (x.rank() < 1) throw ShapeError("layernorm: scalar input");
  const std::size_t c = x.shape().back();
  if (gain.shape() != Shape{c} || bias.shape() != Shape{c})
    throw ShapeError("layernorm: gain " + to_string(gain.shape()) + " / bias " + to_string(bias.shape()) +
                     " do not match " + to_string(x.shape()));
  const std::size_t rows = x.numel() / c;
  std::vector<double> xhat(x.numel()), inv_std(rows), out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x.values().data() + r * c;
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(c);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[r * c + j] = (row[j] - mean) * inv_std[r];
      out[r * c + j] = xhat[r * c + j] * gain.values()[j] + bias.values()[j];
    }
  }
  return detail::finish(
      "layernorm", x.shape(), std::move(out), {&x, &gain, &bias},
      [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, c](std::span<const double> g) {
        if (gain.requires_grad() || bias.requires_grad()) {
          auto* gg = gain.requires_grad() ? &detail::grad_buffer(gain) : nullptr;
          auto* gb = bias.requires_grad() ? &detail::grad_buffer(bias) : nullptr;
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) {
              if (gg) (*gg)[j] += g[r * c + j] * xhat[r * c + j];
              if (gb) (*gb)[j] += g[r * c + j];
            }
        }
        if (!x.requires_grad()) return;
        auto& gx = detail::grad_buffer(x);
        const double inv_c = 1.0 / static_cast<double>(c);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            const double d = g[r * c + j] * gain.values()[j];
            mean_d += d;
            mean_dx += d * xhat[r * c + j];
          }
          mean_d *= inv_c;
          mean_dx *= inv_c;
          for (std::size_t j = 0; j < c; ++j) {
            const double d = g[r * c + j] * gain.values()[j];
            gx[r * c + j] += inv_std[r] * (d - mean_d - xhat[r * c + j] * mean_dx);
          }
        }
      });
}

/// Mean over `axis`; the axis is removed from the shape.
inline Tensor mean(const Tensor& x, std::size_t axis) {
  detail::check_axis("mean", x, axis);
  const auto s = detail::split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<double> out(s.outer * s.inner, 0.0);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t j = 0; j < s.len; ++j)
      for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += x.values()[(o * s.len + j) * s.inner + i];
  const double inv = 1.0 / static_cast<double>(s.len);
  for (double& v : out) v *= inv;
  return detail::finish("mean", std::move(out_shape), std::move(out), {&x}, [x, s, inv](std::span<const double> g) {
    auto& gx = detail::grad_buffer(x);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t j = 0; j < s.len; ++j)
        for (std::size_t i = 0; i < s.inner; ++i) gx[(o * s.len + j) * s.inner + i] += g[o * s.inner + i] * inv;
  });
}

inline Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.values()) total += v;
  return detail::finish("sum", Shape{}, {total}, {&x}, [x](std::span<const double> g) {
    auto& gx = detail::grad_buffer(x);
    for (double& v : gx) v += g[0];
  });
}

inline Tensor mean_all(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

/// x · W + b with W stored [in, out]. Bias may be undefined.
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = {}) {
  if (weight.rank() != 2 || x.rank() < 1 || x.shape().back() != weight.dim(0))
    throw ShapeError("linear: input " + to_string(x.shape()) + " incompatible with weight " +
                     to_string(weight.shape()));
  Tensor x2 = x.rank() == 1 ? reshape(x, Shape{1, x.dim(0)}) : x;
  Tensor y = matmul(x2, weight);
  if (x.rank() == 1) y = reshape(y, Shape{weight.dim(1)});
  return bias.defined() ? add_trailing(y, bias) : y;
}

/// Mean cross-entropy of logits [B,K] against integer labels.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size())
    throw ShapeError("cross_entropy: logits " + to_string(logits.shape()) + " vs " + std::to_string(labels.size()) +
                     " labels");
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  for (int label : labels)
    if (label < 0 || static_cast<std::size_t>(label) >= classes)
      throw IndexError("cross_entropy: label " + std::to_string(label) + " outside [0, " + std::to_string(classes) + ")");
  std::vector<double> probs(batch * classes);
  double loss = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const double* row = logits.values().data() + b * classes;
    const double peak = *std::max_element(row, row + classes);
    double total = 0.0;
    for (std::size_t j = 0; j < classes; ++j) total += std::exp(row[j] - peak);
    const double log_z = peak + std::log(total);
    for (std::size_t j = 0; j < classes; ++j) probs[b * classes + j] = std::exp(row[j] - log_z);
    loss += log_z - row[labels[b]];
  }
  loss /= static_cast<double>(batch);
  return detail::finish("cross_entropy", Shape{}, {loss}, {&logits},
                        [logits, labels, probs = std::move(probs), batch, classes](std::span<const double> g) {
                          auto& gl = detail::grad_buffer(logits);
                          const double w = g[0] / static_cast<double>(batch);
                          for (std::size_t b = 0; b < batch; ++b)
                            for (std::size_t j = 0; j < classes; ++j) {
                              const double target = static_cast<std::size_t>(labels[b]) == j ? 1.0 : 0.0;
                              gl[b * classes + j] += w * (probs[b * classes + j] - target);
                            }
                        });
}

/// Cosine similarity of matching last-axis vectors; the last axis is removed.
/// The denominator is max(|a|·|b|, eps).
inline Tensor cosine_similarity(const Tensor& a, const Tensor& b, double eps = 1e-8) {
  detail::check_same_shape("cosine_similarity", a, b);
  if (a.rank() < 1) throw ShapeError("cosine_similarity: scalar input");
  const std::size_t c = a.shape().back(), rows = a.numel() / std::max<std::size_t>(c, 1);
  std::vector<double> out(rows), dots(rows), na(rows), nb(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* pa = a.values().data() + r * c;
    const double* pb = b.values().data() + r * c;
    double dot = 0.0, sa = 0.0, sb = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      dot += pa[j] * pb[j];
      sa += pa[j] * pa[j];
      sb += pb[j] * pb[j];
    }
    dots[r] = dot;
    na[r] = std::sqrt(sa);
    nb[r] = std::sqrt(sb);
    out[r] = dot / std::max(na[r] * nb[r], eps);
  }
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  std::vector<double> cos = out;
  return detail::finish(
      "cosine_similarity", std::move(out_shape), std::move(out), {&a, &b},
      [a, b, c, rows, eps, cos = std::move(cos), na = std::move(na), nb = std::move(nb)](std::span<const double> g) {
        // d cos / d a = b / (|a||b|) - cos * a / |a|^2 when the product exceeds eps
        auto grad_side = [&](const Tensor& self, const Tensor& other, const std::vector<double>& n_self) {
          auto& gs = detail::grad_buffer(self);
          for (std::size_t r = 0; r < rows; ++r) {
            const double denom = na[r] * nb[r];
            const double* ps = self.values().data() + r * c;
            const double* po = other.values().data() + r * c;
            for (std::size_t j = 0; j < c; ++j) {
              double d = 0.0;
              if (denom > eps)
                d = po[j] / denom - cos[r] * ps[j] / (n_self[r] * n_self[r]);
              else
                d = po[j] / eps;
              gs[r * c + j] += g[r] * d;
            }
          }
        };
        if (a.requires_grad()) grad_side(a, b, na);
        if (b.requires_grad()) grad_side(b, a, nb);
      });
}

}  // namespace blvit
