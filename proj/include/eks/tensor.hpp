#pragma once

// Dense double-precision tensors with reverse-mode automatic differentiation
// on an explicit tape. Shapes are fixed per tensor, storage is contiguous
// row-major, and there is no broadcasting beyond scalar-tensor ops: every
// shape alignment is explicit. Ops validate their inputs and reject
// non-finite results.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "eks/rng.hpp"

namespace eks {

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

[[noreturn]] inline void fail(const std::string& msg) { throw Error(msg); }

using Shape = std::vector<size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

namespace detail {

inline size_t numel_of(const Shape& s) {
  size_t n = 1;
  for (size_t d : s) n *= d;
  return n;
}

inline void validate_shape(const Shape& s, const char* where) {
  if (s.empty()) fail(std::string(where) + ": empty shape");
  for (size_t d : s)
    if (d == 0) fail(std::string(where) + ": zero-sized dimension in " + shape_str(s));
}

inline void check_finite(const std::vector<double>& v, const char* op) {
  for (double x : v)
    if (!std::isfinite(x)) fail(std::string(op) + ": produced a non-finite value");
}

// C(MxN) += A(MxK) * B(KxN), row-major
inline void gemm_nn(const double* a, const double* b, double* c, size_t m, size_t k, size_t n) {
  for (size_t i = 0; i < m; ++i) {
    const double* ar = a + i * k;
    double* cr = c + i * n;
    for (size_t p = 0; p < k; ++p) {
      double av = ar[p];
      const double* br = b + p * n;
      for (size_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
}

// C(MxN) += A^T * B where A is KxM
inline void gemm_tn(const double* a, const double* b, double* c, size_t m, size_t k, size_t n) {
  for (size_t p = 0; p < k; ++p) {
    const double* ar = a + p * m;
    const double* br = b + p * n;
    for (size_t i = 0; i < m; ++i) {
      double av = ar[i];
      double* cr = c + i * n;
      for (size_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
}

// C(MxN) += A * B^T where B is NxK
inline void gemm_nt(const double* a, const double* b, double* c, size_t m, size_t k, size_t n) {
  for (size_t i = 0; i < m; ++i) {
    const double* ar = a + i * k;
    double* cr = c + i * n;
    for (size_t j = 0; j < n; ++j) {
      const double* br = b + j * k;
      double acc = 0.0;
      for (size_t p = 0; p < k; ++p) acc += ar[p] * br[p];
      cr[j] += acc;
    }
  }
}

}  // namespace detail

struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated only when requires_grad
  bool requires_grad = false;
};

// Value-semantics handle over a shared node. Copies are shallow; the values
// of a tensor are treated as immutable once it has been consumed by an op
// (parameters are mutated only between tapes, by the optimizer).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false) {
    return filled(shape, 0.0, requires_grad);
  }

  static Tensor full(const Shape& shape, double v, bool requires_grad = false) {
    if (!std::isfinite(v)) fail("Tensor::full: non-finite fill value");
    return filled(shape, v, requires_grad);
  }

  static Tensor scalar(double v) { return full({1}, v); }

  static Tensor from_data(const Shape& shape, std::vector<double> data, bool requires_grad = false) {
    detail::validate_shape(shape, "Tensor::from_data");
    if (detail::numel_of(shape) != data.size())
      fail("Tensor::from_data: shape " + shape_str(shape) + " expects " +
           std::to_string(detail::numel_of(shape)) + " values, got " + std::to_string(data.size()));
    detail::check_finite(data, "Tensor::from_data");
    Tensor t = uninit(shape, requires_grad);
    t.node_->value = std::move(data);
    return t;
  }

  static Tensor uniform(const Shape& shape, Rng& rng, double lo, double hi, bool requires_grad = false) {
    Tensor t = uninit(shape, requires_grad);
    for (double& x : t.node_->value) x = rng.uniform(lo, hi);
    return t;
  }

  static Tensor gaussian(const Shape& shape, Rng& rng, double sigma, bool requires_grad = false) {
    Tensor t = uninit(shape, requires_grad);
    for (double& x : t.node_->value) x = sigma * rng.gaussian();
    return t;
  }

  // internal factory: value buffer zero-initialized, no finite check
  static Tensor uninit(const Shape& shape, bool requires_grad) {
    detail::validate_shape(shape, "Tensor");
    Tensor t;
    t.node_ = std::make_shared<TensorNode>();
    t.node_->shape = shape;
    t.node_->value.assign(detail::numel_of(shape), 0.0);
    t.node_->requires_grad = requires_grad;
    if (requires_grad) t.node_->grad.assign(t.node_->value.size(), 0.0);
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  size_t rank() const { return node_->shape.size(); }
  size_t numel() const { return node_->value.size(); }
  size_t dim(size_t i) const { return node_->shape.at(i); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  std::vector<double>& values() { return node_->value; }
  const std::vector<double>& values() const { return node_->value; }

  std::vector<double>& grad() {
    if (!requires_grad()) fail("Tensor::grad: tensor does not track gradients");
    return node_->grad;
  }
  const std::vector<double>& grad() const {
    if (!requires_grad()) fail("Tensor::grad: tensor does not track gradients");
    return node_->grad;
  }

  void zero_grad() {
    if (requires_grad()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  void set_requires_grad(bool rg) {
    node_->requires_grad = rg;
    if (rg)
      node_->grad.assign(node_->value.size(), 0.0);
    else
      node_->grad.clear();
  }

  double item() const {
    if (numel() != 1) fail("Tensor::item: expected scalar, got shape " + shape_str(shape()));
    return node_->value[0];
  }

  double at(std::initializer_list<size_t> idx) const {
    if (idx.size() != rank()) fail("Tensor::at: index rank mismatch");
    size_t off = 0, i = 0;
    for (size_t v : idx) {
      if (v >= node_->shape[i]) fail("Tensor::at: index out of range");
      off = off * node_->shape[i] + v;
      ++i;
    }
    return node_->value[off];
  }

  Tensor clone() const {
    Tensor t = uninit(shape(), requires_grad());
    t.node_->value = node_->value;
    return t;
  }

  std::shared_ptr<TensorNode> node() const { return node_; }

 private:
  static Tensor filled(const Shape& shape, double v, bool requires_grad) {
    Tensor t = uninit(shape, requires_grad);
    std::fill(t.node_->value.begin(), t.node_->value.end(), v);
    return t;
  }

  std::shared_ptr<TensorNode> node_;
};

// One recorded operation: inputs, output and the rule that propagates the
// output gradient back into the inputs' accumulators.
struct TapeOp {
  const char* name;
  std::vector<std::shared_ptr<TensorNode>> inputs;
  std::shared_ptr<TensorNode> output;
  std::function<void()> backward;
};

// Records ops in execution order, which is a topological order by
// construction (an op's inputs always exist before the op runs). backward()
// walks the list once, in reverse; gradients accumulate additively and are
// zeroed explicitly by the caller, never implicitly.
class Tape {
 public:
  void record(const char* name, std::vector<std::shared_ptr<TensorNode>> inputs,
              std::shared_ptr<TensorNode> output, std::function<void()> backward) {
    ops_.push_back({name, std::move(inputs), std::move(output), std::move(backward)});
  }

  size_t size() const { return ops_.size(); }

  void backward(const Tensor& loss) {
    if (ops_.empty()) fail("Tape::backward: tape is empty");
    if (consumed_) fail("Tape::backward: tape already consumed by a previous backward pass");
    if (loss.numel() != 1)
      fail("Tape::backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    if (!loss.requires_grad())
      fail("Tape::backward: loss does not depend on any tracked parameter");
    consumed_ = true;
    loss.node()->grad[0] += 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) it->backward();
  }

  const std::vector<TapeOp>& ops() const { return ops_; }

 private:
  std::vector<TapeOp> ops_;
  bool consumed_ = false;
};

namespace detail {
inline Tape*& active_tape_slot() {
  thread_local Tape* t = nullptr;
  return t;
}
}  // namespace detail

inline Tape* active_tape() { return detail::active_tape_slot(); }

// Scoped activation: ops record onto the given tape while the scope lives.
// Without an active tape all ops run in inference mode (values only).
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : prev_(detail::active_tape_slot()) {
    detail::active_tape_slot() = &tape;
  }
  ~TapeScope() { detail::active_tape_slot() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

namespace detail {

inline bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (!active_tape()) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise and structural ops

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    fail("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  bool rec = detail::should_record({&a, &b});
  Tensor out = Tensor::uninit(a.shape(), rec);
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  detail::check_finite(ov, "add");
  if (rec) {
    auto an = a.node(), bn = b.node(), on = out.node();
    active_tape()->record("add", {an, bn}, on, [an, bn, on] {
      if (an->requires_grad)
        for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
      if (bn->requires_grad)
        for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i];
    });
  }
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    fail("sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  bool rec = detail::should_record({&a, &b});
  Tensor out = Tensor::uninit(a.shape(), rec);
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  detail::check_finite(ov, "sub");
  if (rec) {
    auto an = a.node(), bn = b.node(), on = out.node();
    active_tape()->record("sub", {an, bn}, on, [an, bn, on] {
      if (an->requires_grad)
        for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
      if (bn->requires_grad)
        for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] -= on->grad[i];
    });
  }
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    fail("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  bool rec = detail::should_record({&a, &b});
  Tensor out = Tensor::uninit(a.shape(), rec);
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  detail::check_finite(ov, "mul");
  if (rec) {
    auto an = a.node(), bn = b.node(), on = out.node();
    active_tape()->record("mul", {an, bn}, on, [an, bn, on] {
      if (an->requires_grad)
        for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * bn->value[i];
      if (bn->requires_grad)
        for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i] * an->value[i];
    });
  }
  return out;
}

inline Tensor scale(const Tensor& a, double c) {
  if (!std::isfinite(c)) fail("scale: non-finite factor");
  bool rec = detail::should_record({&a});
  Tensor out = Tensor::uninit(a.shape(), rec);
  const auto& av = a.values();
  auto& ov = out.values();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
  detail::check_finite(ov, "scale");
  if (rec) {
    auto an = a.node(), on = out.node();
    active_tape()->record("scale", {an}, on, [an, on, c] {
      for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * c;
    });
  }
  return out;
}

inline Tensor add_scalar(const Tensor& a, double c) {
  if (!std::isfinite(c)) fail("add_scalar: non-finite addend");
  bool rec = detail::should_record({&a});
  Tensor out = Tensor::uninit(a.shape(), rec);
  const auto& av = a.values();
  auto& ov = out.values();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + c;
  detail::check_finite(ov, "add_scalar");
  if (rec) {
    auto an = a.node(), on = out.node();
    active_tape()->record("add_scalar", {an}, on, [an, on] {
      for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
    });
  }
  return out;
}

inline Tensor relu(const Tensor& a) {
  bool rec = detail::should_record({&a});
  Tensor out = Tensor::uninit(a.shape(), rec);
  const auto& av = a.values();
  auto& ov = out.values();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] > 0.0 ? av[i] : 0.0;
  if (rec) {
    auto an = a.node(), on = out.node();
    active_tape()->record("relu", {an}, on, [an, on] {
      for (size_t i = 0; i < on->grad.size(); ++i)
        if (an->value[i] > 0.0) an->grad[i] += on->grad[i];
    });
  }
  return out;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    fail("matmul: expected rank-2 tensors, got " + shape_str(a.shape()) + " and " +
         shape_str(b.shape()));
  if (a.dim(1) != b.dim(0))
    fail("matmul: inner dimension mismatch " + shape_str(a.shape()) + " vs " +
         shape_str(b.shape()));
  size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  bool rec = detail::should_record({&a, &b});
  Tensor out = Tensor::uninit({m, n}, rec);
  detail::gemm_nn(a.values().data(), b.values().data(), out.values().data(), m, k, n);
  detail::check_finite(out.values(), "matmul");
  if (rec) {
    auto an = a.node(), bn = b.node(), on = out.node();
    active_tape()->record("matmul", {an, bn}, on, [an, bn, on, m, k, n] {
      // dA += dC * B^T ; dB += A^T * dC
      if (an->requires_grad)
        detail::gemm_nt(on->grad.data(), bn->value.data(), an->grad.data(), m, n, k);
      if (bn->requires_grad)
        detail::gemm_tn(an->value.data(), on->grad.data(), bn->grad.data(), k, m, n);
    });
  }
  return out;
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) fail("transpose: expected rank-2 tensor, got " + shape_str(a.shape()));
  size_t r = a.dim(0), c = a.dim(1);
  bool rec = detail::should_record({&a});
  Tensor out = Tensor::uninit({c, r}, rec);
  const auto& av = a.values();
  auto& ov = out.values();
  for (size_t i = 0; i < r; ++i)
    for (size_t j = 0; j < c; ++j) ov[j * r + i] = av[i * c + j];
  if (rec) {
    auto an = a.node(), on = out.node();
    active_tape()->record("transpose", {an}, on, [an, on, r, c] {
      for (size_t i = 0; i < r; ++i)
        for (size_t j = 0; j < c; ++j) an->grad[i * c + j] += on->grad[j * r + i];
    });
  }
  return out;
}

inline Tensor reshape(const Tensor& a, const Shape& shape) {
  detail::validate_shape(shape, "reshape");
  if (detail::numel_of(shape) != a.numel())
    fail("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  bool rec = detail::should_record({&a});
  Tensor out = Tensor::uninit(shape, rec);
  out.values() = a.values();
  if (rec) {
    auto an = a.node(), on = out.node();
    active_tape()->record("reshape", {an}, on, [an, on] {
      for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
    });
  }
  return out;
}

namespace detail {
// outer/inner extents around `axis` for contiguous block copies
inline void axis_extents(const Shape& s, size_t axis, size_t* outer, size_t* inner) {
  *outer = 1;
  *inner = 1;
  for (size_t i = 0; i < axis; ++i) *outer *= s[i];
  for (size_t i = axis + 1; i < s.size(); ++i) *inner *= s[i];
}
}  // namespace detail

inline Tensor concat(const std::vector<Tensor>& parts, size_t axis) {
  if (parts.empty()) fail("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) fail("concat: axis out of range for " + shape_str(first));
  size_t axis_total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != first.size())
      fail("concat: rank mismatch " + shape_str(first) + " vs " + shape_str(p.shape()));
    for (size_t i = 0; i < first.size(); ++i)
      if (i != axis && p.shape()[i] != first[i])
        fail("concat: shape mismatch " + shape_str(first) + " vs " + shape_str(p.shape()));
    axis_total += p.shape()[axis];
  }
  Shape out_shape = first;
  out_shape[axis] = axis_total;
  bool any_grad = false;
  for (const Tensor& p : parts) any_grad |= p.requires_grad();
  bool rec = any_grad && active_tape() != nullptr;
  Tensor out = Tensor::uninit(out_shape, rec);

  size_t outer, inner;
  detail::axis_extents(out_shape, axis, &outer, &inner);
  size_t out_block = axis_total * inner;
  size_t off = 0;
  for (const Tensor& p : parts) {
    size_t blk = p.shape()[axis] * inner;
    for (size_t o = 0; o < outer; ++o)
      std::memcpy(out.values().data() + o * out_block + off,
                  p.values().data() + o * blk, blk * sizeof(double));
    off += blk;
  }
  if (rec) {
    std::vector<std::shared_ptr<TensorNode>> in_nodes;
    in_nodes.reserve(parts.size());
    for (const Tensor& p : parts) in_nodes.push_back(p.node());
    auto on = out.node();
    active_tape()->record("concat", in_nodes, on, [in_nodes, on, outer, inner, out_block, axis] {
      size_t off = 0;
      for (const auto& pn : in_nodes) {
        size_t blk = pn->shape[axis] * inner;
        if (pn->requires_grad)
          for (size_t o = 0; o < outer; ++o) {
            const double* src = on->grad.data() + o * out_block + off;
            double* dst = pn->grad.data() + o * blk;
            for (size_t i = 0; i < blk; ++i) dst[i] += src[i];
          }
        off += blk;
      }
    });
  }
  return out;
}

inline Tensor slice(const Tensor& a, size_t axis, size_t start, size_t stop) {
  if (axis >= a.rank()) fail("slice: axis out of range for " + shape_str(a.shape()));
  if (start >= stop || stop > a.shape()[axis])
    fail("slice: invalid range [" + std::to_string(start) + "," + std::to_string(stop) +
         ") for axis of size " + std::to_string(a.shape()[axis]));
  Shape out_shape = a.shape();
  out_shape[axis] = stop - start;
  bool rec = detail::should_record({&a});
  Tensor out = Tensor::uninit(out_shape, rec);
  size_t outer, inner;
  detail::axis_extents(a.shape(), axis, &outer, &inner);
  size_t in_block = a.shape()[axis] * inner;
  size_t out_block = (stop - start) * inner;
  for (size_t o = 0; o < outer; ++o)
    std::memcpy(out.values().data() + o * out_block,
                a.values().data() + o * in_block + start * inner, out_block * sizeof(double));
  if (rec) {
    auto an = a.node(), on = out.node();
    active_tape()->record("slice", {an}, on, [an, on, outer, inner, in_block, out_block, start] {
      for (size_t o = 0; o < outer; ++o) {
        const double* src = on->grad.data() + o * out_block;
        double* dst = an->grad.data() + o * in_block + start * inner;
        for (size_t i = 0; i < out_block; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

// Row gather on a rank-2 tensor; indices may repeat, backward scatter-adds.
inline Tensor gather_rows(const Tensor& a, const std::vector<size_t>& rows) {
  if (a.rank() != 2) fail("gather_rows: expected rank-2 tensor, got " + shape_str(a.shape()));
  if (rows.empty()) fail("gather_rows: empty index list");
  size_t c = a.dim(1);
  for (size_t r : rows)
    if (r >= a.dim(0)) fail("gather_rows: row " + std::to_string(r) + " out of range");
  bool rec = detail::should_record({&a});
  Tensor out = Tensor::uninit({rows.size(), c}, rec);
  for (size_t i = 0; i < rows.size(); ++i)
    std::memcpy(out.values().data() + i * c, a.values().data() + rows[i] * c, c * sizeof(double));
  if (rec) {
    auto an = a.node(), on = out.node();
    active_tape()->record("gather_rows", {an}, on, [an, on, rows, c] {
      for (size_t i = 0; i < rows.size(); ++i) {
        const double* src = on->grad.data() + i * c;
        double* dst = an->grad.data() + rows[i] * c;
        for (size_t j = 0; j < c; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

// out[i] = a[i, cols[i]] for a rank-2 tensor
inline Tensor pick_per_row(const Tensor& a, const std::vector<size_t>& cols) {
  if (a.rank() != 2) fail("pick_per_row: expected rank-2 tensor, got " + shape_str(a.shape()));
  if (cols.size() != a.dim(0))
    fail("pick_per_row: need one column index per row, got " + std::to_string(cols.size()) +
         " for " + std::to_string(a.dim(0)) + " rows");
  size_t c = a.dim(1);
  for (size_t j : cols)
    if (j >= c) fail("pick_per_row: column " + std::to_string(j) + " out of range");
  bool rec = detail::should_record({&a});
  Tensor out = Tensor::uninit({cols.size()}, rec);
  for (size_t i = 0; i < cols.size(); ++i) out.values()[i] = a.values()[i * c + cols[i]];
  if (rec) {
    auto an = a.node(), on = out.node();
    active_tape()->record("pick_per_row", {an}, on, [an, on, cols, c] {
      for (size_t i = 0; i < cols.size(); ++i) an->grad[i * c + cols[i]] += on->grad[i];
    });
  }
  return out;
}

// mat (RxC) plus a length-C bias applied to every row; the explicit form of
// the only row-vector alignment the library permits.
inline Tensor add_row_bias(const Tensor& mat, const Tensor& bias) {
  if (mat.rank() != 2 || bias.rank() != 1 || bias.dim(0) != mat.dim(1))
    fail("add_row_bias: incompatible shapes " + shape_str(mat.shape()) + " and " +
         shape_str(bias.shape()));
  size_t r = mat.dim(0), c = mat.dim(1);
  bool rec = detail::should_record({&mat, &bias});
  Tensor out = Tensor::uninit(mat.shape(), rec);
  const auto& mv = mat.values();
  const auto& bv = bias.values();
  auto& ov = out.values();
  for (size_t i = 0; i < r; ++i)
    for (size_t j = 0; j < c; ++j) ov[i * c + j] = mv[i * c + j] + bv[j];
  detail::check_finite(ov, "add_row_bias");
  if (rec) {
    auto mn = mat.node(), bn = bias.node(), on = out.node();
    active_tape()->record("add_row_bias", {mn, bn}, on, [mn, bn, on, r, c] {
      if (mn->requires_grad)
        for (size_t i = 0; i < r * c; ++i) mn->grad[i] += on->grad[i];
      if (bn->requires_grad)
        for (size_t i = 0; i < r; ++i)
          for (size_t j = 0; j < c; ++j) bn->grad[j] += on->grad[i * c + j];
    });
  }
  return out;
}

inline Tensor sum(const Tensor& a) {
  bool rec = detail::should_record({&a});
  Tensor out = Tensor::uninit({1}, rec);
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  out.values()[0] = acc;
  detail::check_finite(out.values(), "sum");
  if (rec) {
    auto an = a.node(), on = out.node();
    active_tape()->record("sum", {an}, on, [an, on] {
      double g = on->grad[0];
      for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += g;
    });
  }
  return out;
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

// (B,C,H,W) -> (B,C) spatial average
inline Tensor global_avg_pool(const Tensor& a) {
  if (a.rank() != 4) fail("global_avg_pool: expected rank-4 tensor, got " + shape_str(a.shape()));
  size_t b = a.dim(0), c = a.dim(1), hw = a.dim(2) * a.dim(3);
  bool rec = detail::should_record({&a});
  Tensor out = Tensor::uninit({b, c}, rec);
  const auto& av = a.values();
  auto& ov = out.values();
  double inv = 1.0 / static_cast<double>(hw);
  for (size_t i = 0; i < b * c; ++i) {
    double acc = 0.0;
    const double* src = av.data() + i * hw;
    for (size_t p = 0; p < hw; ++p) acc += src[p];
    ov[i] = acc * inv;
  }
  detail::check_finite(ov, "global_avg_pool");
  if (rec) {
    auto an = a.node(), on = out.node();
    active_tape()->record("global_avg_pool", {an}, on, [an, on, b, c, hw, inv] {
      for (size_t i = 0; i < b * c; ++i) {
        double g = on->grad[i] * inv;
        double* dst = an->grad.data() + i * hw;
        for (size_t p = 0; p < hw; ++p) dst[p] += g;
      }
    });
  }
  return out;
}

inline void zero_grads(std::vector<Tensor>& params) {
  for (Tensor& p : params) p.zero_grad();
}

}  // namespace eks
