#pragma once

// The knowledge-separation convolution layer: a shared weight W0 plus T
// low-rank expert factor pairs (B_t, A_t). A mixed-task batch is evaluated in
// one pass by aggregating per-sample weights W'_i = W0 + B_{t(i)} A_{t(i)}
// and lowering the batch to a single group convolution with groups = B.
// Fusing W_t = W0 + B_t A_t (and the reverse) switches the deployed task at
// zero extra parameters.

#include <cstdint>
#include <functional>
#include <vector>

#include "eks/conv.hpp"
#include "eks/rng.hpp"
#include "eks/tensor.hpp"

namespace eks {

// One-hot B x T assignment of batch samples to tasks. Rows that are not
// exactly one-hot are rejected: task identity is ground truth, never inferred.
class TaskMask {
 public:
  TaskMask(Tensor m) : m_(std::move(m)) {
    if (m_.rank() != 2) fail("TaskMask: expected rank-2 matrix, got " + shape_str(m_.shape()));
    size_t b = m_.dim(0), t = m_.dim(1);
    tasks_.resize(b);
    for (size_t i = 0; i < b; ++i) {
      size_t ones = 0, hot = 0;
      for (size_t j = 0; j < t; ++j) {
        double v = m_.values()[i * t + j];
        if (v == 1.0) {
          ++ones;
          hot = j;
        } else if (v != 0.0) {
          fail("TaskMask: row " + std::to_string(i) + " contains value " + std::to_string(v) +
               "; entries must be exactly 0 or 1");
        }
      }
      if (ones != 1)
        fail("TaskMask: row " + std::to_string(i) + " has " + std::to_string(ones) +
             " ones; each row must be one-hot");
      tasks_[i] = hot;
    }
  }

  static TaskMask from_tasks(const std::vector<size_t>& tasks, size_t num_tasks) {
    if (tasks.empty()) fail("TaskMask: empty batch");
    Tensor m = Tensor::zeros({tasks.size(), num_tasks});
    for (size_t i = 0; i < tasks.size(); ++i) {
      if (tasks[i] >= num_tasks)
        fail("TaskMask: task " + std::to_string(tasks[i]) + " out of range for T=" +
             std::to_string(num_tasks));
      m.values()[i * num_tasks + tasks[i]] = 1.0;
    }
    return TaskMask(std::move(m));
  }

  size_t batch() const { return m_.dim(0); }
  size_t num_tasks() const { return m_.dim(1); }
  const std::vector<size_t>& tasks() const { return tasks_; }
  const Tensor& matrix() const { return m_; }

  std::vector<size_t> samples_of(size_t task) const {
    std::vector<size_t> idx;
    for (size_t i = 0; i < tasks_.size(); ++i)
      if (tasks_[i] == task) idx.push_back(i);
    return idx;
  }

 private:
  Tensor m_;
  std::vector<size_t> tasks_;
};

// Factor pair whose product forms a rank-limited additive weight delta:
// B in R^{(C_out*k) x (r*k)}, A in R^{(r*k) x (C_in*k)}.
struct LowRankExpert {
  Tensor b_factor;
  Tensor a_factor;
  size_t rank = 0;
};

struct EksParamCounts {
  uint64_t shared = 0;
  uint64_t expert_total = 0;
  uint64_t deployed = 0;
};

inline EksParamCounts eks_param_count(const ConvSpec& spec, size_t num_tasks, size_t rank) {
  spec.validate();
  EksParamCounts c;
  c.shared = static_cast<uint64_t>(spec.c_out) * spec.c_in * spec.k * spec.k;
  c.expert_total = static_cast<uint64_t>(num_tasks) * rank * spec.k * spec.k * (spec.c_out + spec.c_in);
  c.deployed = c.shared;
  return c;
}

struct EksCostReport {
  double eks_cost = 0;    // T*r*d^2 + b*l*d^2, c2 = 1
  double flora_cost = 0;  // r*b*l*d^2, c2 = 1
  bool eks_cheaper = false;
};

// Cost comparison against per-sample low-rank adapters. The decision
// T*r/(b*l) + 1 <= r is evaluated in exact integer arithmetic as
// T*r + b*l <= r*b*l, so the boundary case counts as cheaper.
inline EksCostReport eks_cost_model(uint64_t t, uint64_t r, uint64_t b, uint64_t l, uint64_t d) {
  if (t == 0 || r == 0 || b == 0 || l == 0 || d == 0)
    fail("eks_cost_model: all arguments must be positive");
  EksCostReport rep;
  double d2 = static_cast<double>(d) * static_cast<double>(d);
  rep.eks_cost = static_cast<double>(t) * static_cast<double>(r) * d2 +
                 static_cast<double>(b) * static_cast<double>(l) * d2;
  rep.flora_cost = static_cast<double>(r) * static_cast<double>(b) * static_cast<double>(l) * d2;
  rep.eks_cheaper = (t * r + b * l) <= r * b * l;
  return rep;
}

class EksConvLayer {
 public:
  // A_t ~ U(-1/sqrt(r*k), 1/sqrt(r*k)), B_t = 0: every expert delta starts at
  // zero and the student begins as the pure shared backbone.
  EksConvLayer(ConvSpec spec, size_t num_tasks, size_t rank, Rng& rng) : spec_(spec) {
    spec_.validate();
    if (spec_.groups != 1) fail("EksConvLayer: base convolution must have groups == 1");
    if (num_tasks == 0) fail("EksConvLayer: need at least one task");
    if (rank == 0 || rank > std::min(spec_.c_in, spec_.c_out))
      fail("EksConvLayer: rank " + std::to_string(rank) + " outside [1, min(C_in, C_out)] for c_in=" +
           std::to_string(spec_.c_in) + ", c_out=" + std::to_string(spec_.c_out));
    double w0_limit = std::sqrt(6.0 / static_cast<double>(spec_.c_in * spec_.k * spec_.k));
    w0_ = Tensor::uniform({spec_.c_out, spec_.c_in, spec_.k, spec_.k}, rng, -w0_limit, w0_limit, true);
    double a_limit = 1.0 / std::sqrt(static_cast<double>(rank * spec_.k));
    experts_.reserve(num_tasks);
    for (size_t t = 0; t < num_tasks; ++t) {
      LowRankExpert e;
      e.rank = rank;
      e.b_factor = Tensor::zeros({spec_.c_out * spec_.k, rank * spec_.k}, true);
      e.a_factor = Tensor::uniform({rank * spec_.k, spec_.c_in * spec_.k}, rng, -a_limit, a_limit, true);
      experts_.push_back(std::move(e));
    }
  }

  const ConvSpec& spec() const { return spec_; }
  size_t num_tasks() const { return experts_.size(); }
  size_t rank() const { return experts_[0].rank; }
  Tensor& w0() { return w0_; }
  const Tensor& w0() const { return w0_; }
  std::vector<LowRankExpert>& experts() { return experts_; }
  const std::vector<LowRankExpert>& experts() const { return experts_; }
  bool fused() const { return fused_task_ >= 0; }
  int fused_task() const { return fused_task_; }

  // reshape(B_t A_t) as a (C_out, C_in, k, k) weight delta, differentiable
  // through both factors.
  Tensor expert_delta(size_t t) const {
    check_task(t);
    const LowRankExpert& e = experts_[t];
    return reshape(matmul(e.b_factor, e.a_factor), {spec_.c_out, spec_.c_in, spec_.k, spec_.k});
  }

  // Single-pass forward over a mixed-task batch. The per-sample aggregated
  // weight W' is materialized as one (B*C_out, C_in, k, k) tensor:
  //   W'_flat = [1 | M] @ [W0_flat ; delta_1 ; ... ; delta_T]
  // so gradients of absent tasks' factors are exactly zero, and the batch
  // runs as one group convolution with groups = B.
  Tensor forward(const Tensor& input, const TaskMask& mask) const {
    if (fused())
      fail("EksConvLayer: layer is fused for task " + std::to_string(fused_task_) +
           "; unfuse() before calling the task-routed forward");
    if (mask.num_tasks() != experts_.size())
      fail("EksConvLayer: mask has T=" + std::to_string(mask.num_tasks()) + ", layer has T=" +
           std::to_string(experts_.size()));
    if (input.rank() != 4 || input.dim(0) != mask.batch())
      fail("EksConvLayer: input " + shape_str(input.shape()) + " does not match mask batch " +
           std::to_string(mask.batch()));
    size_t b = mask.batch();
    size_t t = experts_.size();
    size_t d = spec_.c_out * spec_.c_in * spec_.k * spec_.k;

    std::vector<Tensor> stack_rows;
    stack_rows.reserve(t + 1);
    stack_rows.push_back(reshape(w0_, {1, d}));
    for (size_t e = 0; e < t; ++e)
      stack_rows.push_back(reshape(matmul(experts_[e].b_factor, experts_[e].a_factor), {1, d}));
    Tensor stack = concat(stack_rows, 0);  // (T+1) x d

    Tensor m_aug = Tensor::zeros({b, t + 1});
    for (size_t i = 0; i < b; ++i) {
      m_aug.values()[i * (t + 1)] = 1.0;
      m_aug.values()[i * (t + 1) + 1 + mask.tasks()[i]] = 1.0;
    }

    Tensor w_prime = reshape(matmul(m_aug, stack), {b * spec_.c_out, spec_.c_in, spec_.k, spec_.k});
    Tensor flat_in = reshape(input, {1, b * spec_.c_in, input.dim(2), input.dim(3)});
    ConvSpec gspec = spec_;
    gspec.c_in = b * spec_.c_in;
    gspec.c_out = b * spec_.c_out;
    gspec.groups = b;
    Tensor out = grouped_conv2d(flat_in, w_prime, gspec);
    return reshape(out, {b, spec_.c_out, out.dim(2), out.dim(3)});
  }

  // W_t = W0 + B_t A_t, in place; expert factors are untouched.
  void fuse(size_t t) {
    check_task(t);
    if (fused())
      fail("EksConvLayer::fuse: already fused for task " + std::to_string(fused_task_));
    apply_delta(t, +1.0);
    fused_task_ = static_cast<int>(t);
  }

  // W0 = W_t - B_t A_t
  void unfuse() {
    if (!fused()) fail("EksConvLayer::unfuse: layer is not fused");
    apply_delta(static_cast<size_t>(fused_task_), -1.0);
    fused_task_ = -1;
  }

  void switch_task(size_t t_new) {
    if (!fused()) fail("EksConvLayer::switch_task: layer is not fused");
    check_task(t_new);
    unfuse();
    fuse(t_new);
  }

  // forward of the fused deployment form; a plain convolution
  Tensor forward_fused(const Tensor& input) const {
    if (!fused()) fail("EksConvLayer::forward_fused: layer is not fused");
    return conv2d(input, w0_, spec_);
  }

  std::vector<Tensor> params() {
    std::vector<Tensor> p;
    p.push_back(w0_);
    for (LowRankExpert& e : experts_) {
      p.push_back(e.b_factor);
      p.push_back(e.a_factor);
    }
    return p;
  }

  std::vector<Tensor> expert_params() {
    std::vector<Tensor> p;
    for (LowRankExpert& e : experts_) {
      p.push_back(e.b_factor);
      p.push_back(e.a_factor);
    }
    return p;
  }

  EksParamCounts param_counts() const {
    return eks_param_count(spec_, experts_.size(), experts_[0].rank);
  }

 private:
  void check_task(size_t t) const {
    if (t >= experts_.size())
      fail("EksConvLayer: task index " + std::to_string(t) + " out of range for T=" +
           std::to_string(experts_.size()));
  }

  void apply_delta(size_t t, double sign) {
    const LowRankExpert& e = experts_[t];
    size_t m = spec_.c_out * spec_.k;
    size_t kk = e.rank * spec_.k;
    size_t n = spec_.c_in * spec_.k;
    std::vector<double> delta(m * n, 0.0);
    detail::gemm_nn(e.b_factor.values().data(), e.a_factor.values().data(), delta.data(), m, kk, n);
    auto& wv = w0_.values();
    for (size_t i = 0; i < wv.size(); ++i) wv[i] += sign * delta[i];
    detail::check_finite(wv, "fuse");
  }

  ConvSpec spec_;
  Tensor w0_;
  std::vector<LowRankExpert> experts_;
  int fused_task_ = -1;
};

// The pre-optimization formulation: loop over tasks, convolve each task's
// sample subset with W0 + B_t A_t, reassemble in batch order. Differentiable;
// used as the equivalence oracle for the single-pass forward.
inline Tensor eks_forward_naive(const EksConvLayer& layer, const Tensor& input,
                                const TaskMask& mask) {
  if (layer.fused()) fail("eks_forward_naive: layer is fused");
  size_t b = mask.batch();
  size_t chw = input.dim(1) * input.dim(2) * input.dim(3);
  Tensor flat = reshape(input, {b, chw});

  std::vector<Tensor> task_outputs;
  std::vector<size_t> order;
  order.reserve(b);
  for (size_t t = 0; t < layer.num_tasks(); ++t) {
    std::vector<size_t> idx = mask.samples_of(t);
    if (idx.empty()) continue;
    Tensor sub = reshape(gather_rows(flat, idx), {idx.size(), input.dim(1), input.dim(2), input.dim(3)});
    Tensor w_t = add(layer.w0(), layer.expert_delta(t));
    task_outputs.push_back(conv2d(sub, w_t, layer.spec()));
    order.insert(order.end(), idx.begin(), idx.end());
  }
  size_t oh = task_outputs[0].dim(2), ow = task_outputs[0].dim(3);
  size_t out_cols = layer.spec().c_out * oh * ow;
  std::vector<Tensor> flat_outputs;
  flat_outputs.reserve(task_outputs.size());
  for (Tensor& g : task_outputs) flat_outputs.push_back(reshape(g, {g.dim(0), out_cols}));
  Tensor stacked = concat(flat_outputs, 0);
  // invert the task-major permutation back to batch order
  std::vector<size_t> inverse(b);
  for (size_t pos = 0; pos < b; ++pos) inverse[order[pos]] = pos;
  return reshape(gather_rows(stacked, inverse), {b, layer.spec().c_out, oh, ow});
}

struct GradReport {
  bool absent_experts_zero = true;
  double max_absent_grad = 0.0;      // exactly 0 when separation holds
  double expert_rel_err = 0.0;       // present-task factors vs naive formulation
  double w0_rel_err = 0.0;
  size_t absent_tasks = 0;
  size_t present_tasks = 0;

  bool pass(double rel_tol) const {
    return absent_experts_zero && expert_rel_err < rel_tol && w0_rel_err < rel_tol;
  }
};

namespace detail {

inline double max_rel_err(const std::vector<double>& got, const std::vector<double>& want) {
  double err = 0.0;
  for (size_t i = 0; i < got.size(); ++i)
    err = std::max(err, std::abs(got[i] - want[i]) / (std::abs(want[i]) + 1e-8));
  return err;
}

}  // namespace detail

// Runs the single-pass forward and the naive per-task formulation under the
// same scalar loss and compares gradient routing: absent tasks' factors must
// be exactly zero, present tasks' factors and W0 must agree.
inline GradReport eks_backward_check(EksConvLayer& layer, const Tensor& input, const TaskMask& mask,
                                     const std::function<Tensor(const Tensor&)>& loss_fn) {
  auto run = [&](bool naive) {
    for (Tensor& p : layer.params()) p.zero_grad();
    Tape tape;
    TapeScope scope(tape);
    Tensor out = naive ? eks_forward_naive(layer, input, mask) : layer.forward(input, mask);
    Tensor loss = loss_fn(out);
    tape.backward(loss);
    std::vector<std::vector<double>> grads;
    grads.push_back(layer.w0().grad());
    for (LowRankExpert& e : layer.experts()) {
      grads.push_back(e.b_factor.grad());
      grads.push_back(e.a_factor.grad());
    }
    return grads;
  };

  std::vector<std::vector<double>> fast = run(false);
  std::vector<std::vector<double>> naive = run(true);
  for (Tensor& p : layer.params()) p.zero_grad();

  GradReport rep;
  rep.w0_rel_err = detail::max_rel_err(fast[0], naive[0]);
  for (size_t t = 0; t < layer.num_tasks(); ++t) {
    bool present = !mask.samples_of(t).empty();
    const auto& gb = fast[1 + 2 * t];
    const auto& ga = fast[2 + 2 * t];
    if (present) {
      ++rep.present_tasks;
      rep.expert_rel_err = std::max(rep.expert_rel_err, detail::max_rel_err(gb, naive[1 + 2 * t]));
      rep.expert_rel_err = std::max(rep.expert_rel_err, detail::max_rel_err(ga, naive[2 + 2 * t]));
    } else {
      ++rep.absent_tasks;
      for (double g : gb) {
        if (g != 0.0) rep.absent_experts_zero = false;
        rep.max_absent_grad = std::max(rep.max_absent_grad, std::abs(g));
      }
      for (double g : ga) {
        if (g != 0.0) rep.absent_experts_zero = false;
        rep.max_absent_grad = std::max(rep.max_absent_grad, std::abs(g));
      }
    }
  }
  return rep;
}

}  // namespace eks
