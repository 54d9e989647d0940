#pragma once

// Temperature softmax, per-task classification heads, the KL transfer loss
// between teacher and student features, and the combined training objective
//   L = (1/B) * sum_i [ CE(y_i^t, p_i) + beta * alpha^2 * KL(f_i^b, f_i^d) ].
// Classification probabilities use the same temperature alpha as the
// transfer term.

#include <cmath>
#include <vector>

#include "eks/tensor.hpp"

namespace eks {

namespace detail {

inline void softmax_dims(const Tensor& t, size_t* rows, size_t* cols) {
  if (t.rank() == 1) {
    *rows = 1;
    *cols = t.dim(0);
  } else if (t.rank() == 2) {
    *rows = t.dim(0);
    *cols = t.dim(1);
  } else {
    fail("temp_softmax: expected rank-1 or rank-2 tensor, got " + shape_str(t.shape()));
  }
}

}  // namespace detail

// p_j = exp(g_j/alpha) / sum_k exp(g_k/alpha), stabilized by max-subtraction.
// Rank-2 inputs are treated row-wise.
inline Tensor temp_softmax(const Tensor& logits, double alpha) {
  if (!(alpha > 0.0)) fail("temp_softmax: temperature must be positive, got " + std::to_string(alpha));
  size_t rows, cols;
  detail::softmax_dims(logits, &rows, &cols);
  bool rec = detail::should_record({&logits});
  Tensor out = Tensor::uninit(logits.shape(), rec);
  const auto& lv = logits.values();
  auto& ov = out.values();
  for (size_t i = 0; i < rows; ++i) {
    const double* row = lv.data() + i * cols;
    double* po = ov.data() + i * cols;
    double m = row[0];
    for (size_t j = 1; j < cols; ++j) m = std::max(m, row[j]);
    double s = 0.0;
    for (size_t j = 0; j < cols; ++j) {
      po[j] = std::exp((row[j] - m) / alpha);
      s += po[j];
    }
    for (size_t j = 0; j < cols; ++j) po[j] /= s;
  }
  detail::check_finite(ov, "temp_softmax");
  if (rec) {
    auto ln = logits.node(), on = out.node();
    active_tape()->record("temp_softmax", {ln}, on, [ln, on, rows, cols, alpha] {
      for (size_t i = 0; i < rows; ++i) {
        const double* p = on->value.data() + i * cols;
        const double* g = on->grad.data() + i * cols;
        double* dl = ln->grad.data() + i * cols;
        double dot = 0.0;
        for (size_t j = 0; j < cols; ++j) dot += g[j] * p[j];
        for (size_t j = 0; j < cols; ++j) dl[j] += p[j] * (g[j] - dot) / alpha;
      }
    });
  }
  return out;
}

inline Tensor log_temp_softmax(const Tensor& logits, double alpha) {
  if (!(alpha > 0.0))
    fail("log_temp_softmax: temperature must be positive, got " + std::to_string(alpha));
  size_t rows, cols;
  detail::softmax_dims(logits, &rows, &cols);
  bool rec = detail::should_record({&logits});
  Tensor out = Tensor::uninit(logits.shape(), rec);
  const auto& lv = logits.values();
  auto& ov = out.values();
  for (size_t i = 0; i < rows; ++i) {
    const double* row = lv.data() + i * cols;
    double* lo = ov.data() + i * cols;
    double m = row[0];
    for (size_t j = 1; j < cols; ++j) m = std::max(m, row[j]);
    double s = 0.0;
    for (size_t j = 0; j < cols; ++j) s += std::exp((row[j] - m) / alpha);
    double lse = std::log(s);
    for (size_t j = 0; j < cols; ++j) lo[j] = (row[j] - m) / alpha - lse;
  }
  detail::check_finite(ov, "log_temp_softmax");
  if (rec) {
    auto ln = logits.node(), on = out.node();
    active_tape()->record("log_temp_softmax", {ln}, on, [ln, on, rows, cols, alpha] {
      for (size_t i = 0; i < rows; ++i) {
        const double* lp = on->value.data() + i * cols;
        const double* g = on->grad.data() + i * cols;
        double* dl = ln->grad.data() + i * cols;
        double gsum = 0.0;
        for (size_t j = 0; j < cols; ++j) gsum += g[j];
        for (size_t j = 0; j < cols; ++j) dl[j] += (g[j] - std::exp(lp[j]) * gsum) / alpha;
      }
    });
  }
  return out;
}

// KL(softmax(f_teacher/alpha) || softmax(f_student/alpha)). Zero iff the two
// temperature-softmaxed distributions coincide; differentiable through both
// sides (the teacher side is normally a frozen constant).
inline Tensor transfer_kl(const Tensor& f_teacher, const Tensor& f_student, double alpha) {
  if (f_teacher.shape() != f_student.shape())
    fail("transfer_kl: dimension mismatch after projection, " + shape_str(f_teacher.shape()) +
         " vs " + shape_str(f_student.shape()));
  Tensor p = temp_softmax(f_teacher, alpha);
  Tensor log_ratio = sub(log_temp_softmax(f_teacher, alpha), log_temp_softmax(f_student, alpha));
  return sum(mul(p, log_ratio));
}

// Head for one task: logits = f @ W^T + b over that task's Y_t classes.
struct TaskHead {
  Tensor weight;  // Y_t x d
  Tensor bias;    // Y_t
  size_t task = 0;

  static TaskHead init(size_t classes, size_t feature_dim, size_t task, Rng& rng) {
    if (classes < 2) fail("TaskHead: need at least 2 classes");
    TaskHead h;
    double limit = std::sqrt(6.0 / static_cast<double>(feature_dim));
    h.weight = Tensor::uniform({classes, feature_dim}, rng, -limit, limit, true);
    h.bias = Tensor::zeros({classes}, true);
    h.task = task;
    return h;
  }

  size_t classes() const { return weight.dim(0); }

  Tensor logits(const Tensor& features) const {
    return add_row_bias(matmul(features, transpose(weight)), bias);
  }
};

struct BatchLabels {
  std::vector<size_t> tasks;   // task index per sample
  std::vector<size_t> labels;  // within-task class label y_i^t
};

// Per-task routed logits: logits[t] covers the samples listed in sample_idx[t]
// (empty tensors for tasks absent from the batch).
struct PerTaskLogits {
  std::vector<Tensor> logits;
  std::vector<std::vector<size_t>> sample_idx;
};

struct LossTerms {
  double ce = 0;     // mean over batch of CE terms
  double kl = 0;     // mean over batch of (temperature-alpha) KL terms
  double total = 0;  // ce + beta * alpha^2 * kl
  double alpha = 1;
  double beta = 0;
};

struct TotalLoss {
  Tensor total;
  LossTerms terms;
};

// CE is computed against each sample's own task head only; the KL transfer
// term is scaled by beta * alpha^2; the reduction is the mean over the B
// samples of the batch.
inline TotalLoss total_loss(const PerTaskLogits& outputs, const Tensor& student_features,
                            const Tensor& teacher_features, const BatchLabels& batch,
                            double alpha, double beta) {
  if (!(alpha > 0.0)) fail("total_loss: temperature must be positive");
  if (batch.tasks.size() != batch.labels.size()) fail("total_loss: batch label arrays disagree");
  size_t b = batch.tasks.size();
  if (b == 0) fail("total_loss: empty batch");
  if (student_features.rank() != 2 || teacher_features.rank() != 2 ||
      student_features.dim(0) != b || teacher_features.dim(0) != b)
    fail("total_loss: feature matrices must be B x d with B=" + std::to_string(b));
  if (student_features.dim(1) != teacher_features.dim(1))
    fail("total_loss: dimension mismatch after projection, " +
         shape_str(teacher_features.shape()) + " vs " + shape_str(student_features.shape()));

  Tensor ce_sum;
  bool have_ce = false;
  for (size_t t = 0; t < outputs.logits.size(); ++t) {
    const std::vector<size_t>& idx = outputs.sample_idx[t];
    if (idx.empty()) continue;
    const Tensor& lg = outputs.logits[t];
    std::vector<size_t> labels(idx.size());
    for (size_t i = 0; i < idx.size(); ++i) {
      size_t y = batch.labels[idx[i]];
      if (y >= lg.dim(1))
        fail("total_loss: label " + std::to_string(y) + " out of range for task " +
             std::to_string(t) + " with " + std::to_string(lg.dim(1)) + " classes");
      labels[i] = y;
    }
    Tensor nll = scale(sum(pick_per_row(log_temp_softmax(lg, alpha), labels)), -1.0);
    ce_sum = have_ce ? add(ce_sum, nll) : nll;
    have_ce = true;
  }
  if (!have_ce) fail("total_loss: no task produced logits");

  Tensor p = temp_softmax(teacher_features, alpha);
  Tensor log_ratio =
      sub(log_temp_softmax(teacher_features, alpha), log_temp_softmax(student_features, alpha));
  Tensor kl_sum = sum(mul(p, log_ratio));

  double inv_b = 1.0 / static_cast<double>(b);
  Tensor total = add(scale(ce_sum, inv_b), scale(kl_sum, beta * alpha * alpha * inv_b));

  TotalLoss r;
  r.total = total;
  r.terms.ce = ce_sum.item() * inv_b;
  r.terms.kl = kl_sum.item() * inv_b;
  r.terms.total = total.item();
  r.terms.alpha = alpha;
  r.terms.beta = beta;
  return r;
}

// argmax with lowest-index tie-breaking, for accuracy metrics
inline size_t argmax_row(const double* row, size_t n) {
  size_t best = 0;
  for (size_t j = 1; j < n; ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

}  // namespace eks
