#pragma once

// Decomposition trainer (plain SGD, cosine annealing to zero), evaluation,
// cost accounting, and the MIG disentanglement score. Defaults: lr 0.05,
// alpha 10, beta 1, rank 8.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "eks/checkpoint.hpp"
#include "eks/data.hpp"
#include "eks/losses.hpp"
#include "eks/model.hpp"

namespace eks {

struct TrainConfig {
  double lr = 0.05;
  size_t epochs = 100;
  size_t batch = 32;
  double alpha = 10.0;
  double beta = 1.0;
  size_t rank = 8;
  uint64_t seed = 1;
  bool per_task_batches = false;  // naive-oracle comparison mode
  bool train_experts = true;      // false trains the shared-backbone-only ablation

  void validate() const {
    if (!(lr > 0.0)) fail("TrainConfig: lr must be positive");
    if (batch == 0) fail("TrainConfig: batch must be positive");
    if (!(alpha > 0.0)) fail("TrainConfig: alpha must be positive");
    if (rank == 0) fail("TrainConfig: rank must be positive");
  }
};

// lr_t = lr0 * (1 + cos(pi * step / total)) / 2
inline double cosine_lr(size_t step, size_t total, double lr0) {
  if (total == 0) fail("cosine_lr: total must be positive");
  if (step > total) fail("cosine_lr: step " + std::to_string(step) + " beyond total " + std::to_string(total));
  return lr0 * (1.0 + std::cos(3.14159265358979323846 * static_cast<double>(step) /
                               static_cast<double>(total))) / 2.0;
}

// p <- p - lr * grad, over every tracked parameter
inline void sgd_step(std::vector<Tensor>& params, double lr) {
  for (Tensor& p : params) {
    if (!p.requires_grad()) fail("sgd_step: parameter does not track gradients");
    auto& v = p.values();
    const auto& g = p.grad();
    for (size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
    detail::check_finite(v, "sgd_step");
  }
}

inline size_t eval_threads() {
  if (const char* env = std::getenv("EKS_THREADS")) {
    long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<size_t>(v);
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : std::min<unsigned>(hw, 8);
}

namespace detail {

// index-sharded parallel map; results land in caller-owned slots so the
// reduction order is fixed regardless of thread count
template <typename Fn>
inline void parallel_for(size_t n, Fn&& fn) {
  size_t workers = std::min(eval_threads(), n);
  if (workers <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      for (size_t i = w; i < n; i += workers) fn(i);
    });
  for (std::thread& t : pool) t.join();
}

}  // namespace detail

struct TaskAccuracy {
  std::vector<double> per_task;
  double average = 0.0;  // unweighted mean over tasks
};

// Validation accuracy with each sample routed through its own task's experts
// and head. Evaluation fans out across worker threads (EKS_THREADS caps it).
inline TaskAccuracy evaluate_student(const DecompModel& model, const Dataset& data,
                                     size_t batch_size = 64) {
  std::vector<size_t> idx = data.val_indices();
  if (idx.empty()) fail("evaluate_student: empty validation split");
  size_t n_batches = (idx.size() + batch_size - 1) / batch_size;
  std::vector<std::vector<std::pair<size_t, bool>>> results(n_batches);  // (task, correct)
  detail::parallel_for(n_batches, [&](size_t b) {
    size_t lo = b * batch_size, hi = std::min(idx.size(), lo + batch_size);
    std::vector<size_t> chunk(idx.begin() + lo, idx.begin() + hi);
    Tensor images;
    BatchLabels labels;
    data.batch(chunk, &images, &labels);
    TaskMask mask = TaskMask::from_tasks(labels.tasks, model.config().num_tasks());
    StudentForward out = model.forward(images, mask);
    auto& slot = results[b];
    for (size_t t = 0; t < model.config().num_tasks(); ++t) {
      const auto& rows = out.heads.sample_idx[t];
      if (rows.empty()) continue;
      const Tensor& lg = out.heads.logits[t];
      size_t classes = lg.dim(1);
      for (size_t i = 0; i < rows.size(); ++i) {
        size_t pred = argmax_row(lg.values().data() + i * classes, classes);
        slot.emplace_back(t, pred == labels.labels[rows[i]]);
      }
    }
  });
  std::vector<size_t> correct(data.num_tasks(), 0), total(data.num_tasks(), 0);
  for (const auto& slot : results)
    for (auto [t, ok] : slot) {
      ++total[t];
      if (ok) ++correct[t];
    }
  TaskAccuracy acc;
  acc.per_task.resize(data.num_tasks(), 0.0);
  double sum_acc = 0.0;
  for (size_t t = 0; t < data.num_tasks(); ++t) {
    if (total[t] == 0) fail("evaluate_student: task " + std::to_string(t) + " has no validation samples");
    acc.per_task[t] = static_cast<double>(correct[t]) / static_cast<double>(total[t]);
    sum_acc += acc.per_task[t];
  }
  acc.average = sum_acc / static_cast<double>(data.num_tasks());
  return acc;
}

// accuracy of a fused expert (or the teacher restricted to one task)
inline double evaluate_deploy(const PlainConvNet& net, const Dataset& data, size_t task,
                              size_t batch_size = 64) {
  std::vector<size_t> idx;
  for (size_t i : data.val_indices())
    if (data.samples()[i].task == task) idx.push_back(i);
  if (idx.empty()) fail("evaluate_deploy: no validation samples for task " + std::to_string(task));
  size_t n_batches = (idx.size() + batch_size - 1) / batch_size;
  std::vector<size_t> correct(n_batches, 0);
  detail::parallel_for(n_batches, [&](size_t b) {
    size_t lo = b * batch_size, hi = std::min(idx.size(), lo + batch_size);
    std::vector<size_t> chunk(idx.begin() + lo, idx.begin() + hi);
    Tensor images;
    BatchLabels labels;
    data.batch(chunk, &images, &labels);
    Tensor lg = net.logits(images);
    size_t classes = lg.dim(1);
    for (size_t i = 0; i < chunk.size(); ++i)
      if (argmax_row(lg.values().data() + i * classes, classes) == labels.labels[i]) ++correct[b];
  });
  size_t ok = std::accumulate(correct.begin(), correct.end(), size_t{0});
  return static_cast<double>(ok) / static_cast<double>(idx.size());
}

inline double evaluate_teacher_global(const PlainConvNet& net, const Dataset& data,
                                      size_t batch_size = 64) {
  std::vector<size_t> idx = data.val_indices();
  size_t n_batches = (idx.size() + batch_size - 1) / batch_size;
  std::vector<size_t> correct(n_batches, 0);
  detail::parallel_for(n_batches, [&](size_t b) {
    size_t lo = b * batch_size, hi = std::min(idx.size(), lo + batch_size);
    std::vector<size_t> chunk(idx.begin() + lo, idx.begin() + hi);
    Tensor images;
    BatchLabels labels;
    data.batch(chunk, &images, &labels);
    Tensor lg = net.logits(images);
    size_t classes = lg.dim(1);
    for (size_t i = 0; i < chunk.size(); ++i) {
      size_t global = data.global_offset(labels.tasks[i]) + labels.labels[i];
      if (argmax_row(lg.values().data() + i * classes, classes) == global) ++correct[b];
    }
  });
  size_t ok = std::accumulate(correct.begin(), correct.end(), size_t{0});
  return static_cast<double>(ok) / static_cast<double>(idx.size());
}

struct EpochLog {
  size_t epoch = 0;
  double lr = 0.0;
  double ce = 0.0;
  double kl = 0.0;
  double total = 0.0;
  std::vector<double> task_acc;
  double avg_acc = 0.0;
};

inline std::string epoch_log_line(const EpochLog& e) {
  std::ostringstream os;
  os.precision(17);
  os << "epoch=" << e.epoch << " lr=" << e.lr << " ce=" << e.ce << " kl=" << e.kl
     << " total=" << e.total;
  for (size_t t = 0; t < e.task_acc.size(); ++t) os << " acc" << t << "=" << e.task_acc[t];
  os << " avg=" << e.avg_acc;
  return os.str();
}

struct CostReport {
  uint64_t params_shared_conv = 0;
  uint64_t params_expert_total = 0;
  uint64_t params_heads = 0;
  uint64_t params_proj = 0;
  uint64_t params_train_total = 0;
  uint64_t params_deploy_total = 0;   // fused expert: convs + one head
  uint64_t flops_deploy_per_sample = 0;
  uint64_t flops_train_forward_per_sample = 0;  // student side, experts included
};

inline CostReport cost_report(const DecompModel& model) {
  CostReport r;
  for (size_t i = 0; i < model.num_stages(); ++i) {
    if (model.stage_is_eks(i)) {
      EksParamCounts c = model.eks_layer(i).param_counts();
      r.params_shared_conv += c.shared;
      r.params_expert_total += c.expert_total;
    } else {
      r.params_shared_conv += model.plain_weight(i).numel();
    }
  }
  for (const TaskHead& h : model.heads()) r.params_heads += h.weight.numel() + h.bias.numel();
  if (model.has_projection()) r.params_proj = model.proj_weight().numel();
  r.params_train_total =
      r.params_shared_conv + r.params_expert_total + r.params_heads + r.params_proj;

  PlainConvNet deploy = model.baseline(model.config().task_classes[0]);
  r.params_deploy_total = deploy.param_count();
  r.flops_deploy_per_sample = deploy.flops_per_sample();

  size_t h = model.config().in_size, w = model.config().in_size;
  for (const ConvSpec& spec : model.stage_specs()) {
    r.flops_train_forward_per_sample += conv_flops(spec, h, w);
    auto [oh, ow] = spec.out_hw(h, w);
    h = oh;
    w = ow;
  }
  return r;
}

struct MetricsReport {
  std::vector<double> task_acc;
  double avg_acc = 0.0;
  CostReport cost;
  double mig = 0.0;
};

inline void write_summary(const MetricsReport& m, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) fail("cannot open for writing: " + path);
  os.precision(17);
  for (size_t t = 0; t < m.task_acc.size(); ++t) os << "acc" << t << "=" << m.task_acc[t] << "\n";
  os << "avg=" << m.avg_acc << "\n";
  os << "params_train=" << m.cost.params_train_total << "\n";
  os << "params_deploy=" << m.cost.params_deploy_total << "\n";
  os << "flops_train_forward=" << m.cost.flops_train_forward_per_sample << "\n";
  os << "flops_deploy=" << m.cost.flops_deploy_per_sample << "\n";
  os << "mig=" << m.mig << "\n";
}

// ---------------------------------------------------------------------------
// MIG: discretize each feature dimension into Q=20 quantile bins, estimate
// I(feature_j; task) with the plug-in estimator, and report the normalized
// gap between the two largest per-dimension informations, clamped to [0,1].

inline double mig_score(const Tensor& features, const std::vector<size_t>& task_labels) {
  if (features.rank() != 2) fail("mig_score: features must be N x d");
  size_t n = features.dim(0), d = features.dim(1);
  if (n != task_labels.size()) fail("mig_score: label count does not match feature rows");
  if (n < 100) fail("mig_score: need at least 100 samples, got " + std::to_string(n));
  if (d < 2) fail("mig_score: need at least 2 feature dimensions");
  size_t num_tasks = 0;
  for (size_t t : task_labels) num_tasks = std::max(num_tasks, t + 1);
  std::vector<double> task_count(num_tasks, 0.0);
  for (size_t t : task_labels) task_count[t] += 1.0;
  size_t distinct = 0;
  for (double c : task_count)
    if (c > 0) ++distinct;
  if (distinct < 2) fail("mig_score: undefined for a single task");

  double h_task = 0.0;
  for (double c : task_count)
    if (c > 0) {
      double p = c / static_cast<double>(n);
      h_task -= p * std::log(p);
    }

  constexpr size_t kBins = 20;
  std::vector<double> mi(d, 0.0);
  std::vector<std::pair<double, size_t>> order(n);
  std::vector<double> joint(kBins * num_tasks);
  for (size_t j = 0; j < d; ++j) {
    for (size_t i = 0; i < n; ++i) order[i] = {features.values()[i * d + j], i};
    std::sort(order.begin(), order.end());
    std::fill(joint.begin(), joint.end(), 0.0);
    for (size_t rank = 0; rank < n; ++rank) {
      size_t bin = rank * kBins / n;
      joint[bin * num_tasks + task_labels[order[rank].second]] += 1.0;
    }
    std::vector<double> bin_marg(kBins, 0.0);
    for (size_t b = 0; b < kBins; ++b)
      for (size_t t = 0; t < num_tasks; ++t) bin_marg[b] += joint[b * num_tasks + t];
    double info = 0.0;
    for (size_t b = 0; b < kBins; ++b)
      for (size_t t = 0; t < num_tasks; ++t) {
        double c = joint[b * num_tasks + t];
        if (c == 0.0) continue;
        double p_joint = c / static_cast<double>(n);
        double p_bin = bin_marg[b] / static_cast<double>(n);
        double p_task = task_count[t] / static_cast<double>(n);
        info += p_joint * std::log(p_joint / (p_bin * p_task));
      }
    mi[j] = info;
  }
  std::sort(mi.begin(), mi.end(), std::greater<double>());
  double gap = (mi[0] - mi[1]) / h_task;
  return std::min(1.0, std::max(0.0, gap));
}

// student features with each sample routed through its own task; defaults to
// the validation split, callers may pass any index set
inline Tensor collect_features(const DecompModel& model, const Dataset& data,
                               std::vector<size_t>* task_labels, size_t batch_size = 64,
                               const std::vector<size_t>* indices = nullptr) {
  std::vector<size_t> idx = indices ? *indices : data.val_indices();
  size_t d = model.config().feature_dim();
  Tensor out = Tensor::zeros({idx.size(), d});
  task_labels->resize(idx.size());
  size_t n_batches = (idx.size() + batch_size - 1) / batch_size;
  detail::parallel_for(n_batches, [&](size_t b) {
    size_t lo = b * batch_size, hi = std::min(idx.size(), lo + batch_size);
    std::vector<size_t> chunk(idx.begin() + lo, idx.begin() + hi);
    Tensor images;
    BatchLabels labels;
    data.batch(chunk, &images, &labels);
    TaskMask mask = TaskMask::from_tasks(labels.tasks, model.config().num_tasks());
    StudentForward fwd = model.forward(images, mask);
    for (size_t i = 0; i < chunk.size(); ++i) {
      std::copy(fwd.features.values().begin() + i * d, fwd.features.values().begin() + (i + 1) * d,
                out.values().begin() + (lo + i) * d);
      (*task_labels)[lo + i] = labels.tasks[i];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// training loops

inline void train_teacher(PlainConvNet& teacher, const Dataset& data, const TrainConfig& cfg,
                          std::vector<EpochLog>* log = nullptr) {
  cfg.validate();
  if (!teacher.has_head()) fail("train_teacher: teacher needs its global head");
  Rng rng(cfg.seed);
  std::vector<size_t> train_idx = data.train_indices();
  if (train_idx.empty()) fail("train_teacher: empty training split");
  std::vector<Tensor> params = teacher.params();
  size_t steps_per_epoch = (train_idx.size() + cfg.batch - 1) / cfg.batch;
  size_t total_steps = std::max<size_t>(1, cfg.epochs * steps_per_epoch);
  size_t step = 0;
  for (size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(train_idx);
    double ce_acc = 0.0;
    size_t seen = 0;
    for (size_t lo = 0; lo < train_idx.size(); lo += cfg.batch) {
      size_t hi = std::min(train_idx.size(), lo + cfg.batch);
      std::vector<size_t> chunk(train_idx.begin() + lo, train_idx.begin() + hi);
      Tensor images;
      BatchLabels labels;
      data.batch(chunk, &images, &labels);
      std::vector<size_t> global(chunk.size());
      for (size_t i = 0; i < chunk.size(); ++i)
        global[i] = data.global_offset(labels.tasks[i]) + labels.labels[i];
      double lr_t = cosine_lr(step, total_steps, cfg.lr);
      try {
        Tape tape;
        TapeScope scope(tape);
        Tensor logits = teacher.logits(images);
        Tensor loss = scale(sum(pick_per_row(log_temp_softmax(logits, 1.0), global)),
                            -1.0 / static_cast<double>(chunk.size()));
        ce_acc += loss.item() * static_cast<double>(chunk.size());
        seen += chunk.size();
        tape.backward(loss);
      } catch (const Error& e) {
        fail("train_teacher: aborted at epoch " + std::to_string(epoch) + " step " +
             std::to_string(step) + ": " + e.what());
      }
      sgd_step(params, lr_t);
      zero_grads(params);
      ++step;
    }
    if (log) {
      EpochLog el;
      el.epoch = epoch;
      el.lr = cosine_lr(step, total_steps, cfg.lr);
      el.ce = seen ? ce_acc / static_cast<double>(seen) : 0.0;
      el.total = el.ce;
      log->push_back(el);
    }
  }
}

// Decomposition training: mixed-task batches through the single-pass EKS
// forward by default; per-task batches when the naive-comparison mode is on.
// The teacher is frozen and evaluated outside the tape.
inline MetricsReport train_decomposition(const PlainConvNet& teacher, DecompModel& student,
                                         const Dataset& data, const TrainConfig& cfg,
                                         std::vector<EpochLog>* log = nullptr) {
  cfg.validate();
  if (!student.has_projection() &&
      student.config().feature_dim() != teacher.config().feature_dim())
    fail("train_decomposition: teacher dim " + std::to_string(teacher.config().feature_dim()) +
         " needs a projection from student dim " + std::to_string(student.config().feature_dim()));
  if (student.has_projection() && student.config().proj_dim != teacher.config().feature_dim())
    fail("train_decomposition: projection dim " + std::to_string(student.config().proj_dim) +
         " does not match teacher dim " + std::to_string(teacher.config().feature_dim()));

  Rng rng(cfg.seed);
  std::vector<size_t> train_idx = data.train_indices();
  if (train_idx.empty()) fail("train_decomposition: empty training split");
  std::vector<Tensor> params = student.params(cfg.train_experts);

  // batch order: uniformly shuffled mixed-task batches, or per-task batches
  auto plan_epoch = [&]() {
    std::vector<std::vector<size_t>> batches;
    if (!cfg.per_task_batches) {
      rng.shuffle(train_idx);
      for (size_t lo = 0; lo < train_idx.size(); lo += cfg.batch)
        batches.emplace_back(train_idx.begin() + lo,
                             train_idx.begin() + std::min(train_idx.size(), lo + cfg.batch));
    } else {
      for (size_t t = 0; t < data.num_tasks(); ++t) {
        std::vector<size_t> own;
        for (size_t i : train_idx)
          if (data.samples()[i].task == t) own.push_back(i);
        rng.shuffle(own);
        for (size_t lo = 0; lo < own.size(); lo += cfg.batch)
          batches.emplace_back(own.begin() + lo, own.begin() + std::min(own.size(), lo + cfg.batch));
      }
      rng.shuffle(batches);
    }
    return batches;
  };

  size_t steps_per_epoch = (train_idx.size() + cfg.batch - 1) / cfg.batch;
  size_t total_steps = std::max<size_t>(1, cfg.epochs * steps_per_epoch);
  size_t step = 0;
  for (size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double ce_acc = 0.0, kl_acc = 0.0, total_acc = 0.0;
    size_t seen = 0;
    for (const std::vector<size_t>& chunk : plan_epoch()) {
      Tensor images;
      BatchLabels labels;
      data.batch(chunk, &images, &labels);
      TaskMask mask = TaskMask::from_tasks(labels.tasks, student.config().num_tasks());
      Tensor teacher_f = teacher.features(images);  // frozen, off-tape
      double lr_t = cosine_lr(step, total_steps, cfg.lr);
      try {
        Tape tape;
        TapeScope scope(tape);
        StudentForward out = student.forward(images, mask);
        TotalLoss loss = total_loss(out.heads, out.proj_features, teacher_f, labels, cfg.alpha, cfg.beta);
        ce_acc += loss.terms.ce * static_cast<double>(chunk.size());
        kl_acc += loss.terms.kl * static_cast<double>(chunk.size());
        total_acc += loss.terms.total * static_cast<double>(chunk.size());
        seen += chunk.size();
        tape.backward(loss.total);
      } catch (const Error& e) {
        fail("train_decomposition: aborted at epoch " + std::to_string(epoch) + " step " +
             std::to_string(step) + ": " + e.what());
      }
      sgd_step(params, lr_t);
      zero_grads(params);
      ++step;
    }
    TaskAccuracy acc = evaluate_student(student, data);
    if (log) {
      EpochLog el;
      el.epoch = epoch;
      el.lr = cosine_lr(std::min(step, total_steps), total_steps, cfg.lr);
      el.ce = seen ? ce_acc / static_cast<double>(seen) : 0.0;
      el.kl = seen ? kl_acc / static_cast<double>(seen) : 0.0;
      el.total = seen ? total_acc / static_cast<double>(seen) : 0.0;
      el.task_acc = acc.per_task;
      el.avg_acc = acc.average;
      log->push_back(el);
    }
  }

  MetricsReport report;
  TaskAccuracy acc = evaluate_student(student, data);
  report.task_acc = acc.per_task;
  report.avg_acc = acc.average;
  report.cost = cost_report(student);
  // the MIG estimator needs at least 100 samples; reported as 0 below that
  if (data.val_indices().size() >= 100) {
    std::vector<size_t> task_labels;
    Tensor features = collect_features(student, data, &task_labels);
    report.mig = mig_score(features, task_labels);
  }
  return report;
}

// 5-epoch moving average of the total loss; soft (warning-level) check
inline bool loss_trend_non_increasing(const std::vector<EpochLog>& log) {
  if (log.size() < 6) return true;
  auto window = [&](size_t end) {
    double s = 0.0;
    for (size_t i = end - 5; i < end; ++i) s += log[i].total;
    return s / 5.0;
  };
  for (size_t end = 6; end <= log.size(); ++end)
    if (window(end) > window(end - 1) * 1.02 + 1e-9) return false;
  return true;
}

}  // namespace eks
