#pragma once

// Teacher and student networks. The teacher is a plain conv stack with a
// single global head; the student shares the topology at reduced width, with
// task-routed EKS layers, a trainable feature projection up to the teacher
// dimension, and one classification head per task. export_expert() fuses the
// student for one task into a deployable plain network.

#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "eks/conv.hpp"
#include "eks/eks_layer.hpp"
#include "eks/losses.hpp"
#include "eks/rng.hpp"
#include "eks/tensor.hpp"

namespace eks {

struct StageSpec {
  size_t c_out = 0;
  size_t k = 3;
  size_t stride = 2;
  bool eks = true;
};

struct ArchConfig {
  size_t in_channels = 1;
  size_t in_size = 16;
  std::vector<StageSpec> stages;
  size_t proj_dim = 0;  // 0 disables the feature projection
  std::vector<size_t> task_classes;

  size_t feature_dim() const { return stages.back().c_out; }
  size_t num_tasks() const { return task_classes.size(); }
  size_t total_classes() const {
    size_t y = 0;
    for (size_t c : task_classes) y += c;
    return y;
  }

  void validate(bool require_eks) const {
    if (stages.empty()) fail("ArchConfig: no stages");
    if (task_classes.empty()) fail("ArchConfig: no tasks");
    for (size_t c : task_classes)
      if (c < 2) fail("ArchConfig: every task needs at least 2 classes");
    if (require_eks) {
      bool any = false;
      for (const StageSpec& s : stages) any |= s.eks;
      if (!any) fail("ArchConfig: student needs at least one eks stage");
    }
  }

  ArchConfig scaled_width(size_t mult) const {
    ArchConfig c = *this;
    for (StageSpec& s : c.stages) s.c_out *= mult;
    c.proj_dim = 0;
    return c;
  }

  // canonical single-line encoding used in checkpoint headers
  std::string encode() const {
    std::ostringstream os;
    os << "in=" << in_channels << "x" << in_size << "x" << in_size << ";stages=";
    for (size_t i = 0; i < stages.size(); ++i) {
      const StageSpec& s = stages[i];
      os << (i ? "," : "") << s.c_out << "c" << s.k << "s" << s.stride << (s.eks ? "E" : "P");
    }
    os << ";proj=" << proj_dim << ";tasks=";
    for (size_t i = 0; i < task_classes.size(); ++i) os << (i ? "," : "") << task_classes[i];
    return os.str();
  }

  static ArchConfig decode(const std::string& line) {
    ArchConfig cfg;
    cfg.stages.clear();
    cfg.task_classes.clear();
    auto expect = [&](bool ok, const std::string& what) {
      if (!ok) fail("ArchConfig: malformed field (" + what + ") in \"" + line + "\"");
    };
    std::istringstream is(line);
    std::string field;
    while (std::getline(is, field, ';')) {
      size_t eq = field.find('=');
      expect(eq != std::string::npos, field);
      std::string key = field.substr(0, eq), val = field.substr(eq + 1);
      if (key == "in") {
        size_t c, h, w;
        char x1, x2;
        std::istringstream vs(val);
        expect(static_cast<bool>(vs >> c >> x1 >> h >> x2 >> w) && x1 == 'x' && x2 == 'x' && h == w,
               "in");
        cfg.in_channels = c;
        cfg.in_size = h;
      } else if (key == "stages") {
        std::istringstream vs(val);
        std::string item;
        while (std::getline(vs, item, ',')) {
          StageSpec s;
          char cch, sch, ech;
          std::istringstream ss(item);
          expect(static_cast<bool>(ss >> s.c_out >> cch >> s.k >> sch >> s.stride >> ech) &&
                     cch == 'c' && sch == 's' && (ech == 'E' || ech == 'P'),
                 "stage " + item);
          s.eks = (ech == 'E');
          cfg.stages.push_back(s);
        }
      } else if (key == "proj") {
        cfg.proj_dim = static_cast<size_t>(std::stoull(val));
      } else if (key == "tasks") {
        std::istringstream vs(val);
        std::string item;
        while (std::getline(vs, item, ',')) cfg.task_classes.push_back(std::stoull(item));
      } else {
        fail("ArchConfig: unknown field \"" + key + "\"");
      }
    }
    cfg.validate(false);
    return cfg;
  }
};

namespace detail {

inline ConvSpec stage_conv_spec(const ArchConfig& cfg, size_t stage) {
  ConvSpec spec;
  spec.c_in = stage == 0 ? cfg.in_channels : cfg.stages[stage - 1].c_out;
  spec.c_out = cfg.stages[stage].c_out;
  spec.k = cfg.stages[stage].k;
  spec.stride = cfg.stages[stage].stride;
  spec.padding = cfg.stages[stage].k / 2;
  return spec;
}

}  // namespace detail

// Plain conv stack + global average pool (+ optional single head). Serves as
// the teacher, the deployed expert form, and the cost baseline.
class PlainConvNet {
 public:
  PlainConvNet(ArchConfig cfg, size_t head_classes, uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate(false);
    Rng rng(seed);
    for (size_t i = 0; i < cfg_.stages.size(); ++i) {
      ConvSpec spec = detail::stage_conv_spec(cfg_, i);
      spec.validate();
      double limit = std::sqrt(6.0 / static_cast<double>(spec.c_in * spec.k * spec.k));
      specs_.push_back(spec);
      weights_.push_back(
          Tensor::uniform({spec.c_out, spec.c_in, spec.k, spec.k}, rng, -limit, limit, true));
    }
    if (head_classes > 0) head_ = TaskHead::init(head_classes, cfg_.feature_dim(), 0, rng);
  }

  const ArchConfig& config() const { return cfg_; }
  std::vector<Tensor>& stage_weights() { return weights_; }
  const std::vector<Tensor>& stage_weights() const { return weights_; }
  const std::vector<ConvSpec>& stage_specs() const { return specs_; }
  TaskHead& head() { return head_; }
  const TaskHead& head() const { return head_; }
  bool has_head() const { return head_.weight.defined(); }

  Tensor features(const Tensor& x) const {
    check_input(x);
    Tensor cur = x;
    for (size_t i = 0; i < weights_.size(); ++i) cur = relu(conv2d(cur, weights_[i], specs_[i]));
    return global_avg_pool(cur);
  }

  Tensor logits(const Tensor& x) const {
    if (!has_head()) fail("PlainConvNet::logits: network has no head");
    return head_.logits(features(x));
  }

  std::vector<Tensor> params() {
    std::vector<Tensor> p = weights_;
    if (has_head()) {
      p.push_back(head_.weight);
      p.push_back(head_.bias);
    }
    return p;
  }

  void freeze() {
    for (Tensor& w : weights_) w.set_requires_grad(false);
    if (has_head()) {
      head_.weight.set_requires_grad(false);
      head_.bias.set_requires_grad(false);
    }
  }

  uint64_t conv_param_count() const {
    uint64_t n = 0;
    for (const Tensor& w : weights_) n += w.numel();
    return n;
  }

  uint64_t param_count() const {
    uint64_t n = conv_param_count();
    if (has_head()) n += head_.weight.numel() + head_.bias.numel();
    return n;
  }

  // per-sample inference FLOPs: convolutions + head matmul
  uint64_t flops_per_sample() const {
    uint64_t total = 0;
    size_t h = cfg_.in_size, w = cfg_.in_size;
    for (const ConvSpec& spec : specs_) {
      total += conv_flops(spec, h, w);
      auto [oh, ow] = spec.out_hw(h, w);
      h = oh;
      w = ow;
    }
    if (has_head()) total += 2ull * head_.classes() * cfg_.feature_dim();
    return total;
  }

 private:
  void check_input(const Tensor& x) const {
    if (x.rank() != 4 || x.dim(1) != cfg_.in_channels || x.dim(2) != cfg_.in_size ||
        x.dim(3) != cfg_.in_size)
      fail("PlainConvNet: input " + shape_str(x.shape()) + " does not match config (C=" +
           std::to_string(cfg_.in_channels) + ", S=" + std::to_string(cfg_.in_size) + ")");
  }

  ArchConfig cfg_;
  std::vector<ConvSpec> specs_;
  std::vector<Tensor> weights_;
  TaskHead head_;
};

struct StudentForward {
  Tensor features;       // B x d
  Tensor proj_features;  // B x proj_dim (== features when projection disabled)
  PerTaskLogits heads;
};

// The decomposition student: EKS stages routed by a shared task mask, plain
// stages where flagged, pool, projection, and T task heads. Per-layer expert
// rank is min(requested rank, C_in, C_out).
class DecompModel {
 public:
  DecompModel(ArchConfig cfg, size_t rank, uint64_t seed) : cfg_(std::move(cfg)), rank_(rank) {
    cfg_.validate(true);
    if (rank == 0) fail("DecompModel: rank must be positive");
    Rng rng(seed);
    for (size_t i = 0; i < cfg_.stages.size(); ++i) {
      ConvSpec spec = detail::stage_conv_spec(cfg_, i);
      if (cfg_.stages[i].eks) {
        size_t r = std::min({rank, spec.c_in, spec.c_out});
        eks_layers_.emplace_back(EksConvLayer(spec, cfg_.num_tasks(), r, rng));
        plain_weights_.push_back(Tensor());
      } else {
        double limit = std::sqrt(6.0 / static_cast<double>(spec.c_in * spec.k * spec.k));
        plain_weights_.push_back(
            Tensor::uniform({spec.c_out, spec.c_in, spec.k, spec.k}, rng, -limit, limit, true));
        eks_layers_.emplace_back(std::nullopt);
      }
      specs_.push_back(spec);
    }
    if (cfg_.proj_dim > 0) {
      double limit = std::sqrt(6.0 / static_cast<double>(cfg_.feature_dim()));
      proj_weight_ = Tensor::uniform({cfg_.proj_dim, cfg_.feature_dim()}, rng, -limit, limit, true);
    }
    for (size_t t = 0; t < cfg_.num_tasks(); ++t)
      heads_.push_back(TaskHead::init(cfg_.task_classes[t], cfg_.feature_dim(), t, rng));
  }

  const ArchConfig& config() const { return cfg_; }
  size_t requested_rank() const { return rank_; }
  size_t num_stages() const { return specs_.size(); }
  bool stage_is_eks(size_t i) const { return eks_layers_[i].has_value(); }
  EksConvLayer& eks_layer(size_t i) { return *eks_layers_[i]; }
  const EksConvLayer& eks_layer(size_t i) const { return *eks_layers_[i]; }
  Tensor& plain_weight(size_t i) { return plain_weights_[i]; }
  const Tensor& plain_weight(size_t i) const { return plain_weights_[i]; }
  const std::vector<ConvSpec>& stage_specs() const { return specs_; }
  std::vector<TaskHead>& heads() { return heads_; }
  const std::vector<TaskHead>& heads() const { return heads_; }
  Tensor& proj_weight() { return proj_weight_; }
  const Tensor& proj_weight() const { return proj_weight_; }
  bool has_projection() const { return cfg_.proj_dim > 0; }

  StudentForward forward(const Tensor& x, const TaskMask& mask) const {
    check_input(x);
    if (mask.num_tasks() != cfg_.num_tasks())
      fail("DecompModel: mask T=" + std::to_string(mask.num_tasks()) + " does not match config T=" +
           std::to_string(cfg_.num_tasks()));
    Tensor cur = x;
    for (size_t i = 0; i < specs_.size(); ++i) {
      cur = eks_layers_[i] ? eks_layers_[i]->forward(cur, mask)
                           : conv2d(cur, plain_weights_[i], specs_[i]);
      cur = relu(cur);
    }
    StudentForward out;
    out.features = global_avg_pool(cur);
    out.proj_features =
        has_projection() ? matmul(out.features, transpose(proj_weight_)) : out.features;
    out.heads.logits.resize(cfg_.num_tasks());
    out.heads.sample_idx.resize(cfg_.num_tasks());
    for (size_t t = 0; t < cfg_.num_tasks(); ++t) {
      std::vector<size_t> idx = mask.samples_of(t);
      if (idx.empty()) continue;
      out.heads.logits[t] = heads_[t].logits(gather_rows(out.features, idx));
      out.heads.sample_idx[t] = std::move(idx);
    }
    return out;
  }

  std::vector<Tensor> params(bool include_experts = true) {
    std::vector<Tensor> p;
    for (size_t i = 0; i < specs_.size(); ++i) {
      if (eks_layers_[i]) {
        p.push_back(eks_layers_[i]->w0());
        if (include_experts)
          for (Tensor& t : eks_layers_[i]->expert_params()) p.push_back(t);
      } else {
        p.push_back(plain_weights_[i]);
      }
    }
    if (has_projection()) p.push_back(proj_weight_);
    for (TaskHead& h : heads_) {
      p.push_back(h.weight);
      p.push_back(h.bias);
    }
    return p;
  }

  // Deployable expert for task t: every EKS layer fused as W0 + B_t A_t,
  // plain layers copied, plus the task's own head. No expert factors and no
  // projection survive the export.
  PlainConvNet export_expert(size_t t) const {
    if (t >= cfg_.num_tasks())
      fail("export_expert: task " + std::to_string(t) + " out of range for T=" +
           std::to_string(cfg_.num_tasks()));
    ArchConfig deploy_cfg = cfg_;
    deploy_cfg.proj_dim = 0;
    PlainConvNet net(deploy_cfg, cfg_.task_classes[t], /*seed=*/0);
    for (size_t i = 0; i < specs_.size(); ++i) {
      if (eks_layers_[i]) {
        if (eks_layers_[i]->fused()) fail("export_expert: layer already fused");
        // tensor handles share storage, so fuse a deep copy of the layer
        EksConvLayer fused_copy = clone_layer(*eks_layers_[i]);
        fused_copy.fuse(t);
        net.stage_weights()[i].values() = fused_copy.w0().values();
      } else {
        net.stage_weights()[i].values() = plain_weights_[i].values();
      }
    }
    net.head().weight.values() = heads_[t].weight.values();
    net.head().bias.values() = heads_[t].bias.values();
    return net;
  }

  // plain network of identical architecture, for cost comparisons
  PlainConvNet baseline(size_t head_classes, uint64_t seed = 0) const {
    ArchConfig base_cfg = cfg_;
    base_cfg.proj_dim = 0;
    return PlainConvNet(base_cfg, head_classes, seed);
  }

  void fuse_all(size_t t) {
    for (size_t i = 0; i < specs_.size(); ++i)
      if (eks_layers_[i]) eks_layers_[i]->fuse(t);
  }

  void unfuse_all() {
    for (size_t i = 0; i < specs_.size(); ++i)
      if (eks_layers_[i]) eks_layers_[i]->unfuse();
  }

  int fused_task() const {
    for (size_t i = 0; i < specs_.size(); ++i)
      if (eks_layers_[i]) return eks_layers_[i]->fused_task();
    return -1;
  }

 private:
  static EksConvLayer clone_layer(const EksConvLayer& l) {
    Rng dummy(1);
    EksConvLayer copy(l.spec(), l.num_tasks(), l.rank(), dummy);
    copy.w0().values() = l.w0().values();
    for (size_t t = 0; t < l.num_tasks(); ++t) {
      copy.experts()[t].b_factor.values() = l.experts()[t].b_factor.values();
      copy.experts()[t].a_factor.values() = l.experts()[t].a_factor.values();
    }
    return copy;
  }

  void check_input(const Tensor& x) const {
    if (x.rank() != 4 || x.dim(1) != cfg_.in_channels || x.dim(2) != cfg_.in_size ||
        x.dim(3) != cfg_.in_size)
      fail("DecompModel: input " + shape_str(x.shape()) + " does not match config");
  }

  ArchConfig cfg_;
  size_t rank_;
  std::vector<ConvSpec> specs_;
  std::vector<std::optional<EksConvLayer>> eks_layers_;  // engaged iff the stage is EKS
  std::vector<Tensor> plain_weights_;
  Tensor proj_weight_;
  std::vector<TaskHead> heads_;
};

}  // namespace eks
