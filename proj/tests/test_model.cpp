#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>

#include "eks/checkpoint.hpp"
#include "eks/model.hpp"
#include "eks/serialize.hpp"

using namespace eks;

namespace {

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double worst = 0.0;
  for (size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

ArchConfig small_arch() {
  ArchConfig cfg;
  cfg.in_channels = 1;
  cfg.in_size = 16;
  cfg.stages = {{4, 3, 2, true}, {6, 3, 2, true}, {8, 3, 2, true}};
  cfg.proj_dim = 0;
  cfg.task_classes = {3, 2, 4};
  return cfg;
}

void randomize_experts(DecompModel& model, Rng& rng) {
  for (size_t i = 0; i < model.num_stages(); ++i) {
    if (!model.stage_is_eks(i)) continue;
    for (LowRankExpert& e : model.eks_layer(i).experts())
      for (double& v : e.b_factor.values()) v = rng.uniform(-0.3, 0.3);
  }
}

std::string tmp_path(const char* name) {
  return std::string("model_test_") + name;
}

}  // namespace

TEST_CASE("arch config text encoding round-trips") {
  ArchConfig cfg = small_arch();
  cfg.proj_dim = 16;
  std::string line = cfg.encode();
  ArchConfig back = ArchConfig::decode(line);
  CHECK(back.encode() == line);
  CHECK(back.in_channels == 1);
  CHECK(back.stages.size() == 3);
  CHECK(back.stages[1].c_out == 6);
  CHECK(back.stages[2].eks);
  CHECK(back.task_classes == std::vector<size_t>{3, 2, 4});
  CHECK(back.proj_dim == 16);
  CHECK_THROWS_AS(ArchConfig::decode("in=1x16x16;stages=4q3s2E;proj=0;tasks=2,2"), Error);
}

TEST_CASE("arch validation enforces eks stages and class counts") {
  ArchConfig cfg = small_arch();
  cfg.validate(true);
  for (StageSpec& s : cfg.stages) s.eks = false;
  CHECK_THROWS_AS(cfg.validate(true), Error);
  cfg.stages[0].eks = true;
  cfg.task_classes = {1, 2};
  CHECK_THROWS_AS(cfg.validate(false), Error);
}

TEST_CASE("with zero-initialized experts the student features ignore the mask") {
  DecompModel model(small_arch(), 2, 7);
  Rng rng(9);
  Tensor x = Tensor::uniform({5, 1, 16, 16}, rng, -1.0, 1.0);
  StudentForward a = model.forward(x, TaskMask::from_tasks({0, 1, 2, 0, 1}, 3));
  StudentForward b = model.forward(x, TaskMask::from_tasks({2, 2, 0, 1, 0}, 3));
  CHECK(max_abs_diff(a.features.values(), b.features.values()) == 0.0);
}

TEST_CASE("a single-task student equals an ordinary CNN with fused weights") {
  ArchConfig cfg = small_arch();
  cfg.task_classes = {4};
  DecompModel model(cfg, 2, 11);
  Rng rng(13);
  randomize_experts(model, rng);
  Tensor x = Tensor::uniform({3, 1, 16, 16}, rng, -1.0, 1.0);
  StudentForward out = model.forward(x, TaskMask::from_tasks({0, 0, 0}, 1));

  PlainConvNet fused = model.export_expert(0);
  Tensor plain_features = fused.features(x);
  CHECK(max_abs_diff(out.features.values(), plain_features.values()) < 1e-10);
}

TEST_CASE("student forward matches a manual layer-by-layer composition") {
  ArchConfig cfg = small_arch();
  DecompModel model(cfg, 2, 17);
  Rng rng(19);
  randomize_experts(model, rng);
  Tensor x = Tensor::uniform({4, 1, 16, 16}, rng, -1.0, 1.0);
  TaskMask mask = TaskMask::from_tasks({2, 0, 1, 2}, 3);
  StudentForward out = model.forward(x, mask);

  Tensor cur = x;
  for (size_t i = 0; i < model.num_stages(); ++i) cur = relu(model.eks_layer(i).forward(cur, mask));
  Tensor manual_features = global_avg_pool(cur);
  CHECK(max_abs_diff(out.features.values(), manual_features.values()) == 0.0);

  // routed head logits match applying each head to the gathered rows
  for (size_t t = 0; t < 3; ++t) {
    const auto& idx = out.heads.sample_idx[t];
    if (idx.empty()) continue;
    Tensor expect = model.heads()[t].logits(gather_rows(manual_features, idx));
    CHECK(max_abs_diff(out.heads.logits[t].values(), expect.values()) == 0.0);
  }
}

TEST_CASE("teacher features and logits are deterministic per seed") {
  ArchConfig cfg = small_arch().scaled_width(2);
  PlainConvNet t1(cfg, 9, 23);
  PlainConvNet t2(cfg, 9, 23);
  Rng rng(29);
  Tensor x = Tensor::uniform({2, 1, 16, 16}, rng, -1.0, 1.0);
  CHECK(t1.features(x).values() == t2.features(x).values());
  CHECK(t1.logits(x).values() == t2.logits(x).values());
}

TEST_CASE("exported expert matches the baseline parameter and FLOP counts exactly") {
  DecompModel model(small_arch(), 2, 31);
  for (size_t t = 0; t < 3; ++t) {
    PlainConvNet expert = model.export_expert(t);
    PlainConvNet baseline = model.baseline(model.config().task_classes[t], 99);
    CHECK(expert.param_count() == baseline.param_count());
    CHECK(expert.flops_per_sample() == baseline.flops_per_sample());
  }
  CHECK_THROWS_AS(model.export_expert(3), Error);
}

TEST_CASE("exported expert reproduces the training-time logits for its task") {
  DecompModel model(small_arch(), 2, 37);
  Rng rng(41);
  randomize_experts(model, rng);
  for (size_t t = 0; t < 3; ++t) {
    PlainConvNet expert = model.export_expert(t);
    // 52 random inputs per task
    for (int rep = 0; rep < 13; ++rep) {
      Tensor x = Tensor::uniform({4, 1, 16, 16}, rng, -1.0, 1.0);
      StudentForward out = model.forward(x, TaskMask::from_tasks(std::vector<size_t>(4, t), 3));
      Tensor deployed = expert.logits(x);
      CHECK(max_abs_diff(out.heads.logits[t].values(), deployed.values()) < 1e-10);
    }
  }
}

TEST_CASE("exporting every task yields experts sharing plain weights and differing heads") {
  ArchConfig cfg = small_arch();
  cfg.stages[1].eks = false;  // one plain stage
  DecompModel model(cfg, 2, 43);
  Rng rng(47);
  randomize_experts(model, rng);
  PlainConvNet e0 = model.export_expert(0);
  PlainConvNet e1 = model.export_expert(1);
  // plain (non-EKS) stage weights are identical across exports
  CHECK(e0.stage_weights()[1].values() == e1.stage_weights()[1].values());
  // EKS stages differ by the expert delta
  CHECK(max_abs_diff(e0.stage_weights()[0].values(), e1.stage_weights()[0].values()) > 1e-6);
  // heads come from the task's own head
  CHECK(e0.head().weight.values() == model.heads()[0].weight.values());
  CHECK(e1.head().weight.values() == model.heads()[1].weight.values());
}

TEST_CASE("export on a fused model is rejected") {
  DecompModel model(small_arch(), 2, 53);
  model.fuse_all(1);
  CHECK_THROWS_AS(model.export_expert(0), Error);
  model.unfuse_all();
}

TEST_CASE("student checkpoint round-trips bit-exactly and re-saves identically") {
  ArchConfig cfg = small_arch();
  cfg.proj_dim = 16;
  DecompModel model(cfg, 2, 59);
  Rng rng(61);
  randomize_experts(model, rng);
  std::string p1 = tmp_path("student_a.eksc"), p2 = tmp_path("student_b.eksc");
  save_student(model, p1);
  DecompModel back = load_student(p1);
  CHECK(back.config().encode() == model.config().encode());
  for (size_t i = 0; i < model.num_stages(); ++i) {
    if (model.stage_is_eks(i)) {
      CHECK(back.eks_layer(i).w0().values() == model.eks_layer(i).w0().values());
      for (size_t t = 0; t < 3; ++t) {
        CHECK(back.eks_layer(i).experts()[t].b_factor.values() ==
              model.eks_layer(i).experts()[t].b_factor.values());
        CHECK(back.eks_layer(i).experts()[t].a_factor.values() ==
              model.eks_layer(i).experts()[t].a_factor.values());
      }
    }
  }
  CHECK(back.proj_weight().values() == model.proj_weight().values());
  save_student(back, p2);
  CHECK(fnv1a64(read_file(p1)) == fnv1a64(read_file(p2)));
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("deploy checkpoints carry the FUSED marker and reload as plain nets") {
  DecompModel model(small_arch(), 2, 67);
  Rng rng2(68);
  randomize_experts(model, rng2);
  PlainConvNet expert = model.export_expert(2);
  std::string path = tmp_path("deploy.eksc");
  save_deploy(expert, 2, path);
  std::string blob = read_file(path);
  CHECK(blob.find("FUSED:2\n") != std::string::npos);
  size_t task = 99;
  PlainConvNet back = load_deploy(path, &task);
  CHECK(task == 2);
  Rng rng(71);
  Tensor x = Tensor::uniform({2, 1, 16, 16}, rng, -1.0, 1.0);
  CHECK(back.logits(x).values() == expert.logits(x).values());
  std::remove(path.c_str());
}

TEST_CASE("switch rewrites the deployment target and round-trips byte-identically") {
  DecompModel model(small_arch(), 2, 73);
  std::string base = tmp_path("sw_base.eksc"), f0 = tmp_path("sw_f0.eksc"),
              f2 = tmp_path("sw_f2.eksc"), back = tmp_path("sw_back.eksc");
  save_student(model, base);
  switch_checkpoint(base, f0, -2, 0);
  switch_checkpoint(f0, f2, 0, 2);
  switch_checkpoint(f2, back, 2, 0);
  CHECK(fnv1a64(read_file(f0)) == fnv1a64(read_file(back)));
  CHECK(read_file(f0) == read_file(back));
  int fused = -5;
  load_student(f2, &fused);
  CHECK(fused == 2);
  CHECK_THROWS_AS(switch_checkpoint(f0, back, 1, 2), Error);   // wrong --from
  CHECK_THROWS_AS(switch_checkpoint(f0, back, 0, 9), Error);   // task out of range
  for (const std::string& p : {base, f0, f2, back}) std::remove(p.c_str());
}

TEST_CASE("teacher checkpoint round-trips") {
  ArchConfig cfg = small_arch().scaled_width(2);
  PlainConvNet teacher(cfg, 9, 79);
  std::string path = tmp_path("teacher.eksc");
  save_teacher(teacher, path);
  PlainConvNet back = load_teacher(path);
  Rng rng(83);
  Tensor x = Tensor::uniform({2, 1, 16, 16}, rng, -1.0, 1.0);
  CHECK(back.logits(x).values() == teacher.logits(x).values());
  CHECK_THROWS_AS(load_student(path), Error);  // wrong kind
  std::remove(path.c_str());
}

TEST_CASE("per-layer expert rank is clamped to min(c_in, c_out)") {
  ArchConfig cfg = small_arch();
  DecompModel model(cfg, 8, 89);  // first stage has c_in = 1
  CHECK(model.eks_layer(0).rank() == 1);
  CHECK(model.eks_layer(1).rank() == 4);  // min(8, 4, 6)
  CHECK(model.eks_layer(2).rank() == 6);  // min(8, 6, 8)
}
