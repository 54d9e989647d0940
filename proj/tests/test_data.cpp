#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <fstream>

#include "eks/data.hpp"
#include "eks/eks_layer.hpp"
#include "eks/serialize.hpp"

using namespace eks;

namespace {

std::vector<TaskSpec> three_tasks(double sigma = 0.1, size_t per_class = 50) {
  std::vector<TaskSpec> specs;
  GenFamily fams[3] = {GenFamily::OrientedBars, GenFamily::GaussianBlobs,
                       GenFamily::CheckerFrequency};
  for (size_t t = 0; t < 3; ++t) {
    TaskSpec s;
    s.task_id = t;
    s.classes = 4;
    s.family = fams[t];
    s.sigma = sigma;
    s.samples_per_class = per_class;
    specs.push_back(s);
  }
  return specs;
}

}  // namespace

TEST_CASE("generation is deterministic: same seed gives byte-identical files") {
  std::string p1 = "data_test_a.eksd", p2 = "data_test_b.eksd";
  generate(three_tasks(), 42).save(p1);
  generate(three_tasks(), 42).save(p2);
  CHECK(read_file(p1) == read_file(p2));
  generate(three_tasks(), 43).save(p2);
  CHECK(read_file(p1) != read_file(p2));
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("sigma zero reproduces the class prototypes exactly") {
  Dataset data = generate(three_tasks(0.0), 7);
  for (const Sample& s : data.samples()) {
    std::vector<double> proto = detail::prototype(data.specs()[s.task].family, s.task,
                                                  s.within_label, data.specs()[s.task].classes);
    CHECK(s.image.values() == proto);
  }
}

TEST_CASE("3 tasks x 4 classes x 50 samples gives 600 samples split 480/120") {
  Dataset data = generate(three_tasks(), 5);
  CHECK(data.size() == 600);
  CHECK(data.train_indices().size() == 480);
  CHECK(data.val_indices().size() == 120);
}

TEST_CASE("global labels are within-task labels plus cumulative offsets") {
  Dataset data = generate(three_tasks(), 5);
  for (const Sample& s : data.samples())
    CHECK(s.global_label == data.global_offset(s.task) + s.within_label);
  CHECK(data.global_offset(2) == 8);
}

TEST_CASE("save then load round-trips the dataset") {
  Dataset data = generate(three_tasks(), 11);
  std::string path = "data_test_rt.eksd";
  data.save(path);
  Dataset back = Dataset::load(path);
  REQUIRE(back.size() == data.size());
  REQUIRE(back.num_tasks() == 3);
  for (size_t i = 0; i < data.size(); ++i) {
    CHECK(back.samples()[i].image.values() == data.samples()[i].image.values());
    CHECK(back.samples()[i].task == data.samples()[i].task);
    CHECK(back.samples()[i].within_label == data.samples()[i].within_label);
    CHECK(back.samples()[i].val == data.samples()[i].val);
  }
  std::remove(path.c_str());
}

TEST_CASE("truncated dataset files report the byte offset") {
  Dataset data = generate(three_tasks(0.1, 5), 13);
  std::string path = "data_test_trunc.eksd";
  data.save(path);
  std::string blob = read_file(path);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  os.write(blob.data(), static_cast<std::streamsize>(blob.size() / 2));
  os.close();
  try {
    Dataset::load(path);
    FAIL("expected truncation error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("offset") != std::string::npos);
  }
  std::remove(path.c_str());
}

TEST_CASE("bad magic and zero-task files are rejected") {
  std::string path = "data_test_bad.eksd";
  {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    os << "NOPE";
  }
  CHECK_THROWS_AS(Dataset::load(path), Error);
  {
    // valid magic/version but zero tasks
    ByteWriter w;
    w.text("EKSD");
    w.u16(1);
    w.u16(0);
    w.to_file(path);
  }
  try {
    Dataset::load(path);
    FAIL("expected zero-task rejection");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("zero tasks") != std::string::npos);
  }
  std::remove(path.c_str());
}

TEST_CASE("prototype collisions are rejected as degenerate specs") {
  std::vector<TaskSpec> specs = three_tasks();
  specs[0].sigma = 10.0;  // 4*sigma exceeds any prototype distance
  CHECK_THROWS_AS(generate(specs, 3), Error);
}

TEST_CASE("csv export lists every sample with its labels and split") {
  Dataset data = generate(three_tasks(0.1, 5), 17);
  std::string path = "data_test_index.csv";
  data.export_csv(path);
  std::ifstream is(path);
  std::string line;
  std::getline(is, line);
  CHECK(line == "index,task,within_label,global_label,split");
  size_t rows = 0;
  while (std::getline(is, line))
    if (!line.empty()) ++rows;
  CHECK(rows == data.size());
  std::remove(path.c_str());
}

TEST_CASE("task masks built from dataset batches are one-hot by construction") {
  Dataset data = generate(three_tasks(0.1, 10), 19);
  std::vector<size_t> idx = data.train_indices();
  idx.resize(16);
  Tensor images;
  BatchLabels labels;
  data.batch(idx, &images, &labels);
  CHECK(images.shape() == Shape{16, 1, 16, 16});
  TaskMask mask = TaskMask::from_tasks(labels.tasks, 3);  // throws if not one-hot
  CHECK(mask.batch() == 16);
}

TEST_CASE("a linear probe on raw pixels separates each task at sigma 0.1") {
  Dataset data = generate(three_tasks(0.1, 50), 23);
  std::vector<double> acc = linear_probe_accuracy(data);
  for (size_t t = 0; t < acc.size(); ++t) {
    INFO("task ", t, " probe accuracy ", acc[t]);
    CHECK(acc[t] > 0.9);
  }
}
