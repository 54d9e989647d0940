#pragma once

// Deterministic synthetic multi-task image datasets. Three generator
// families (oriented bars, gaussian blobs, checker frequencies) produce
// per-class prototypes; samples are prototype + gaussian pixel noise. Tasks
// that share a family are correlated, tasks that do not are diverse. File
// format: header, per-sample index, then tensor payloads, little-endian.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "eks/losses.hpp"
#include "eks/rng.hpp"
#include "eks/serialize.hpp"
#include "eks/tensor.hpp"

namespace eks {

enum class GenFamily : uint8_t { OrientedBars = 0, GaussianBlobs = 1, CheckerFrequency = 2 };

inline const char* family_name(GenFamily f) {
  switch (f) {
    case GenFamily::OrientedBars: return "bars";
    case GenFamily::GaussianBlobs: return "blobs";
    case GenFamily::CheckerFrequency: return "checker";
  }
  return "?";
}

inline GenFamily family_from_name(const std::string& s) {
  if (s == "bars") return GenFamily::OrientedBars;
  if (s == "blobs") return GenFamily::GaussianBlobs;
  if (s == "checker") return GenFamily::CheckerFrequency;
  fail("unknown generator family \"" + s + "\" (bars|blobs|checker)");
}

struct TaskSpec {
  size_t task_id = 0;
  size_t classes = 2;
  GenFamily family = GenFamily::OrientedBars;
  double sigma = 0.1;
  size_t samples_per_class = 50;
};

struct Sample {
  Tensor image;  // C x H x W
  size_t task = 0;
  size_t within_label = 0;
  size_t global_label = 0;
  bool val = false;
};

constexpr size_t kImageSize = 16;

namespace detail {

// class prototypes are pure functions of (family, task id, class, class count)
inline std::vector<double> prototype(GenFamily family, size_t task, size_t cls, size_t classes) {
  const size_t s = kImageSize;
  std::vector<double> img(s * s, 0.0);
  double cx = (s - 1) / 2.0, cy = (s - 1) / 2.0;
  switch (family) {
    case GenFamily::OrientedBars: {
      // a soft bar through the center; class selects the orientation,
      // the task id offsets the phase
      double theta = 3.14159265358979323846 * (cls + 0.37 * (task % 4)) / classes;
      double nx = -std::sin(theta), ny = std::cos(theta);
      for (size_t y = 0; y < s; ++y)
        for (size_t x = 0; x < s; ++x) {
          double d = (x - cx) * nx + (y - cy) * ny;
          img[y * s + x] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
        }
      break;
    }
    case GenFamily::GaussianBlobs: {
      // blob centered on a ring position selected by the class
      double ang = 2.0 * 3.14159265358979323846 * (cls + 0.31 * (task % 3)) / classes;
      double bx = cx + 4.5 * std::cos(ang), by = cy + 4.5 * std::sin(ang);
      for (size_t y = 0; y < s; ++y)
        for (size_t x = 0; x < s; ++x) {
          double d2 = (x - bx) * (x - bx) + (y - by) * (y - by);
          img[y * s + x] = std::exp(-d2 / (2.0 * 2.0 * 2.0));
        }
      break;
    }
    case GenFamily::CheckerFrequency: {
      // sinusoidal grating; class selects the spatial frequency,
      // the task id tilts the orientation
      double freq = 1.0 + cls;
      double theta = 0.4 * (task % 5);
      double co = std::cos(theta), si = std::sin(theta);
      for (size_t y = 0; y < s; ++y)
        for (size_t x = 0; x < s; ++x) {
          double u = (x * co + y * si) / s;
          img[y * s + x] = 0.5 * (1.0 + std::sin(2.0 * 3.14159265358979323846 * freq * u));
        }
      break;
    }
  }
  return img;
}

inline double l2_distance(const std::vector<double>& a, const std::vector<double>& b) {
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(acc);
}

}  // namespace detail

class Dataset {
 public:
  Dataset() = default;
  Dataset(std::vector<TaskSpec> specs, std::vector<Sample> samples)
      : specs_(std::move(specs)), samples_(std::move(samples)) {}

  const std::vector<TaskSpec>& specs() const { return specs_; }
  const std::vector<Sample>& samples() const { return samples_; }
  size_t num_tasks() const { return specs_.size(); }
  size_t size() const { return samples_.size(); }

  std::vector<size_t> task_classes() const {
    std::vector<size_t> y;
    for (const TaskSpec& t : specs_) y.push_back(t.classes);
    return y;
  }

  size_t global_offset(size_t task) const {
    size_t off = 0;
    for (size_t t = 0; t < task; ++t) off += specs_[t].classes;
    return off;
  }

  std::vector<size_t> train_indices() const { return split_indices(false); }
  std::vector<size_t> val_indices() const { return split_indices(true); }

  // assemble (B,C,H,W) batch plus labels from sample indices
  void batch(const std::vector<size_t>& idx, Tensor* images, BatchLabels* labels) const {
    if (idx.empty()) fail("Dataset::batch: empty index list");
    const Shape& img_shape = samples_[idx[0]].image.shape();
    size_t chw = samples_[idx[0]].image.numel();
    std::vector<double> data(idx.size() * chw);
    labels->tasks.resize(idx.size());
    labels->labels.resize(idx.size());
    for (size_t i = 0; i < idx.size(); ++i) {
      const Sample& s = samples_[idx[i]];
      std::copy(s.image.values().begin(), s.image.values().end(), data.begin() + i * chw);
      labels->tasks[i] = s.task;
      labels->labels[i] = s.within_label;
    }
    *images = Tensor::from_data({idx.size(), img_shape[0], img_shape[1], img_shape[2]},
                                std::move(data));
  }

  void save(const std::string& path) const {
    if (specs_.empty() || samples_.empty()) fail("Dataset::save: empty dataset");
    ByteWriter w;
    w.text("EKSD");
    w.u16(1);  // version
    w.u16(static_cast<uint16_t>(specs_.size()));
    for (const TaskSpec& t : specs_) {
      w.u16(static_cast<uint16_t>(t.task_id));
      w.u8(static_cast<uint8_t>(t.family));
      w.u32(static_cast<uint32_t>(t.classes));
      w.u32(static_cast<uint32_t>(t.samples_per_class));
      w.f64(t.sigma);
    }
    w.u64(samples_.size());
    // index entries reference payload-relative offsets
    ByteWriter payload;
    std::vector<uint64_t> offsets;
    offsets.reserve(samples_.size());
    for (const Sample& s : samples_) {
      offsets.push_back(payload.size());
      write_tensor(payload, s.image);
    }
    for (size_t i = 0; i < samples_.size(); ++i) {
      const Sample& s = samples_[i];
      w.u16(static_cast<uint16_t>(s.task));
      w.u32(static_cast<uint32_t>(s.within_label));
      w.u8(s.val ? 1 : 0);
      w.u64(offsets[i]);
    }
    w.bytes(payload.data().data(), payload.size());
    w.to_file(path);
  }

  static Dataset load(const std::string& path) {
    std::string blob = read_file(path);
    ByteReader r(blob, path);
    const char* magic = r.take(4);
    if (std::memcmp(magic, "EKSD", 4) != 0) fail("dataset " + path + ": bad magic at offset 0");
    uint16_t version = r.u16();
    if (version != 1) fail("dataset " + path + ": unsupported version " + std::to_string(version));
    uint16_t n_tasks = r.u16();
    if (n_tasks == 0) fail("dataset " + path + ": file declares zero tasks");
    std::vector<TaskSpec> specs(n_tasks);
    for (TaskSpec& t : specs) {
      t.task_id = r.u16();
      t.family = static_cast<GenFamily>(r.u8());
      t.classes = r.u32();
      t.samples_per_class = r.u32();
      t.sigma = r.f64();
      if (t.classes < 2) fail("dataset " + path + ": task with fewer than 2 classes");
    }
    uint64_t n_samples = r.u64();
    if (n_samples == 0) fail("dataset " + path + ": file declares zero samples");
    struct Entry {
      uint16_t task;
      uint32_t label;
      uint8_t val;
      uint64_t offset;
    };
    std::vector<Entry> index(n_samples);
    for (Entry& e : index) {
      e.task = r.u16();
      e.label = r.u32();
      e.val = r.u8();
      e.offset = r.u64();
    }
    size_t payload_base = r.offset();
    std::vector<Sample> samples;
    samples.reserve(n_samples);
    std::vector<size_t> offsets(n_tasks, 0);
    for (size_t t = 1; t < n_tasks; ++t) offsets[t] = offsets[t - 1] + specs[t - 1].classes;
    for (const Entry& e : index) {
      if (e.task >= n_tasks) fail("dataset " + path + ": sample references task " + std::to_string(e.task));
      if (e.label >= specs[e.task].classes)
        fail("dataset " + path + ": label " + std::to_string(e.label) + " out of range for task " +
             std::to_string(e.task));
      ByteReader tr(blob.data() + payload_base + e.offset,
                    blob.size() > payload_base + e.offset ? blob.size() - payload_base - e.offset : 0,
                    path + " (sample at payload offset " + std::to_string(e.offset) + ")");
      Sample s;
      s.image = read_tensor(tr);
      s.task = e.task;
      s.within_label = e.label;
      s.global_label = offsets[e.task] + e.label;
      s.val = e.val != 0;
      samples.push_back(std::move(s));
    }
    return Dataset(std::move(specs), std::move(samples));
  }

  void export_csv(const std::string& path) const {
    std::ofstream os(path, std::ios::trunc);
    if (!os) fail("cannot open for writing: " + path);
    os << "index,task,within_label,global_label,split\n";
    for (size_t i = 0; i < samples_.size(); ++i) {
      const Sample& s = samples_[i];
      os << i << "," << s.task << "," << s.within_label << "," << s.global_label << ","
         << (s.val ? "val" : "train") << "\n";
    }
  }

 private:
  std::vector<size_t> split_indices(bool val) const {
    std::vector<size_t> idx;
    for (size_t i = 0; i < samples_.size(); ++i)
      if (samples_[i].val == val) idx.push_back(i);
    return idx;
  }

  std::vector<TaskSpec> specs_;
  std::vector<Sample> samples_;
};

// Deterministic per seed: prototypes are seed-independent, noise and the
// final shuffle come from the seeded rng. Split is a stratified 80/20 per
// class (the last fifth of each class's draws becomes validation).
inline Dataset generate(std::vector<TaskSpec> specs, uint64_t seed) {
  if (specs.empty()) fail("generate: no task specs");
  Rng rng(seed);
  std::vector<Sample> samples;
  size_t global_off = 0;
  for (size_t t = 0; t < specs.size(); ++t) {
    TaskSpec& spec = specs[t];
    spec.task_id = t;
    if (spec.classes < 2) fail("generate: task " + std::to_string(t) + " needs at least 2 classes");
    if (spec.samples_per_class == 0) fail("generate: task " + std::to_string(t) + " has no samples");
    std::vector<std::vector<double>> protos(spec.classes);
    for (size_t c = 0; c < spec.classes; ++c)
      protos[c] = detail::prototype(spec.family, t, c, spec.classes);
    // degenerate spec check: prototypes must stay distinguishable under noise
    for (size_t a = 0; a < spec.classes; ++a)
      for (size_t b = a + 1; b < spec.classes; ++b) {
        double d = detail::l2_distance(protos[a], protos[b]);
        if (d <= 4.0 * spec.sigma)
          fail("generate: degenerate task " + std::to_string(t) + ": prototypes " +
               std::to_string(a) + " and " + std::to_string(b) + " are L2 distance " +
               std::to_string(d) + " apart, need > " + std::to_string(4.0 * spec.sigma));
      }
    size_t train_per_class = (spec.samples_per_class * 4) / 5;
    for (size_t c = 0; c < spec.classes; ++c)
      for (size_t i = 0; i < spec.samples_per_class; ++i) {
        std::vector<double> img = protos[c];
        for (double& px : img) px += spec.sigma * rng.gaussian();
        Sample s;
        s.image = Tensor::from_data({1, kImageSize, kImageSize}, std::move(img));
        s.task = t;
        s.within_label = c;
        s.global_label = global_off + c;
        s.val = i >= train_per_class;
        samples.push_back(std::move(s));
      }
    global_off += spec.classes;
  }
  rng.shuffle(samples);
  return Dataset(std::move(specs), std::move(samples));
}

// Softmax regression on raw pixels, one probe per task; returns per-task
// validation accuracy. Sanity bound for learnability of generated data.
inline std::vector<double> linear_probe_accuracy(const Dataset& data, size_t steps = 150,
                                                 double lr = 0.5) {
  std::vector<double> acc(data.num_tasks(), 0.0);
  for (size_t t = 0; t < data.num_tasks(); ++t) {
    std::vector<size_t> train, val;
    for (size_t i = 0; i < data.size(); ++i) {
      if (data.samples()[i].task != t) continue;
      (data.samples()[i].val ? val : train).push_back(i);
    }
    if (train.empty() || val.empty()) fail("linear_probe: task " + std::to_string(t) + " has an empty split");
    size_t dim = data.samples()[train[0]].image.numel();
    size_t classes = data.specs()[t].classes;
    auto flatten = [&](const std::vector<size_t>& idx) {
      std::vector<double> buf(idx.size() * dim);
      for (size_t i = 0; i < idx.size(); ++i)
        std::copy(data.samples()[idx[i]].image.values().begin(),
                  data.samples()[idx[i]].image.values().end(), buf.begin() + i * dim);
      return Tensor::from_data({idx.size(), dim}, std::move(buf));
    };
    Tensor x_train = flatten(train), x_val = flatten(val);
    std::vector<size_t> y_train, y_val;
    for (size_t i : train) y_train.push_back(data.samples()[i].within_label);
    for (size_t i : val) y_val.push_back(data.samples()[i].within_label);

    Tensor w = Tensor::zeros({dim, classes}, true);
    Tensor b = Tensor::zeros({classes}, true);
    double inv_n = 1.0 / static_cast<double>(train.size());
    for (size_t step = 0; step < steps; ++step) {
      Tape tape;
      TapeScope scope(tape);
      Tensor logits = add_row_bias(matmul(x_train, w), b);
      Tensor loss = scale(sum(pick_per_row(log_temp_softmax(logits, 1.0), y_train)), -inv_n);
      tape.backward(loss);
      for (size_t i = 0; i < w.values().size(); ++i) w.values()[i] -= lr * w.grad()[i];
      for (size_t i = 0; i < b.values().size(); ++i) b.values()[i] -= lr * b.grad()[i];
      w.zero_grad();
      b.zero_grad();
    }
    Tensor logits = add_row_bias(matmul(x_val, w), b);
    size_t correct = 0;
    for (size_t i = 0; i < val.size(); ++i)
      if (argmax_row(logits.values().data() + i * classes, classes) == y_val[i]) ++correct;
    acc[t] = static_cast<double>(correct) / static_cast<double>(val.size());
  }
  return acc;
}

}  // namespace eks
