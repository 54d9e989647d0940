#pragma once

// Model checkpoints: a line-oriented text header (kind, arch, deployment
// target), a "---" separator, then tensor sections in the binary container
// format. Student checkpoints always store the unfused W0 plus all expert
// factor pairs; the fused= field records the intended deployment task
// without changing the stored tensors. Deployable exports carry a FUSED:<t>
// marker and contain only plain conv weights and the task's head.

#include <sstream>
#include <string>
#include <vector>

#include "eks/model.hpp"
#include "eks/serialize.hpp"

namespace eks {

constexpr const char* kCheckpointMagicLine = "EKSCKPT 1";

struct CheckpointHeader {
  std::string kind;  // student | teacher | deploy
  int fused = -1;
  ArchConfig arch;
  size_t rank = 0;        // student only: requested expert rank
  size_t head_task = 0;   // deploy only
  size_t header_bytes = 0;
  std::string raw_header;
};

namespace detail {

inline std::string header_text(const std::string& kind, int fused, const ArchConfig& arch,
                               size_t rank, size_t head_task) {
  std::ostringstream os;
  os << kCheckpointMagicLine << "\n";
  os << "kind=" << kind << "\n";
  if (kind == "deploy") os << "FUSED:" << head_task << "\n";
  if (kind == "student") {
    os << "fused=" << fused << "\n";
    os << "rank=" << rank << "\n";
  }
  os << "arch=" << arch.encode() << "\n";
  os << "---\n";
  return os.str();
}

}  // namespace detail

inline CheckpointHeader parse_checkpoint_header(const std::string& blob, const std::string& source) {
  CheckpointHeader h;
  size_t pos = 0;
  bool saw_magic = false, saw_arch = false, done = false;
  while (pos < blob.size() && !done) {
    size_t nl = blob.find('\n', pos);
    if (nl == std::string::npos) fail("checkpoint " + source + ": unterminated header");
    std::string line = blob.substr(pos, nl - pos);
    pos = nl + 1;
    if (!saw_magic) {
      if (line != kCheckpointMagicLine)
        fail("checkpoint " + source + ": bad magic line \"" + line + "\"");
      saw_magic = true;
      continue;
    }
    if (line == "---") {
      done = true;
      break;
    }
    if (line.rfind("FUSED:", 0) == 0) {
      h.head_task = std::stoull(line.substr(6));
      h.fused = static_cast<int>(h.head_task);
      continue;
    }
    size_t eq = line.find('=');
    if (eq == std::string::npos) fail("checkpoint " + source + ": malformed header line \"" + line + "\"");
    std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    if (key == "kind")
      h.kind = val;
    else if (key == "fused")
      h.fused = std::stoi(val);
    else if (key == "rank")
      h.rank = std::stoull(val);
    else if (key == "arch") {
      h.arch = ArchConfig::decode(val);
      saw_arch = true;
    } else
      fail("checkpoint " + source + ": unknown header key \"" + key + "\"");
  }
  if (!done) fail("checkpoint " + source + ": missing --- separator");
  if (h.kind.empty() || !saw_arch) fail("checkpoint " + source + ": incomplete header");
  h.header_bytes = pos;
  h.raw_header = blob.substr(0, pos);
  return h;
}

// ---------------------------------------------------------------------------
// student

inline void save_student(const DecompModel& model, const std::string& path, int fused_field = -1) {
  ByteWriter w;
  w.text(detail::header_text("student", fused_field, model.config(), model.requested_rank(), 0));
  for (size_t i = 0; i < model.num_stages(); ++i) {
    if (model.stage_is_eks(i)) {
      const EksConvLayer& l = model.eks_layer(i);
      if (l.fused()) fail("save_student: checkpoints store the unfused form; unfuse first");
      write_tensor(w, l.w0());
      for (const LowRankExpert& e : l.experts()) {
        write_tensor(w, e.b_factor);
        write_tensor(w, e.a_factor);
      }
    } else {
      write_tensor(w, model.plain_weight(i));
    }
  }
  if (model.has_projection()) write_tensor(w, model.proj_weight());
  for (const TaskHead& h : model.heads()) {
    write_tensor(w, h.weight);
    write_tensor(w, h.bias);
  }
  w.to_file(path);
}

inline DecompModel load_student(const std::string& path, int* fused_field = nullptr) {
  std::string blob = read_file(path);
  CheckpointHeader h = parse_checkpoint_header(blob, path);
  if (h.kind != "student") fail("checkpoint " + path + ": expected kind=student, got " + h.kind);
  if (h.rank == 0) fail("checkpoint " + path + ": missing rank field");
  h.arch.validate(true);
  DecompModel model(h.arch, h.rank, /*seed=*/0);
  ByteReader r(blob.data() + h.header_bytes, blob.size() - h.header_bytes, path);
  auto read_into = [&](Tensor& dst, const char* what) {
    Tensor t = read_tensor(r);
    if (t.shape() != dst.shape())
      fail("checkpoint " + path + ": " + what + " has shape " + shape_str(t.shape()) +
           ", expected " + shape_str(dst.shape()));
    dst.values() = t.values();
  };
  for (size_t i = 0; i < model.num_stages(); ++i) {
    if (model.stage_is_eks(i)) {
      EksConvLayer& l = model.eks_layer(i);
      read_into(l.w0(), "W0");
      for (LowRankExpert& e : l.experts()) {
        read_into(e.b_factor, "B factor");
        read_into(e.a_factor, "A factor");
      }
    } else {
      read_into(model.plain_weight(i), "conv weight");
    }
  }
  if (model.has_projection()) read_into(model.proj_weight(), "projection");
  for (TaskHead& head : model.heads()) {
    read_into(head.weight, "head weight");
    read_into(head.bias, "head bias");
  }
  if (r.remaining() != 0)
    fail("checkpoint " + path + ": " + std::to_string(r.remaining()) + " trailing bytes");
  if (fused_field) *fused_field = h.fused;
  return model;
}

// ---------------------------------------------------------------------------
// teacher and deployable expert (plain networks)

namespace detail {

inline void save_plain(const PlainConvNet& net, const std::string& kind, size_t head_task,
                       const std::string& path) {
  ByteWriter w;
  w.text(header_text(kind, -1, net.config(), 0, head_task));
  for (const Tensor& t : net.stage_weights()) write_tensor(w, t);
  write_tensor(w, net.head().weight);
  write_tensor(w, net.head().bias);
  w.to_file(path);
}

inline PlainConvNet load_plain(const std::string& path, const std::string& kind,
                               size_t head_classes_hint, size_t* head_task) {
  std::string blob = read_file(path);
  CheckpointHeader h = parse_checkpoint_header(blob, path);
  if (h.kind != kind) fail("checkpoint " + path + ": expected kind=" + kind + ", got " + h.kind);
  size_t classes = head_classes_hint;
  if (kind == "deploy") {
    if (h.head_task >= h.arch.num_tasks())
      fail("checkpoint " + path + ": FUSED task out of range");
    classes = h.arch.task_classes[h.head_task];
    if (head_task) *head_task = h.head_task;
  }
  PlainConvNet net(h.arch, classes, /*seed=*/0);
  ByteReader r(blob.data() + h.header_bytes, blob.size() - h.header_bytes, path);
  auto read_into = [&](Tensor& dst, const char* what) {
    Tensor t = read_tensor(r);
    if (t.shape() != dst.shape())
      fail("checkpoint " + path + ": " + what + " has shape " + shape_str(t.shape()) +
           ", expected " + shape_str(dst.shape()));
    dst.values() = t.values();
  };
  for (Tensor& t : net.stage_weights()) read_into(t, "conv weight");
  read_into(net.head().weight, "head weight");
  read_into(net.head().bias, "head bias");
  if (r.remaining() != 0)
    fail("checkpoint " + path + ": " + std::to_string(r.remaining()) + " trailing bytes");
  return net;
}

}  // namespace detail

inline void save_teacher(const PlainConvNet& net, const std::string& path) {
  if (!net.has_head()) fail("save_teacher: teacher must carry its global head");
  detail::save_plain(net, "teacher", 0, path);
}

inline PlainConvNet load_teacher(const std::string& path) {
  std::string blob = read_file(path);
  CheckpointHeader h = parse_checkpoint_header(blob, path);
  return detail::load_plain(path, "teacher", h.arch.total_classes(), nullptr);
}

inline void save_deploy(const PlainConvNet& net, size_t task, const std::string& path) {
  detail::save_plain(net, "deploy", task, path);
}

inline PlainConvNet load_deploy(const std::string& path, size_t* task_out = nullptr) {
  return detail::load_plain(path, "deploy", 0, task_out);
}

// Retargets the deployment task of a student checkpoint. Storage is
// canonical (unfused W0 plus factors), so only the fused= header field
// changes and the tensor payload is carried over byte-for-byte.
inline void switch_checkpoint(const std::string& in_path, const std::string& out_path,
                              int expected_from, size_t to) {
  std::string blob = read_file(in_path);
  CheckpointHeader h = parse_checkpoint_header(blob, in_path);
  if (h.kind == "deploy")
    fail("switch: " + in_path + " is a fused deployment export without expert factors; "
         "switch the student checkpoint instead");
  if (h.kind != "student") fail("switch: " + in_path + " is not a student checkpoint");
  if (expected_from != -2 && h.fused != expected_from)
    fail("switch: checkpoint is fused for task " + std::to_string(h.fused) + ", not " +
         std::to_string(expected_from));
  if (to >= h.arch.num_tasks())
    fail("switch: task " + std::to_string(to) + " out of range for T=" +
         std::to_string(h.arch.num_tasks()));
  ByteWriter w;
  w.text(detail::header_text("student", static_cast<int>(to), h.arch, h.rank, 0));
  w.bytes(blob.data() + h.header_bytes, blob.size() - h.header_bytes);
  w.to_file(out_path);
}

}  // namespace eks
