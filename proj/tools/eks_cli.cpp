// Command-line front end: dataset generation, teacher training, knowledge
// decomposition, expert export, task switching, evaluation, the verification
// battery, the cost-model bench, and MIG scoring. Every run is deterministic
// given --seed; inputs are never mutated, outputs go to --out.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "eks/eks.hpp"

namespace {

std::vector<size_t> parse_size_list(const std::string& csv, const char* what) {
  std::vector<size_t> out;
  std::istringstream is(csv);
  std::string item;
  while (std::getline(is, item, ',')) {
    if (item.empty()) eks::fail(std::string(what) + ": empty entry in list \"" + csv + "\"");
    out.push_back(std::stoull(item));
  }
  if (out.empty()) eks::fail(std::string(what) + ": empty list");
  return out;
}

eks::ArchConfig make_arch(const std::string& channels_csv, size_t tasks, size_t classes_each,
                          size_t proj_dim) {
  eks::ArchConfig cfg;
  cfg.in_channels = 1;
  cfg.in_size = eks::kImageSize;
  for (size_t c : parse_size_list(channels_csv, "--channels")) cfg.stages.push_back({c, 3, 2, true});
  cfg.proj_dim = proj_dim;
  cfg.task_classes.assign(tasks, classes_each);
  return cfg;
}

// key=value config file ('#' comments); explicit flags win over file values
std::map<std::string, std::string> read_config_file(const std::string& path) {
  std::map<std::string, std::string> kv;
  std::ifstream is(path);
  if (!is) eks::fail("cannot open config file: " + path);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos) eks::fail("config file " + path + ": malformed line \"" + line + "\"");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

void write_metrics_file(const std::vector<eks::EpochLog>& log, const std::string& path) {
  if (path.empty()) return;
  std::ofstream os(path, std::ios::trunc);
  if (!os) eks::fail("cannot open for writing: " + path);
  for (const eks::EpochLog& e : log) os << eks::epoch_log_line(e) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"knowledge decomposition toolkit: shared backbone + low-rank task experts"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic multi-task dataset");
  struct {
    size_t tasks = 4;
    std::string classes = "4";
    size_t samples = 50;
    double sigma = 0.1;
    std::string families = "bars,blobs,checker";
    uint64_t seed = 1;
    std::string out;
    std::string csv;
  } g;
  gen->add_option("--tasks", g.tasks, "number of tasks")->capture_default_str();
  gen->add_option("--classes", g.classes, "classes per task (single value or csv)")->capture_default_str();
  gen->add_option("--samples-per-class", g.samples, "samples per class")->capture_default_str();
  gen->add_option("--sigma", g.sigma, "pixel noise sigma")->capture_default_str();
  gen->add_option("--families", g.families, "generator families, cycled over tasks (bars|blobs|checker)")
      ->capture_default_str();
  gen->add_option("--seed", g.seed, "rng seed")->capture_default_str();
  gen->add_option("--out", g.out, "output dataset file")->required();
  gen->add_option("--csv", g.csv, "also export the sample index as csv");

  // train-teacher
  auto* tt = app.add_subcommand("train-teacher", "train the dense teacher with a unified global head");
  struct {
    std::string data;
    std::string out;
    std::string metrics;
    std::string channels = "32,64,128,256";
    double lr = 0.05;
    size_t epochs = 100;
    size_t batch = 32;
    uint64_t seed = 1;
  } t;
  tt->add_option("--data", t.data, "dataset file")->required();
  tt->add_option("--out", t.out, "output teacher checkpoint")->required();
  tt->add_option("--metrics", t.metrics, "per-epoch metrics file");
  tt->add_option("--channels", t.channels, "stage output channels, csv")->capture_default_str();
  tt->add_option("--lr", t.lr, "initial learning rate, cosine-annealed to 0")->capture_default_str();
  tt->add_option("--epochs", t.epochs, "training epochs")->capture_default_str();
  tt->add_option("--batch", t.batch, "batch size")->capture_default_str();
  tt->add_option("--seed", t.seed, "rng seed")->capture_default_str();

  // decompose
  auto* dc = app.add_subcommand("decompose", "train the student: shared backbone + per-task experts");
  struct {
    std::string data;
    std::string teacher;
    std::string out;
    std::string metrics;
    std::string summary;
    std::string config_file;
    std::string channels = "16,32,64,128";
    double lr = 0.05;
    size_t epochs = 100;
    size_t batch = 32;
    double alpha = 10.0;
    double beta = 1.0;
    size_t rank = 8;
    uint64_t seed = 1;
    bool per_task = false;
    bool no_experts = false;
    bool no_proj = false;
  } d;
  dc->add_option("--data", d.data, "dataset file")->required();
  dc->add_option("--teacher", d.teacher, "trained teacher checkpoint")->required();
  dc->add_option("--out", d.out, "output student checkpoint")->required();
  dc->add_option("--metrics", d.metrics, "per-epoch metrics file");
  dc->add_option("--summary", d.summary, "final summary file");
  dc->add_option("--config", d.config_file, "key=value config file (flags win)");
  dc->add_option("--channels", d.channels, "student stage channels, csv")->capture_default_str();
  dc->add_option("--lr", d.lr, "initial learning rate, cosine-annealed to 0")->capture_default_str();
  dc->add_option("--epochs", d.epochs, "training epochs")->capture_default_str();
  dc->add_option("--batch", d.batch, "batch size")->capture_default_str();
  dc->add_option("--alpha", d.alpha, "softmax temperature")->capture_default_str();
  dc->add_option("--beta", d.beta, "transfer loss weight")->capture_default_str();
  dc->add_option("--rank", d.rank, "expert rank r")->capture_default_str();
  dc->add_option("--seed", d.seed, "rng seed")->capture_default_str();
  dc->add_flag("--per-task-batches", d.per_task, "use per-task batches (naive-oracle comparison mode)");
  dc->add_flag("--no-experts", d.no_experts, "freeze expert deltas at zero (shared-backbone ablation)");
  dc->add_flag("--no-proj", d.no_proj, "disable the feature projection (teacher dim must match)");

  // export
  auto* ex = app.add_subcommand("export", "fuse one task's expert into a deployable checkpoint");
  struct {
    std::string ckpt;
    size_t task = 0;
    std::string out;
  } e;
  ex->add_option("--ckpt", e.ckpt, "student checkpoint")->required();
  ex->add_option("--task", e.task, "task index to fuse")->required();
  ex->add_option("--out", e.out, "output deploy checkpoint")->required();

  // switch
  auto* sw = app.add_subcommand("switch", "retarget the deployment task of a student checkpoint");
  struct {
    std::string ckpt;
    int from = -2;
    size_t to = 0;
    std::string out;
  } s;
  sw->add_option("--ckpt", s.ckpt, "student checkpoint")->required();
  sw->add_option("--from", s.from, "expected current deployment task (validated when given)");
  sw->add_option("--to", s.to, "new deployment task")->required();
  sw->add_option("--out", s.out, "output checkpoint")->required();

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset's validation split");
  struct {
    std::string ckpt;
    std::string data;
    std::string out;
  } v;
  ev->add_option("--ckpt", v.ckpt, "student, teacher or deploy checkpoint")->required();
  ev->add_option("--data", v.data, "dataset file")->required();
  ev->add_option("--out", v.out, "write the accuracy summary to this file");

  // verify
  auto* vf = app.add_subcommand("verify", "run the invariant battery and print one line per check");
  struct {
    uint64_t seed = 1;
    std::string out;
  } w;
  vf->add_option("--seed", w.seed, "rng seed")->capture_default_str();
  vf->add_option("--out", w.out, "also write the report to this file");

  // bench
  auto* bn = app.add_subcommand("bench", "evaluate the cost model for one configuration");
  struct {
    uint64_t T = 11, r = 8, b = 64, l = 49, dmodel = 256;
  } c;
  bn->add_option("--T", c.T, "number of tasks")->capture_default_str();
  bn->add_option("--r", c.r, "expert rank")->capture_default_str();
  bn->add_option("--b", c.b, "batch size")->capture_default_str();
  bn->add_option("--l", c.l, "sequence length")->capture_default_str();
  bn->add_option("--d", c.dmodel, "feature dimension")->capture_default_str();

  // mig
  auto* mg = app.add_subcommand("mig", "MIG disentanglement score of student features");
  struct {
    std::string ckpt;
    std::string data;
  } m;
  mg->add_option("--ckpt", m.ckpt, "student checkpoint")->required();
  mg->add_option("--data", m.data, "dataset file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& help) {
    app.exit(help);
    return 0;
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return 2;
  }

  try {
    if (*gen) {
      std::vector<size_t> classes = parse_size_list(g.classes, "--classes");
      std::vector<std::string> fams;
      {
        std::istringstream is(g.families);
        std::string item;
        while (std::getline(is, item, ',')) fams.push_back(item);
      }
      std::vector<eks::TaskSpec> specs;
      for (size_t t = 0; t < g.tasks; ++t) {
        eks::TaskSpec spec;
        spec.task_id = t;
        spec.classes = classes[t % classes.size()];
        spec.family = eks::family_from_name(fams[t % fams.size()]);
        spec.sigma = g.sigma;
        spec.samples_per_class = g.samples;
        specs.push_back(spec);
      }
      eks::Dataset data = eks::generate(specs, g.seed);
      data.save(g.out);
      if (!g.csv.empty()) data.export_csv(g.csv);
      std::cout << "wrote " << data.size() << " samples over " << data.num_tasks() << " tasks to "
                << g.out << "\n";
    } else if (*tt) {
      eks::Dataset data = eks::Dataset::load(t.data);
      eks::ArchConfig cfg = make_arch(t.channels, data.num_tasks(), 2, 0);
      cfg.task_classes = data.task_classes();
      eks::PlainConvNet teacher(cfg, cfg.total_classes(), t.seed);
      eks::TrainConfig tc;
      tc.lr = t.lr;
      tc.epochs = t.epochs;
      tc.batch = t.batch;
      tc.seed = t.seed;
      tc.rank = 1;
      tc.alpha = 1.0;
      std::vector<eks::EpochLog> log;
      eks::train_teacher(teacher, data, tc, &log);
      write_metrics_file(log, t.metrics);
      eks::save_teacher(teacher, t.out);
      double acc = eks::evaluate_teacher_global(teacher, data);
      std::cout << "teacher global accuracy " << acc << ", saved to " << t.out << "\n";
    } else if (*dc) {
      if (!d.config_file.empty()) {
        std::map<std::string, std::string> kv = read_config_file(d.config_file);
        auto unset = [&](const char* flag) { return dc->count(flag) == 0; };
        for (const auto& [key, val] : kv) {
          if (key == "channels" && unset("--channels")) d.channels = val;
          else if (key == "lr" && unset("--lr")) d.lr = std::stod(val);
          else if (key == "epochs" && unset("--epochs")) d.epochs = std::stoull(val);
          else if (key == "batch" && unset("--batch")) d.batch = std::stoull(val);
          else if (key == "alpha" && unset("--alpha")) d.alpha = std::stod(val);
          else if (key == "beta" && unset("--beta")) d.beta = std::stod(val);
          else if (key == "rank" && unset("--rank")) d.rank = std::stoull(val);
          else if (key == "seed" && unset("--seed")) d.seed = std::stoull(val);
          else if (key == "channels" || key == "lr" || key == "epochs" || key == "batch" ||
                   key == "alpha" || key == "beta" || key == "rank" || key == "seed")
            ;  // flag given on the command line wins
          else
            eks::fail("config file " + d.config_file + ": unknown key \"" + key + "\"");
        }
      }
      eks::Dataset data = eks::Dataset::load(d.data);
      eks::PlainConvNet teacher = eks::load_teacher(d.teacher);
      teacher.freeze();
      eks::ArchConfig cfg =
          make_arch(d.channels, data.num_tasks(), 2, d.no_proj ? 0 : teacher.config().feature_dim());
      cfg.task_classes = data.task_classes();
      eks::DecompModel student(cfg, d.rank, d.seed);
      eks::TrainConfig tc;
      tc.lr = d.lr;
      tc.epochs = d.epochs;
      tc.batch = d.batch;
      tc.alpha = d.alpha;
      tc.beta = d.beta;
      tc.rank = d.rank;
      tc.seed = d.seed;
      tc.per_task_batches = d.per_task;
      tc.train_experts = !d.no_experts;
      std::vector<eks::EpochLog> log;
      eks::MetricsReport report = eks::train_decomposition(teacher, student, data, tc, &log);
      write_metrics_file(log, d.metrics);
      if (!d.summary.empty()) eks::write_summary(report, d.summary);
      eks::save_student(student, d.out);
      std::cout << "avg accuracy " << report.avg_acc << " mig " << report.mig << ", saved to "
                << d.out << "\n";
    } else if (*ex) {
      eks::DecompModel student = eks::load_student(e.ckpt);
      eks::PlainConvNet expert = student.export_expert(e.task);
      eks::save_deploy(expert, e.task, e.out);
      std::cout << "exported task " << e.task << " expert (" << expert.param_count()
                << " params) to " << e.out << "\n";
    } else if (*sw) {
      eks::switch_checkpoint(s.ckpt, s.out, s.from, s.to);
      std::cout << "deployment task set to " << s.to << " in " << s.out << "\n";
    } else if (*ev) {
      eks::Dataset data = eks::Dataset::load(v.data);
      std::string blob = eks::read_file(v.ckpt);
      eks::CheckpointHeader h = eks::parse_checkpoint_header(blob, v.ckpt);
      std::ostringstream out;
      out.precision(17);
      if (h.kind == "student") {
        int fused = -1;
        eks::DecompModel student = eks::load_student(v.ckpt, &fused);
        if (fused >= 0) {
          eks::PlainConvNet expert = student.export_expert(static_cast<size_t>(fused));
          double acc = eks::evaluate_deploy(expert, data, static_cast<size_t>(fused));
          out << "task" << fused << "=" << acc << "\n";
        } else {
          eks::TaskAccuracy acc = eks::evaluate_student(student, data);
          for (size_t i = 0; i < acc.per_task.size(); ++i)
            out << "acc" << i << "=" << acc.per_task[i] << "\n";
          out << "avg=" << acc.average << "\n";
        }
      } else if (h.kind == "deploy") {
        size_t task = 0;
        eks::PlainConvNet expert = eks::load_deploy(v.ckpt, &task);
        out << "task" << task << "=" << eks::evaluate_deploy(expert, data, task) << "\n";
      } else {
        eks::PlainConvNet teacher = eks::load_teacher(v.ckpt);
        out << "global=" << eks::evaluate_teacher_global(teacher, data) << "\n";
      }
      std::cout << out.str();
      if (!v.out.empty()) {
        std::ofstream os(v.out, std::ios::trunc);
        os << out.str();
      }
    } else if (*vf) {
      eks::VerificationReport report = eks::verify_all(w.seed);
      std::cout << report.to_text();
      if (!w.out.empty()) {
        std::ofstream os(w.out, std::ios::trunc);
        os << report.to_text();
      }
      return report.all_pass() ? 0 : 1;
    } else if (*bn) {
      eks::EksCostReport rep = eks::eks_cost_model(c.T, c.r, c.b, c.l, c.dmodel);
      std::cout.precision(17);
      std::cout << "eks_cost=" << rep.eks_cost << "\n"
                << "flora_cost=" << rep.flora_cost << "\n"
                << "eks_cheaper=" << (rep.eks_cheaper ? "true" : "false") << "\n";
    } else if (*mg) {
      eks::Dataset data = eks::Dataset::load(m.data);
      int fused = -1;
      eks::DecompModel student = eks::load_student(m.ckpt, &fused);
      if (fused >= 0) eks::fail("mig: checkpoint is targeted for deployment; expected an unfused student");
      std::vector<size_t> labels;
      eks::Tensor features = eks::collect_features(student, data, &labels);
      std::cout.precision(17);
      std::cout << "mig=" << eks::mig_score(features, labels) << "\n";
    }
  } catch (const eks::Error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
  return 0;
}
