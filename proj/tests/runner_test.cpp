#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "funmatch/runner.hpp"

using namespace funmatch;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
  std::string sub(const std::string& s) const { return (path / s).string(); }
};

std::string read_file_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

// a small untrained teacher checkpoint for plumbing tests
std::string write_teacher(const TempDir& dir, int classes = 4, int resolution = 8, int width = 8,
                          uint64_t seed = 5) {
  ModelSpec spec;
  spec.kind = Arch::mlp;
  spec.depth = 1;
  spec.width = width;
  spec.resolution = resolution;
  spec.channels = 3;
  spec.classes = classes;
  Model teacher = build_model(spec, seed);
  const std::string path = dir.sub("teacher.fmck");
  save_checkpoint(path, model_to_checkpoint(teacher, "teacher"));
  return path;
}

std::string base_distill_config(const TempDir& dir, const std::string& teacher) {
  return "task = distill\n"
         "dataset = synth(seed=1,count=96,classes=4,res=16)\n"
         "test_dataset = synth(seed=1,count=48,classes=4,res=16,offset=96)\n"
         "student_kind = mlp\n"
         "student_depth = 1\n"
         "student_width = 6\n"
         "student_resolution = 8\n"
         "teacher_checkpoint = " +
         teacher +
         "\n"
         "teacher_mode = mix\n"
         "epochs = 2\n"
         "batch_size = 32\n"
         "learning_rate = 0.003\n"
         "log_every = 2\n"
         "shuffle_buffer = 1000\n"
         "out_dir = " +
         dir.sub("run") + "\n";
}

}  // namespace

TEST_CASE("parse_config: minimal distill config picks up the documented defaults") {
  ExperimentConfig cfg = parse_config(
      "task = distill\n"
      "dataset = synth(seed=1,count=64,classes=4,res=16)\n"
      "teacher_checkpoint = teacher.fmck\n"
      "teacher_mode = mix\n"
      "epochs = 10\n");
  CHECK(cfg.temperature == 1.0);
  CHECK(cfg.grad_clip == 1.0);
  CHECK(cfg.schedule == "cosine");
  CHECK(cfg.batch_size == 512);
  CHECK(cfg.mixup_p == 1.0);
  CHECK(cfg.shuffle_buffer == 250000);
  CHECK(cfg.train_split == "train[:90%]");
}

TEST_CASE("parse_config: unknown key errors name the line and key") {
  try {
    parse_config("task = distill\ntemperture = 2\n");
    FAIL("expected config error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::config);
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    CHECK(std::string(e.what()).find("temperture") != std::string::npos);
  }
}

TEST_CASE("parse_config: violated invariants are reported") {
  CHECK_THROWS_AS(parse_config("task = distill\n"
                               "dataset = synth(seed=1,count=64,classes=4,res=16)\n"
                               "teacher_checkpoint = t.fmck\n"
                               "temperature = -1\n"
                               "epochs = 5\n"),
                  Error);
  // mixup cannot pair with a fixed teacher
  CHECK_THROWS_AS(parse_config("task = distill\n"
                               "dataset = synth(seed=1,count=64,classes=4,res=16)\n"
                               "teacher_checkpoint = t.fmck\n"
                               "teacher_mode = fix/cc\n"
                               "mixup = true\n"
                               "epochs = 5\n"),
                  Error);
}

TEST_CASE("parse_config: comments, blank lines and spacing are tolerated") {
  ExperimentConfig cfg = parse_config(
      "# a comment\n"
      "\n"
      "task = supervised_baseline\n"
      "  dataset   =   synth(seed=2,count=64,classes=4,res=16)  \n"
      "epochs = 3\n"
      "mixup = true\n");
  CHECK(cfg.task == Task::supervised_baseline);
  CHECK(cfg.mixup);
}

TEST_CASE("config reference documents every key with its default") {
  const std::string ref = render_config_reference();
  for (const auto& info : cfg_detail::key_table()) CHECK(ref.find(info.name) != std::string::npos);
  CHECK(ref.find("grad_clip") != std::string::npos);
  CHECK(ref.find("sweep_temperatures") != std::string::npos);
}

TEST_CASE("render_config -> parse_config roundtrip preserves the configuration") {
  ExperimentConfig cfg = parse_config(
      "task = distill\n"
      "dataset = synth(seed=3,count=64,classes=4,res=16)\n"
      "teacher_checkpoint = t.fmck\n"
      "temperature = 2.5\n"
      "optimizer = shampoo\n"
      "epochs = 7\n");
  ExperimentConfig back = parse_config(render_config(cfg));
  CHECK(back.temperature == cfg.temperature);
  CHECK(back.optimizer == cfg.optimizer);
  CHECK(back.epochs == cfg.epochs);
  CHECK(render_config(back) == render_config(cfg));
}

TEST_CASE("evaluate: uniform logits break ties toward class 0") {
  ModelSpec spec;
  spec.kind = Arch::mlp;
  spec.depth = 1;
  spec.width = 4;
  spec.resolution = 8;
  spec.channels = 3;
  spec.classes = 5;
  Model m = build_model(spec, 1);
  for (auto& [name, t] : m.params)
    std::fill(t.data(), t.data() + t.size(), 0.f);  // all logits 0 -> argmax ties -> class 0
  Dataset ds = synth_dataset(4, 50, 5, 16);
  int class0 = 0;
  for (auto label : ds.labels)
    if (label == 0) ++class0;
  CHECK(evaluate_model(m, ds) == doctest::Approx(double(class0) / 50));
}

TEST_CASE("evaluate: a perfect model scores 1.0") {
  // two classes encoded in the global pixel level; weights read it out
  Dataset ds;
  ds.height = ds.width = 8;
  ds.channels = 1;
  ds.num_classes = 2;
  for (int i = 0; i < 10; ++i) {
    for (size_t j = 0; j < ds.image_bytes(); ++j) ds.pixels.push_back(i % 2 ? 255 : 0);
    ds.labels.push_back(uint16_t(i % 2));
  }
  ModelSpec spec;
  spec.kind = Arch::mlp;
  spec.depth = 1;
  spec.width = 2;
  spec.resolution = 8;
  spec.channels = 1;
  spec.classes = 2;
  Model m = build_model(spec, 1);
  for (auto& [name, t] : m.params) std::fill(t.data(), t.data() + t.size(), 0.f);
  Tensor& w0 = m.param("fc0/w");
  for (int i = 0; i < 64; ++i) w0.data()[i * 2] = 1.f;  // hidden0 = relu(sum(x))
  m.param("head/w").data()[1] = 1.f;                    // logit1 = hidden0
  CHECK(evaluate_model(m, ds) == doctest::Approx(1.0));
}

TEST_CASE("evaluate: class-count mismatch is a configuration error") {
  ModelSpec spec;
  spec.kind = Arch::mlp;
  spec.depth = 1;
  spec.width = 4;
  spec.resolution = 8;
  spec.channels = 3;
  spec.classes = 7;
  Model m = build_model(spec, 1);
  Dataset ds = synth_dataset(4, 20, 5, 16);
  CHECK_THROWS_AS(evaluate_model(m, ds), Error);
}

TEST_CASE("train: step accounting and determinism of the metrics file") {
  TempDir dir("fm_runner_det");
  const std::string teacher = write_teacher(dir);
  ExperimentConfig cfg = parse_config(base_distill_config(dir, teacher));
  const RunResult first = run_experiment(cfg);
  // 96 * 90% = 86 training examples, batch 32 -> 3 steps/epoch
  CHECK(first.steps == 2 * 3);

  ExperimentConfig again = cfg;
  again.out_dir = dir.sub("run2");
  const RunResult second = run_experiment(again);
  CHECK(read_file_text(first.metrics_path) == read_file_text(second.metrics_path));
  CHECK(read_file_text(first.metrics_path).find("step,epoch,split,metric,value") == 0);

  ExperimentConfig other_seed = cfg;
  other_seed.out_dir = dir.sub("run3");
  other_seed.run_seed = 99;
  const RunResult third = run_experiment(other_seed);
  CHECK(read_file_text(first.metrics_path) != read_file_text(third.metrics_path));
}

TEST_CASE("self-distillation fixed point: student initialized at the teacher") {
  TempDir dir("fm_runner_selfd");
  const std::string teacher = write_teacher(dir, 4, 8, 6, 11);
  std::string text = base_distill_config(dir, teacher);
  text += "student_init = " + teacher + "\n";
  ExperimentConfig cfg = parse_config(text);
  cfg.epochs = 1;
  cfg.weight_decay = 0;  // at the KL minimum gradients vanish; decay would still shrink weights
  const RunResult result = run_experiment(cfg);
  const auto rows = read_metrics_csv(result.metrics_path);
  bool found_step0 = false;
  for (const auto& row : rows) {
    if (row.step == 0 && row.metric == "distill_loss") {
      CHECK(row.value < 1e-3);
      found_step0 = true;
    }
  }
  CHECK(found_step0);
  // top-1 equals the teacher's on the validation views
  Model t = load_model(teacher);
  Dataset base = synth_dataset(1, 96, 4, 16);
  Dataset val = split(base, SplitSpec::parse("train[90%:]"));
  CHECK(evaluate_model(load_model(result.checkpoint_path), val) == doctest::Approx(evaluate_model(t, val)));
}

TEST_CASE("resume equivalence: train k steps, checkpoint, resume m steps == train k+m steps") {
  TempDir dir("fm_runner_resume");
  const std::string teacher = write_teacher(dir);
  for (const std::string optimizer : {"adam", "sgdm", "shampoo"}) {
    ExperimentConfig full = parse_config(base_distill_config(dir, teacher));
    full.epochs = 4;  // 86 train images, batch 32 -> 12 steps total
    full.log_every = 1;
    full.optimizer = optimizer;
    full.checkpoint_steps = 7;  // mid-run, not on an epoch boundary
    full.out_dir = dir.sub("full_" + optimizer);
    const RunResult full_run = run_experiment(full);
    CHECK(full_run.steps == 12);

    ExperimentConfig resumed = full;
    resumed.out_dir = dir.sub("resumed_" + optimizer);
    resumed.resume = (fs::path(full.out_dir) / "checkpoint_step7.fmck").string();
    const RunResult resumed_run = run_experiment(resumed);

    // the continuation reproduces the uninterrupted run metric for metric
    const auto a = read_metrics_csv(full_run.metrics_path);
    const auto b = read_metrics_csv(resumed_run.metrics_path);
    size_t matched = 0;
    for (const auto& row : b) {
      REQUIRE(row.step >= 7);
      for (const auto& ref : a)
        if (ref.step == row.step && ref.metric == row.metric && ref.split == row.split) {
          CHECK(ref.value == row.value);
          ++matched;
        }
    }
    CHECK(matched == b.size());
    CHECK(b.size() >= 3);
    // and the final tensors are bitwise identical (snapshots differ in
    // out_dir/resume, so compare the tensor payloads)
    Checkpoint full_ckpt = load_checkpoint(full_run.checkpoint_path);
    Checkpoint resumed_ckpt = load_checkpoint(resumed_run.checkpoint_path);
    full_ckpt.config_snapshot.clear();
    resumed_ckpt.config_snapshot.clear();
    CHECK(encode_checkpoint(full_ckpt) == encode_checkpoint(resumed_ckpt));
  }
}

TEST_CASE("checkpoint: roundtrip is bitwise, tampering and duplicates are caught") {
  TempDir dir("fm_ckpt");
  ModelSpec spec;
  spec.kind = Arch::mlp;
  spec.depth = 2;
  spec.width = 5;
  spec.resolution = 8;
  spec.channels = 3;
  spec.classes = 4;
  Model m = build_model(spec, 21);
  Checkpoint ckpt = model_to_checkpoint(m, "snapshot text");
  const std::string path = dir.sub("model.fmck");
  save_checkpoint(path, ckpt);
  Checkpoint loaded = load_checkpoint(path);
  CHECK(encode_checkpoint(loaded) == encode_checkpoint(ckpt));
  CHECK(loaded.config_snapshot == "snapshot text");
  Model back = model_from_checkpoint(loaded);
  for (size_t i = 0; i < m.params.size(); ++i)
    CHECK(std::memcmp(back.params[i].second.data(), m.params[i].second.data(),
                      sizeof(float) * size_t(m.params[i].second.size())) == 0);

  std::string bytes = encode_checkpoint(ckpt);
  bytes[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bytes, "test"), Error);

  Checkpoint dup = ckpt;
  dup.tensors.emplace_back(ckpt.tensors[0].first, ckpt.tensors[0].second);
  CHECK_THROWS_AS(decode_checkpoint(encode_checkpoint(dup), "test"), Error);
}

TEST_CASE("training aborts with the step number when the loss blows up") {
  TempDir dir("fm_nan");
  std::string text =
      "task = supervised_baseline\n"
      "dataset = synth(seed=1,count=96,classes=4,res=16)\n"
      "student_kind = mlp\n"
      "student_depth = 1\n"
      "student_width = 6\n"
      "student_resolution = 8\n"
      "epochs = 30\n"
      "batch_size = 32\n"
      "learning_rate = 1000000000\n"
      "grad_clip = 100000000\n"
      "log_every = 1000\n"
      "out_dir = " +
      dir.sub("run") + "\n";
  ExperimentConfig cfg = parse_config(text);
  try {
    run_experiment(cfg);
    // divergence is not guaranteed in principle; if it trained, that is fine
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("step") != std::string::npos);
  }
}

TEST_CASE("sweep: runs the grid, selects deterministically, reports test accuracy of the winner") {
  TempDir dir("fm_sweep");
  const std::string teacher = write_teacher(dir);
  ExperimentConfig base = parse_config(base_distill_config(dir, teacher));
  base.epochs = 1;
  base.out_dir = dir.sub("sweep");
  HyperGrid grid;
  grid.learning_rates = {0.001f, 0.003f};
  grid.weight_decays = {1e-4f};
  grid.temperatures = {1.f};
  SweepResult result = sweep(base, grid);
  REQUIRE(result.rows.size() == 2);
  CHECK(result.rows[0].lr == doctest::Approx(0.001));
  CHECK(result.rows[1].lr == doctest::Approx(0.003));
  CHECK(fs::exists(result.table_path));
  CHECK(result.test_top1 >= 0.0);
  CHECK(result.test_top1 <= 1.0);

  SweepResult again = sweep(base, grid);
  CHECK(again.best_index == result.best_index);
  CHECK(again.rows[0].val_top1 == result.rows[0].val_top1);
}

TEST_CASE("select_best breaks ties toward lower lr, then wd, then temperature") {
  std::vector<SweepRow> rows = {
      {0.003, 1e-4, 1, 0.8, ""},
      {0.001, 3e-4, 1, 0.8, ""},
      {0.001, 1e-4, 2, 0.8, ""},
      {0.001, 1e-4, 1, 0.8, ""},
      {0.01, 1e-5, 5, 0.7, ""},
  };
  CHECK(select_best(rows) == 3);
  rows[4].val_top1 = 0.9;
  CHECK(select_best(rows) == 4);
}

TEST_CASE("precompute task writes a loadable target store") {
  TempDir dir("fm_precomp");
  const std::string teacher = write_teacher(dir);
  std::string text =
      "task = precompute\n"
      "dataset = synth(seed=1,count=40,classes=4,res=16)\n"
      "student_resolution = 8\n"
      "teacher_checkpoint = " +
      teacher +
      "\n"
      "teacher_mode = fix/ic_ens\n"
      "ensemble_crops = 3\n"
      "target_store = " +
      dir.sub("targets.fmts") +
      "\n"
      "out_dir = " +
      dir.sub("out") + "\n";
  ExperimentConfig cfg = parse_config(text);
  run_experiment(cfg);
  TargetStore store = load_target_store(dir.sub("targets.fmts"));
  CHECK(store.count() == 36);  // train[:90%] of 40
  CHECK(store.num_classes == 4);
}

TEST_CASE("fixed-mode distillation consumes the store and runs") {
  TempDir dir("fm_fixcc");
  const std::string teacher = write_teacher(dir);
  std::string text = base_distill_config(dir, teacher);
  ExperimentConfig cfg = parse_config(text);
  cfg.teacher_mode = "fix/cc";
  cfg.epochs = 1;
  const RunResult result = run_experiment(cfg);
  CHECK(result.steps == 3);
  const auto rows = read_metrics_csv(result.metrics_path);
  CHECK(!rows.empty());
}

TEST_CASE("eval task reports top-1 for a checkpoint") {
  TempDir dir("fm_eval");
  const std::string teacher = write_teacher(dir);
  std::string text =
      "task = eval\n"
      "dataset = synth(seed=1,count=96,classes=4,res=16)\n"
      "test_dataset = synth(seed=1,count=48,classes=4,res=16,offset=96)\n"
      "eval_checkpoint = " +
      teacher +
      "\n"
      "eval_split = test\n"
      "out_dir = " +
      dir.sub("out") + "\n";
  ExperimentConfig cfg = parse_config(text);
  const RunResult result = run_experiment(cfg);
  CHECK(result.final_val_top1 >= 0.0);
  CHECK(result.final_val_top1 <= 1.0);
}

TEST_CASE("shared-view consistency assertion holds during same/ic training") {
  TempDir dir("fm_consistency");
  const std::string teacher = write_teacher(dir);
  ExperimentConfig cfg = parse_config(base_distill_config(dir, teacher));
  cfg.teacher_mode = "same/ic";
  cfg.epochs = 1;
  setenv("FUNMATCH_ASSERT_CONSISTENT_VIEWS", "1", 1);
  CHECK_NOTHROW(run_experiment(cfg));
  unsetenv("FUNMATCH_ASSERT_CONSISTENT_VIEWS");
}

TEST_CASE("out-of-domain distillation draws images from the distill dataset") {
  TempDir dir("fm_ood");
  const std::string teacher = write_teacher(dir);
  std::string text = base_distill_config(dir, teacher);
  text += "distill_dataset = synth(seed=77,count=64,classes=4,res=16)\n";
  ExperimentConfig cfg = parse_config(text);
  cfg.epochs = 1;
  const RunResult result = run_experiment(cfg);
  CHECK(result.steps == 2);  // 64 distill images, batch 32
}
