#pragma once

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "funmatch/augment.hpp"
#include "funmatch/checkpoint.hpp"
#include "funmatch/config.hpp"
#include "funmatch/data.hpp"
#include "funmatch/distill.hpp"
#include "funmatch/metrics.hpp"
#include "funmatch/nn.hpp"
#include "funmatch/optim.hpp"

namespace funmatch {

// ---------------------------------------------------------------------------
// Dataset references: FMDS paths or synth(...) expressions.
// ---------------------------------------------------------------------------

inline bool is_synth_ref(const std::string& ref) { return ref.rfind("synth(", 0) == 0; }

inline Dataset resolve_dataset_ref(const std::string& ref) {
  if (ref.empty()) throw_error(ErrorKind::config, "empty dataset reference");
  if (!is_synth_ref(ref)) return load_dataset(ref);
  if (ref.back() != ')') throw_error(ErrorKind::config, "bad dataset reference '" + ref + "'");
  uint64_t seed = 1;
  int count = 0, classes = 0, res = 0, offset = 0;
  std::stringstream ss(ref.substr(6, ref.size() - 7));
  std::string item;
  while (std::getline(ss, item, ',')) {
    const size_t eq = item.find('=');
    if (eq == std::string::npos)
      throw_error(ErrorKind::config, "bad synth parameter '" + item + "' in '" + ref + "'");
    const std::string key = cfg_detail::trim(item.substr(0, eq));
    const int64_t value = cfg_detail::parse_int(cfg_detail::trim(item.substr(eq + 1)), key, 0);
    if (key == "seed") seed = uint64_t(value);
    else if (key == "count") count = int(value);
    else if (key == "classes") classes = int(value);
    else if (key == "res") res = int(value);
    else if (key == "offset") offset = int(value);
    else throw_error(ErrorKind::config, "unknown synth parameter '" + key + "' in '" + ref + "'");
  }
  return synth_dataset(seed, count, classes, res, offset);
}

// ---------------------------------------------------------------------------
// Model <-> checkpoint.
// ---------------------------------------------------------------------------

namespace run_detail {

inline void append_spec_tensors(const ModelSpec& spec, std::vector<std::pair<std::string, Tensor>>& out) {
  auto put = [&](const char* name, float v) { out.emplace_back(name, Tensor::scalar(v)); };
  put("spec/kind", spec.kind == Arch::mlp ? 0.f : 1.f);
  put("spec/depth", float(spec.depth));
  put("spec/width", float(spec.width));
  put("spec/resolution", float(spec.resolution));
  put("spec/channels", float(spec.channels));
  put("spec/classes", float(spec.classes));
  put("spec/groups", float(spec.groups));
  put("spec/ws", spec.weight_standardization ? 1.f : 0.f);
}

inline ModelSpec spec_from_checkpoint(const Checkpoint& ckpt) {
  auto get = [&](const char* name) {
    const Tensor* t = ckpt.find(name);
    if (!t) throw_error(ErrorKind::format, std::string("checkpoint missing ") + name);
    return t->item();
  };
  ModelSpec spec;
  spec.kind = get("spec/kind") == 0.f ? Arch::mlp : Arch::small_resnet;
  spec.depth = int(get("spec/depth"));
  spec.width = int(get("spec/width"));
  spec.resolution = int(get("spec/resolution"));
  spec.channels = int(get("spec/channels"));
  spec.classes = int(get("spec/classes"));
  spec.groups = int(get("spec/groups"));
  spec.weight_standardization = get("spec/ws") != 0.f;
  return spec;
}

}  // namespace run_detail

inline Checkpoint model_to_checkpoint(const Model& m, const std::string& config_snapshot) {
  Checkpoint ckpt;
  run_detail::append_spec_tensors(m.spec, ckpt.tensors);
  for (const auto& [name, t] : m.params) ckpt.tensors.emplace_back(name, t);
  ckpt.config_snapshot = config_snapshot;
  return ckpt;
}

/// Copies model parameters (ignoring spec/ and opt/ entries) into an
/// existing model by name.
inline void load_model_params(Model& m, const Checkpoint& ckpt) {
  for (auto& [name, t] : m.params) {
    const Tensor* src = ckpt.find(name);
    if (!src) throw_error(ErrorKind::format, "checkpoint has no tensor '" + name + "'");
    if (src->shape() != t.shape())
      throw_error(ErrorKind::format, "checkpoint tensor '" + name + "' has shape " +
                                         shape_str(src->shape()) + ", model expects " +
                                         shape_str(t.shape()));
    std::memcpy(t.data(), src->data(), sizeof(float) * size_t(t.size()));
  }
}

inline Model model_from_checkpoint(const Checkpoint& ckpt) {
  Model m = build_model(run_detail::spec_from_checkpoint(ckpt), 0);
  load_model_params(m, ckpt);
  return m;
}

inline Model load_model(const std::string& path) { return model_from_checkpoint(load_checkpoint(path)); }

// ---------------------------------------------------------------------------
// Optimizer wrapper with checkpointable state.
// ---------------------------------------------------------------------------

struct Optimizer {
  enum class Kind { adam, sgdm, shampoo };
  Kind kind = Kind::adam;
  float momentum = 0.9f;
  ShampooConfig shampoo_cfg;
  AdamState adam;
  SgdmState sgdm;
  ShampooState shampoo;

  static Optimizer from_config(const ExperimentConfig& cfg) {
    Optimizer opt;
    opt.momentum = float(cfg.momentum);
    if (cfg.optimizer == "adam") opt.kind = Kind::adam;
    else if (cfg.optimizer == "sgdm") opt.kind = Kind::sgdm;
    else opt.kind = Kind::shampoo;
    opt.shampoo_cfg.block_limit = cfg.shampoo_block_size;
    opt.shampoo_cfg.refresh_interval = cfg.shampoo_refresh_interval;
    opt.shampoo_cfg.damping = float(cfg.shampoo_damping);
    opt.shampoo_cfg.momentum = float(cfg.momentum);
    opt.shampoo_cfg.graft_to_adam = cfg.shampoo_grafting;
    return opt;
  }

  void step(std::span<Tensor> params, float lr, float wd) {
    switch (kind) {
      case Kind::adam: adam_step(adam, params, lr, wd); break;
      case Kind::sgdm: sgdm_step(sgdm, params, lr, wd, momentum); break;
      case Kind::shampoo: shampoo_step(shampoo, params, lr, wd, shampoo_cfg); break;
    }
  }

  int64_t step_count() const {
    switch (kind) {
      case Kind::adam: return adam.step;
      case Kind::sgdm: return sgdm.step;
      case Kind::shampoo: return shampoo.step;
    }
    return 0;
  }

  void append_state_tensors(const Model& m, std::vector<std::pair<std::string, Tensor>>& out) const {
    auto vec = [](const std::vector<float>& v) {
      return Tensor({int(v.size())}, std::vector<float>(v));
    };
    out.emplace_back("opt/step", Tensor::scalar(float(step_count())));
    const auto& names = m.params;
    if (kind == Kind::adam) {
      for (size_t i = 0; i < adam.m.size(); ++i) {
        out.emplace_back("opt/adam/m/" + names[i].first, vec(adam.m[i]));
        out.emplace_back("opt/adam/v/" + names[i].first, vec(adam.v[i]));
      }
    } else if (kind == Kind::sgdm) {
      for (size_t i = 0; i < sgdm.velocity.size(); ++i)
        out.emplace_back("opt/sgdm/v/" + names[i].first, vec(sgdm.velocity[i]));
    } else {
      for (size_t i = 0; i < shampoo.params.size(); ++i) {
        const auto& p = shampoo.params[i];
        const std::string& pname = names[i].first;
        out.emplace_back("opt/shampoo/mom/" + pname, vec(p.momentum));
        for (size_t b = 0; b < p.blocks.size(); ++b) {
          const std::string base = "opt/shampoo/" + pname + "/" + std::to_string(b);
          out.emplace_back(base + "/L", vec(p.blocks[b].left));
          out.emplace_back(base + "/R", vec(p.blocks[b].right));
          out.emplace_back(base + "/PL", vec(p.blocks[b].left_root));
          out.emplace_back(base + "/PR", vec(p.blocks[b].right_root));
        }
      }
      for (size_t i = 0; i < shampoo.graft.m.size(); ++i) {
        out.emplace_back("opt/shampoo/gm/" + names[i].first, vec(shampoo.graft.m[i]));
        out.emplace_back("opt/shampoo/gv/" + names[i].first, vec(shampoo.graft.v[i]));
      }
    }
  }

  void load_state_tensors(const Model& m, const Checkpoint& ckpt, std::span<Tensor> params) {
    auto get = [&](const std::string& name, std::vector<float>& dst) {
      const Tensor* t = ckpt.find(name);
      if (!t) throw_error(ErrorKind::format, "checkpoint has no optimizer tensor '" + name + "'");
      if (t->size() != int64_t(dst.size()))
        throw_error(ErrorKind::format, "optimizer tensor '" + name + "' has wrong size");
      std::copy(t->data(), t->data() + t->size(), dst.begin());
    };
    const Tensor* step_tensor = ckpt.find("opt/step");
    if (!step_tensor) throw_error(ErrorKind::format, "checkpoint has no optimizer state (opt/step)");
    const int64_t steps = int64_t(step_tensor->item());
    if (kind == Kind::adam) {
      adam.ensure(params);
      adam.step = steps;
      for (size_t i = 0; i < adam.m.size(); ++i) {
        get("opt/adam/m/" + m.params[i].first, adam.m[i]);
        get("opt/adam/v/" + m.params[i].first, adam.v[i]);
      }
    } else if (kind == Kind::sgdm) {
      sgdm.ensure(params);
      sgdm.step = steps;
      for (size_t i = 0; i < sgdm.velocity.size(); ++i)
        get("opt/sgdm/v/" + m.params[i].first, sgdm.velocity[i]);
    } else {
      shampoo.ensure(params, shampoo_cfg);
      if (shampoo_cfg.graft_to_adam) shampoo.graft.ensure(params);
      shampoo.step = steps;
      shampoo.graft.step = steps;
      for (size_t i = 0; i < shampoo.params.size(); ++i) {
        auto& p = shampoo.params[i];
        const std::string& pname = m.params[i].first;
        get("opt/shampoo/mom/" + pname, p.momentum);
        for (size_t b = 0; b < p.blocks.size(); ++b) {
          const std::string base = "opt/shampoo/" + pname + "/" + std::to_string(b);
          auto& blk = p.blocks[b];
          blk.left_root.resize(blk.left.size());
          blk.right_root.resize(blk.right.size());
          get(base + "/L", blk.left);
          get(base + "/R", blk.right);
          get(base + "/PL", blk.left_root);
          get(base + "/PR", blk.right_root);
        }
        if (shampoo_cfg.graft_to_adam) {
          get("opt/shampoo/gm/" + pname, shampoo.graft.m[i]);
          get("opt/shampoo/gv/" + pname, shampoo.graft.v[i]);
        }
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Evaluation.
// ---------------------------------------------------------------------------

/// Deterministic evaluation views: center crop + resize to the model input.
struct EvalSet {
  Tensor images;  // [N, res, res, C]
  std::vector<int> labels;
};

inline EvalSet build_eval_set(const Dataset& ds, int resolution) {
  EvalSet set;
  const int n = ds.count();
  set.images = Tensor({n, resolution, resolution, ds.channels});
  set.labels.resize(size_t(n));
  const CropRect crop = center_crop(ds.height, ds.width);
  const int64_t stride = int64_t(resolution) * resolution * ds.channels;
  for (int i = 0; i < n; ++i) {
    const Tensor view = apply_view(ds.image_tensor(i), crop, false, resolution);
    std::memcpy(set.images.data() + size_t(i) * stride, view.data(), sizeof(float) * size_t(stride));
    set.labels[size_t(i)] = ds.labels[size_t(i)];
  }
  return set;
}

/// Top-1 accuracy; argmax ties break toward the lowest class index.
inline double evaluate_views(const Model& m, const EvalSet& set, int eval_batch = 512) {
  const int n = set.images.dim(0);
  const int res = set.images.dim(1), ch = set.images.dim(3);
  const int64_t stride = int64_t(res) * res * ch;
  int correct = 0;
  for (int start = 0; start < n; start += eval_batch) {
    const int end = std::min(n, start + eval_batch);
    Tensor batch({end - start, res, res, ch},
                 std::vector<float>(set.images.data() + size_t(start) * stride,
                                    set.images.data() + size_t(end) * stride));
    Tensor logits = forward(m, batch);
    const int c = logits.dim(1);
    for (int i = 0; i < end - start; ++i) {
      const float* row = logits.data() + size_t(i) * c;
      int best = 0;
      for (int j = 1; j < c; ++j)
        if (row[j] > row[best]) best = j;
      if (best == set.labels[size_t(start + i)]) ++correct;
    }
  }
  return double(correct) / double(n);
}

inline double evaluate_model(const Model& m, const Dataset& ds) {
  if (m.spec.classes != ds.num_classes)
    throw_error(ErrorKind::config, "evaluate: model has " + std::to_string(m.spec.classes) +
                                       " classes, dataset has " + std::to_string(ds.num_classes));
  return evaluate_views(m, build_eval_set(ds, m.spec.resolution));
}

// ---------------------------------------------------------------------------
// Experiment runner.
// ---------------------------------------------------------------------------

struct RunResult {
  std::string checkpoint_path;
  std::string metrics_path;
  int64_t steps = 0;
  double final_val_top1 = 0;
  double final_train_loss = 0;       // last logged training loss
  double final_epoch_train_loss = 0; // mean training loss over the final epoch
};

namespace run_detail {

struct ResolvedData {
  Dataset train, val;
  std::optional<Dataset> test;
  Dataset distill;  // images the student trains on (equals train unless overridden)
};

inline Dataset slice_collection(const Dataset& base, const std::optional<Dataset>& test_ds,
                                const std::string& expr) {
  const SplitSpec spec = SplitSpec::parse(expr);
  if (spec.base == "train") return split(base, spec);
  if (spec.base == "test") {
    if (!test_ds)
      throw_error(ErrorKind::config, "split '" + expr + "' references 'test' but test_dataset is not set");
    return split(*test_ds, spec);
  }
  throw_error(ErrorKind::config, "split '" + expr + "' must reference 'train' or 'test'");
}

inline ResolvedData resolve_data(const ExperimentConfig& cfg) {
  ResolvedData data;
  Dataset base = resolve_dataset_ref(cfg.dataset);
  std::optional<Dataset> test_ds;
  if (!cfg.test_dataset.empty()) test_ds = resolve_dataset_ref(cfg.test_dataset);
  data.train = slice_collection(base, test_ds, cfg.train_split);
  data.val = slice_collection(base, test_ds, cfg.val_split);
  data.distill = cfg.distill_dataset.empty() ? data.train : resolve_dataset_ref(cfg.distill_dataset);
  data.test = std::move(test_ds);
  return data;
}

inline void require_file(const std::string& path, const char* what) {
  if (!std::filesystem::exists(path))
    throw_error(ErrorKind::config, std::string(what) + " '" + path + "' does not exist");
}

inline std::vector<Tensor> param_tensors(Model& m) {
  std::vector<Tensor> out;
  out.reserve(m.params.size());
  for (auto& [n, t] : m.params) out.push_back(t);
  return out;
}

inline bool consistency_checks_enabled() {
  const char* v = std::getenv("FUNMATCH_ASSERT_CONSISTENT_VIEWS");
  return v && *v && std::string(v) != "0";
}

}  // namespace run_detail

inline RunResult run_experiment(const ExperimentConfig& cfg);

namespace run_detail {

// Float images converted once per run; Tensor handles are cheap to share.
struct ImageCache {
  std::vector<Tensor> images;

  explicit ImageCache(const Dataset& ds) {
    images.reserve(size_t(ds.count()));
    for (int i = 0; i < ds.count(); ++i) images.push_back(ds.image_tensor(i));
  }
  std::vector<Tensor> gather(std::span<const int> indices) const {
    std::vector<Tensor> out;
    out.reserve(indices.size());
    for (int i : indices) out.push_back(images[size_t(i)]);
    return out;
  }
};

struct TeacherBundle {
  std::vector<Model> models;
  std::vector<const Model*> pointers;
  DistillConfig distill_cfg;
};

inline TeacherBundle load_teachers(const ExperimentConfig& cfg) {
  TeacherBundle bundle;
  const auto paths = cfg_detail::split_list(cfg.teacher_checkpoint);
  for (const auto& p : paths) {
    require_file(p, "teacher_checkpoint");
    bundle.models.push_back(load_model(p));
    set_trainable(bundle.models.back(), false);
  }
  bundle.distill_cfg.temperature = float(cfg.temperature);
  bundle.distill_cfg.student_resolution = cfg.student_resolution;
  if (cfg.teacher_resolution.empty()) {
    bundle.distill_cfg.teacher_resolutions.assign(bundle.models.size(), cfg.student_resolution);
  } else {
    bundle.distill_cfg.teacher_resolutions.clear();
    for (const auto& r : cfg_detail::split_list(cfg.teacher_resolution))
      bundle.distill_cfg.teacher_resolutions.push_back(int(cfg_detail::parse_int(r, "teacher_resolution", 0)));
    if (bundle.distill_cfg.teacher_resolutions.size() == 1 && bundle.models.size() > 1)
      bundle.distill_cfg.teacher_resolutions.assign(bundle.models.size(),
                                                    bundle.distill_cfg.teacher_resolutions[0]);
  }
  if (bundle.distill_cfg.teacher_resolutions.size() != bundle.models.size())
    throw_error(ErrorKind::config, "teacher_resolution list does not match teacher count");
  bundle.distill_cfg.validate();
  for (auto& m : bundle.models) bundle.pointers.push_back(&m);
  return bundle;
}

}  // namespace run_detail

/// Trains per the config and writes metrics.csv plus checkpoint.fmck under
/// out_dir. Deterministic given (config, seed).
inline RunResult run_experiment(const ExperimentConfig& cfg) {
  validate_config(cfg);
  namespace fs = std::filesystem;
  const bool is_distill = cfg.task == Task::distill;
  const bool is_supervised = cfg.task == Task::train_teacher || cfg.task == Task::supervised_baseline;

  run_detail::ResolvedData data = run_detail::resolve_data(cfg);
  fs::create_directories(cfg.out_dir);

  // --- precompute task -----------------------------------------------------
  if (cfg.task == Task::precompute) {
    if (cfg.target_store.empty()) throw_error(ErrorKind::config, "precompute requires target_store");
    run_detail::TeacherBundle teachers = run_detail::load_teachers(cfg);
    // Targets are stored at T=1 and re-tempered at load time, so one store
    // serves every temperature in a sweep.
    TargetStore store = precompute_targets(teachers.models[0], data.distill, parse_mode(cfg.teacher_mode),
                                           cfg.ensemble_crops, 1.f, cfg.run_seed,
                                           teachers.distill_cfg.teacher_resolutions[0]);
    save_target_store(cfg.target_store, store);
    RunResult result;
    result.checkpoint_path = cfg.target_store;
    return result;
  }

  // --- eval task ------------------------------------------------------------
  if (cfg.task == Task::eval_only) {
    run_detail::require_file(cfg.eval_checkpoint, "eval_checkpoint");
    Model m = load_model(cfg.eval_checkpoint);
    std::optional<Dataset> test_ds;
    if (!cfg.test_dataset.empty()) test_ds = resolve_dataset_ref(cfg.test_dataset);
    Dataset eval_ds =
        run_detail::slice_collection(resolve_dataset_ref(cfg.dataset), test_ds, cfg.eval_split);
    const double top1 = evaluate_model(m, eval_ds);
    MetricsWriter writer((fs::path(cfg.out_dir) / "metrics.csv").string());
    writer.log({0, 0, SplitSpec::parse(cfg.eval_split).base, "top1", top1});
    RunResult result;
    result.metrics_path = writer.path();
    result.final_val_top1 = top1;
    return result;
  }

  // --- training tasks --------------------------------------------------------
  const TeacherMode mode = parse_mode(cfg.teacher_mode);
  run_detail::TeacherBundle teachers;
  std::optional<TargetStore> store;
  if (is_distill) {
    teachers = run_detail::load_teachers(cfg);
    if (is_fixed_mode(mode)) {
      if (!cfg.target_store.empty() && fs::exists(cfg.target_store)) {
        store = load_target_store(cfg.target_store);
        if (store->count() != data.distill.count())
          throw_error(ErrorKind::data, "target store covers " + std::to_string(store->count()) +
                                           " examples, distillation data has " +
                                           std::to_string(data.distill.count()));
      } else {
        store = precompute_targets(teachers.models[0], data.distill, mode, cfg.ensemble_crops, 1.f,
                                   cfg.run_seed, teachers.distill_cfg.teacher_resolutions[0]);
        if (!cfg.target_store.empty()) save_target_store(cfg.target_store, *store);
      }
    }
  }

  ModelSpec student_spec;
  student_spec.kind = parse_arch(cfg.student_kind);
  student_spec.depth = cfg.student_depth;
  student_spec.width = cfg.student_width;
  student_spec.resolution = cfg.student_resolution;
  student_spec.channels = data.distill.channels;
  student_spec.classes = is_distill ? teachers.models[0].spec.classes : data.train.num_classes;
  student_spec.groups = cfg.student_groups;
  student_spec.weight_standardization = cfg.weight_standardization;
  Model student = build_model(student_spec, cfg.run_seed);
  if (!cfg.student_init.empty()) {
    run_detail::require_file(cfg.student_init, "student_init");
    load_model_params(student, load_checkpoint(cfg.student_init));
  }
  set_trainable(student, true);

  const Dataset& train_source = is_distill ? data.distill : data.train;
  const int n_train = train_source.count();
  const int64_t steps_per_epoch = (n_train + cfg.batch_size - 1) / cfg.batch_size;
  const int64_t total_steps = steps_per_epoch * cfg.epochs;

  Schedule sched;
  sched.kind = cfg.schedule == "cosine" ? Schedule::Kind::cosine : Schedule::Kind::quadratic;
  sched.base_lr = float(cfg.learning_rate);
  sched.warmup_steps = cfg.warmup_steps;
  sched.total_steps = total_steps;
  sched.validate();

  Optimizer opt = Optimizer::from_config(cfg);
  std::vector<Tensor> params = run_detail::param_tensors(student);
  int64_t start_step = 0;
  if (!cfg.resume.empty()) {
    run_detail::require_file(cfg.resume, "resume");
    const Checkpoint ckpt = load_checkpoint(cfg.resume);
    load_model_params(student, ckpt);
    opt.load_state_tensors(student, ckpt, params);
    start_step = opt.step_count();
  }

  EvalSet val_views = build_eval_set(data.val, student_spec.resolution);
  MetricsWriter metrics((fs::path(cfg.out_dir) / "metrics.csv").string());
  const run_detail::ImageCache train_images(train_source);

  const bool assert_views = run_detail::consistency_checks_enabled();
  const bool share_teacher_views =
      is_distill && is_shared_mode(mode) &&
      std::all_of(teachers.distill_cfg.teacher_resolutions.begin(),
                  teachers.distill_cfg.teacher_resolutions.end(),
                  [&](int r) { return r == cfg.student_resolution; });

  double last_train_loss = 0;
  double epoch_loss_sum = 0;
  int64_t epoch_loss_count = 0;
  double final_epoch_loss = 0;

  int64_t global_step = 0;
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if ((epoch + 1) * steps_per_epoch <= start_step) {  // fully consumed before resume point
      global_step = (epoch + 1) * steps_per_epoch;
      continue;
    }
    const auto batches = iterate_batches(n_train, cfg.batch_size, int(std::min<int64_t>(
                                             cfg.shuffle_buffer, int64_t(1) << 30)),
                                         cfg.run_seed, uint32_t(epoch));
    epoch_loss_sum = 0;
    epoch_loss_count = 0;
    for (size_t batch_ordinal = 0; batch_ordinal < batches.size(); ++batch_ordinal) {
      if (global_step < start_step) {  // fast-forward within the resumed epoch
        ++global_step;
        continue;
      }
      const std::vector<int>& indices = batches[batch_ordinal].indices;
      const int n = int(indices.size());

      const TeacherMode plan_mode = is_supervised ? (cfg.mixup ? TeacherMode::mix : TeacherMode::same_ic)
                                                  : mode;
      ViewPlans plans = make_view_plans(plan_mode, cfg.run_seed, uint32_t(epoch), indices,
                                        uint32_t(batch_ordinal), train_source.height,
                                        train_source.width, float(cfg.mixup_p));
      const std::vector<Tensor> source_images = train_images.gather(indices);

      Tensor labels;  // supervised targets, possibly mixed
      if (is_supervised) {
        std::vector<int> raw(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) raw[size_t(i)] = train_source.labels[size_t(indices[size_t(i)])];
        labels = one_hot(raw, student_spec.classes);
      }
      Tensor student_batch = build_view_batch(source_images, plans.student, cfg.student_resolution,
                                              is_supervised ? &labels : nullptr);

      Tensor target_probs;
      if (is_distill) {
        if (share_teacher_views) {
          std::vector<Tensor> member_logits;
          for (const Model* t : teachers.pointers) member_logits.push_back(forward(*t, student_batch));
          target_probs = temperature_scale(ensemble_logits(member_logits), float(cfg.temperature));
          if (assert_views) {
            Tensor teacher_batch =
                build_view_batch(source_images, plans.teacher, cfg.student_resolution);
            if (std::memcmp(teacher_batch.data(), student_batch.data(),
                            sizeof(float) * size_t(student_batch.size())) != 0)
              throw_error(ErrorKind::contract, "teacher and student views diverged at step " +
                                                   std::to_string(global_step));
          }
        } else {
          target_probs = teacher_targets(mode, teachers.distill_cfg, teachers.pointers,
                                         store ? &*store : nullptr, source_images, indices, plans);
        }
      }

      double loss_value = 0;
      {
        Tape tape;
        Tensor logits = forward(student, student_batch);
        Tensor loss = is_distill ? kl_loss(target_probs, logits, float(cfg.temperature))
                                 : cross_entropy_loss(labels, logits);
        loss_value = loss.item();
        if (!std::isfinite(loss_value))
          throw_error(ErrorKind::data, "training diverged: non-finite loss at step " +
                                           std::to_string(global_step));
        zero_grads(student);
        tape.backward(loss);
      }
      clip_global_norm(params, float(cfg.grad_clip));
      const float lr = schedule_lr(sched, global_step);
      opt.step(params, lr, float(cfg.weight_decay));

      last_train_loss = loss_value;
      epoch_loss_sum += loss_value;
      epoch_loss_count += 1;

      if (global_step % cfg.log_every == 0 || global_step == total_steps - 1) {
        const char* loss_name = is_distill ? "distill_loss" : "label_loss";
        metrics.log({global_step, epoch, "train", loss_name, loss_value});
        metrics.log({global_step, epoch, "train", "lr", double(lr)});
        metrics.log({global_step, epoch, "val", "top1", evaluate_views(student, val_views)});
      }
      ++global_step;
      if (cfg.checkpoint_steps > 0 && global_step % cfg.checkpoint_steps == 0 &&
          global_step < total_steps) {
        Checkpoint mid = model_to_checkpoint(student, render_config(cfg));
        opt.append_state_tensors(student, mid.tensors);
        save_checkpoint(
            (fs::path(cfg.out_dir) / ("checkpoint_step" + std::to_string(global_step) + ".fmck"))
                .string(),
            mid);
      }
    }
    if (epoch_loss_count > 0) final_epoch_loss = epoch_loss_sum / double(epoch_loss_count);
  }

  const std::string ckpt_path = (fs::path(cfg.out_dir) / "checkpoint.fmck").string();
  Checkpoint ckpt = model_to_checkpoint(student, render_config(cfg));
  opt.append_state_tensors(student, ckpt.tensors);
  save_checkpoint(ckpt_path, ckpt);

  RunResult result;
  result.checkpoint_path = ckpt_path;
  result.metrics_path = metrics.path();
  result.steps = global_step;
  result.final_val_top1 = evaluate_views(student, val_views);
  result.final_train_loss = last_train_loss;
  result.final_epoch_train_loss = final_epoch_loss;
  return result;
}

// ---------------------------------------------------------------------------
// Sweeps.
// ---------------------------------------------------------------------------

struct SweepRow {
  double lr = 0, wd = 0, temperature = 0;
  double val_top1 = 0;
  std::string out_dir;
};

/// Best row: max validation top-1; ties prefer lower lr, then wd, then T.
inline size_t select_best(std::span<const SweepRow> rows) {
  if (rows.empty()) throw_error(ErrorKind::contract, "select_best: no rows");
  size_t best = 0;
  for (size_t i = 1; i < rows.size(); ++i) {
    const SweepRow& a = rows[i];
    const SweepRow& b = rows[best];
    if (a.val_top1 > b.val_top1 ||
        (a.val_top1 == b.val_top1 &&
         (a.lr < b.lr || (a.lr == b.lr && (a.wd < b.wd || (a.wd == b.wd && a.temperature < b.temperature))))))
      best = i;
  }
  return best;
}

struct SweepResult {
  std::vector<SweepRow> rows;
  size_t best_index = 0;
  double test_top1 = 0;  // of the selected run only
  std::string best_checkpoint;
  std::string table_path;
};

/// Runs every grid combination, selects by validation top-1 and reports test
/// accuracy of the selected run only.
inline SweepResult sweep(const ExperimentConfig& base, const HyperGrid& grid) {
  grid.validate();
  namespace fs = std::filesystem;
  auto sorted = [](std::vector<float> v) {
    std::sort(v.begin(), v.end());
    return v;
  };
  const std::vector<float> lrs = sorted(grid.learning_rates);
  const std::vector<float> wds = sorted(grid.weight_decays);
  const std::vector<float> temps = sorted(grid.temperatures);

  SweepResult result;
  for (float lr : lrs) {
    for (float wd : wds) {
      for (float temp : temps) {
        ExperimentConfig cfg = base;
        cfg.learning_rate = lr;
        cfg.weight_decay = wd;
        cfg.temperature = temp;
        char tag[96];
        std::snprintf(tag, sizeof(tag), "lr%g_wd%g_t%g", lr, wd, temp);
        cfg.out_dir = (fs::path(base.out_dir) / tag).string();
        try {
          const RunResult run = run_experiment(cfg);
          result.rows.push_back({lr, wd, temp, run.final_val_top1, cfg.out_dir});
        } catch (const Error& e) {
          throw_error(e.kind(), std::string("sweep combination ") + tag + " failed: " + e.what());
        }
      }
    }
  }
  result.best_index = select_best(result.rows);
  result.best_checkpoint =
      (fs::path(result.rows[result.best_index].out_dir) / "checkpoint.fmck").string();

  // Test accuracy of the selected run only.
  Model best = load_model(result.best_checkpoint);
  std::optional<Dataset> test_collection;
  if (!base.test_dataset.empty()) test_collection = resolve_dataset_ref(base.test_dataset);
  const Dataset test_ds =
      run_detail::slice_collection(resolve_dataset_ref(base.dataset), test_collection, base.test_split);
  result.test_top1 = evaluate_model(best, test_ds);

  fs::create_directories(base.out_dir);
  result.table_path = (fs::path(base.out_dir) / "sweep.csv").string();
  std::string table = "lr,wd,temperature,val_top1\n";
  for (const SweepRow& row : result.rows) {
    char line[160];
    std::snprintf(line, sizeof(line), "%.9g,%.9g,%.9g,%.9g\n", row.lr, row.wd, row.temperature,
                  row.val_top1);
    table += line;
  }
  io::write_file(result.table_path, table);
  return result;
}

}  // namespace funmatch
