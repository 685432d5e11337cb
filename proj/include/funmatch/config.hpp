#pragma once

#include <cstdio>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "funmatch/data.hpp"
#include "funmatch/mode.hpp"
#include "funmatch/nn.hpp"
#include "funmatch/optim.hpp"

namespace funmatch {

enum class Task { train_teacher, distill, supervised_baseline, precompute, eval_only };

inline const char* task_name(Task t) {
  switch (t) {
    case Task::train_teacher: return "train_teacher";
    case Task::distill: return "distill";
    case Task::supervised_baseline: return "supervised_baseline";
    case Task::precompute: return "precompute";
    case Task::eval_only: return "eval";
  }
  return "?";
}

inline Task parse_task(const std::string& s) {
  for (Task t : {Task::train_teacher, Task::distill, Task::supervised_baseline, Task::precompute,
                 Task::eval_only})
    if (s == task_name(t)) return t;
  throw_error(ErrorKind::config, "unknown task '" + s + "'");
}

/// Every knob of one run. Defaults are the member initializers; the key
/// table below is the single source of truth for names and documentation.
struct ExperimentConfig {
  Task task = Task::distill;

  // data
  std::string dataset;           // path to FMDS file or synth(...) expression
  std::string test_dataset;      // optional second collection, referenced as "test"
  std::string distill_dataset;   // optional out-of-domain distillation images
  std::string train_split = "train[:90%]";
  std::string val_split = "train[90%:]";
  std::string test_split = "test";

  // model under training
  std::string student_kind = "small-resnet";
  int student_depth = 4;
  int student_width = 1;
  int student_resolution = 32;
  int student_groups = 8;
  bool weight_standardization = true;
  std::string student_init;  // checkpoint to initialize the student from

  // teacher side
  std::string teacher_checkpoint;   // comma-separated list; >1 entries form an ensemble
  std::string teacher_resolution;   // comma-separated ints, one per teacher; empty = student's
  std::string teacher_mode = "mix";
  double temperature = 1.0;
  int ensemble_crops = 32;          // fix/ic_ens views (paper default 1000; desk default 32)
  std::string target_store;         // fix/* target file; written by precompute, read by distill

  // optimization
  std::string optimizer = "adam";
  double learning_rate = 0.001;
  double weight_decay = 0.0001;
  std::string schedule = "cosine";
  int64_t warmup_steps = 0;
  double grad_clip = 1.0;
  double momentum = 0.9;
  int batch_size = 512;
  int64_t epochs = 0;

  // mixup (supervised baselines; distillation mixes via teacher_mode = mix)
  bool mixup = false;
  double mixup_p = 1.0;

  // run control
  uint64_t run_seed = 1;
  int64_t shuffle_buffer = 250000;
  int64_t log_every = 50;
  int64_t checkpoint_steps = 0;  // 0 = final checkpoint only
  std::string out_dir = "out";
  std::string resume;           // checkpoint with optimizer state to continue from
  std::string eval_checkpoint;  // model evaluated by the eval task
  std::string eval_split = "test";

  // shampoo
  int shampoo_block_size = 128;
  int shampoo_refresh_interval = 1;
  double shampoo_damping = 1e-6;
  bool shampoo_grafting = true;

  // sweep grids
  std::vector<double> sweep_learning_rates = {0.0003, 0.001, 0.003, 0.01};
  std::vector<double> sweep_weight_decays = {1e-5, 3e-5, 1e-4, 3e-4, 1e-3};
  std::vector<double> sweep_temperatures = {1, 2, 5, 10};
};

namespace cfg_detail {

inline std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline int64_t parse_int(const std::string& v, const std::string& key, int line) {
  try {
    size_t pos = 0;
    int64_t x = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return x;
  } catch (...) {
    throw_error(ErrorKind::config,
                "line " + std::to_string(line) + ": key '" + key + "' expects an integer, got '" + v + "'");
  }
}

inline double parse_float(const std::string& v, const std::string& key, int line) {
  try {
    size_t pos = 0;
    double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return x;
  } catch (...) {
    throw_error(ErrorKind::config,
                "line " + std::to_string(line) + ": key '" + key + "' expects a number, got '" + v + "'");
  }
}

inline bool parse_bool(const std::string& v, const std::string& key, int line) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw_error(ErrorKind::config,
              "line " + std::to_string(line) + ": key '" + key + "' expects true or false, got '" + v + "'");
}

inline std::vector<double> parse_float_list(const std::string& v, const std::string& key, int line) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_float(item, key, line));
  }
  if (out.empty())
    throw_error(ErrorKind::config, "line " + std::to_string(line) + ": key '" + key + "' expects a list");
  return out;
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline std::string fmt_float(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

inline std::string fmt_float_list(const std::vector<double>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) s += ",";
    s += fmt_float(v[i]);
  }
  return s;
}

struct KeyInfo {
  const char* name;
  const char* type;
  const char* doc;
  std::function<void(ExperimentConfig&, const std::string&, int)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

inline const std::vector<KeyInfo>& key_table() {
  using C = ExperimentConfig;
  static const std::vector<KeyInfo> table = {
      {"task", "enum", "train_teacher | distill | supervised_baseline | precompute | eval",
       [](C& c, const std::string& v, int) { c.task = parse_task(v); },
       [](const C& c) { return std::string(task_name(c.task)); }},
      {"dataset", "ref", "primary dataset: FMDS path or synth(seed=..,count=..,classes=..,res=..[,offset=..]); split expressions address it as 'train'",
       [](C& c, const std::string& v, int) { c.dataset = v; },
       [](const C& c) { return c.dataset; }},
      {"test_dataset", "ref", "held-out collection addressed as 'test' by split expressions",
       [](C& c, const std::string& v, int) { c.test_dataset = v; },
       [](const C& c) { return c.test_dataset; }},
      {"distill_dataset", "ref", "when set, distillation draws images from this collection instead of the train split (out-of-domain distillation)",
       [](C& c, const std::string& v, int) { c.distill_dataset = v; },
       [](const C& c) { return c.distill_dataset; }},
      {"train_split", "split", "slice used for training, e.g. train[:90%]",
       [](C& c, const std::string& v, int) { c.train_split = v; },
       [](const C& c) { return c.train_split; }},
      {"val_split", "split", "slice used for validation-based selection",
       [](C& c, const std::string& v, int) { c.val_split = v; },
       [](const C& c) { return c.val_split; }},
      {"test_split", "split", "slice used for final reporting",
       [](C& c, const std::string& v, int) { c.test_split = v; },
       [](const C& c) { return c.test_split; }},
      {"student_kind", "enum", "mlp | small-resnet; the model being trained (the student, for distillation)",
       [](C& c, const std::string& v, int) { parse_arch(v); c.student_kind = v; },
       [](const C& c) { return c.student_kind; }},
      {"student_depth", "int", "residual blocks (small-resnet) or hidden layers (mlp)",
       [](C& c, const std::string& v, int l) { c.student_depth = int(parse_int(v, "student_depth", l)); },
       [](const C& c) { return std::to_string(c.student_depth); }},
      {"student_width", "int", "channel multiplier (small-resnet) or hidden units (mlp)",
       [](C& c, const std::string& v, int l) { c.student_width = int(parse_int(v, "student_width", l)); },
       [](const C& c) { return std::to_string(c.student_width); }},
      {"student_resolution", "int", "square input resolution in pixels",
       [](C& c, const std::string& v, int l) { c.student_resolution = int(parse_int(v, "student_resolution", l)); },
       [](const C& c) { return std::to_string(c.student_resolution); }},
      {"student_groups", "int", "group-norm group count; layers with fewer channels fall back to per-channel groups",
       [](C& c, const std::string& v, int l) { c.student_groups = int(parse_int(v, "student_groups", l)); },
       [](const C& c) { return std::to_string(c.student_groups); }},
      {"weight_standardization", "bool", "standardize conv kernels on the fly",
       [](C& c, const std::string& v, int l) { c.weight_standardization = parse_bool(v, "weight_standardization", l); },
       [](const C& c) { return std::string(c.weight_standardization ? "true" : "false"); }},
      {"student_init", "path", "checkpoint whose model parameters initialize the student",
       [](C& c, const std::string& v, int) { c.student_init = v; },
       [](const C& c) { return c.student_init; }},
      {"teacher_checkpoint", "paths", "teacher checkpoint(s), comma separated; more than one forms a logit-averaged ensemble",
       [](C& c, const std::string& v, int) { c.teacher_checkpoint = v; },
       [](const C& c) { return c.teacher_checkpoint; }},
      {"teacher_resolution", "ints", "teacher view resolution(s), one per teacher; empty uses the student resolution",
       [](C& c, const std::string& v, int) { c.teacher_resolution = v; },
       [](const C& c) { return c.teacher_resolution; }},
      {"teacher_mode", "enum", "fix/rs | fix/cc | fix/ic_ens | ind/rc | ind/ic | same/rc | same/ic | mix",
       [](C& c, const std::string& v, int) { parse_mode(v); c.teacher_mode = v; },
       [](const C& c) { return c.teacher_mode; }},
      {"temperature", "float", "softmax temperature applied to both teacher and student distributions",
       [](C& c, const std::string& v, int l) { c.temperature = parse_float(v, "temperature", l); },
       [](const C& c) { return fmt_float(c.temperature); }},
      {"ensemble_crops", "int", "inception crops averaged for fix/ic_ens targets",
       [](C& c, const std::string& v, int l) { c.ensemble_crops = int(parse_int(v, "ensemble_crops", l)); },
       [](const C& c) { return std::to_string(c.ensemble_crops); }},
      {"target_store", "path", "FMTS file: written by precompute, consumed by fix/* distillation (precomputed on the fly when empty)",
       [](C& c, const std::string& v, int) { c.target_store = v; },
       [](const C& c) { return c.target_store; }},
      {"optimizer", "enum", "adam | sgdm | shampoo",
       [](C& c, const std::string& v, int l) {
         if (v != "adam" && v != "sgdm" && v != "shampoo")
           throw_error(ErrorKind::config, "line " + std::to_string(l) + ": unknown optimizer '" + v + "'");
         c.optimizer = v;
       },
       [](const C& c) { return c.optimizer; }},
      {"learning_rate", "float", "base learning rate before scheduling",
       [](C& c, const std::string& v, int l) { c.learning_rate = parse_float(v, "learning_rate", l); },
       [](const C& c) { return fmt_float(c.learning_rate); }},
      {"weight_decay", "float", "decoupled weight decay coefficient",
       [](C& c, const std::string& v, int l) { c.weight_decay = parse_float(v, "weight_decay", l); },
       [](const C& c) { return fmt_float(c.weight_decay); }},
      {"schedule", "enum", "cosine | quadratic decay after warmup",
       [](C& c, const std::string& v, int l) {
         if (v != "cosine" && v != "quadratic")
           throw_error(ErrorKind::config, "line " + std::to_string(l) + ": unknown schedule '" + v + "'");
         c.schedule = v;
       },
       [](const C& c) { return c.schedule; }},
      {"warmup_steps", "int", "linear warmup steps before the decay phase",
       [](C& c, const std::string& v, int l) { c.warmup_steps = parse_int(v, "warmup_steps", l); },
       [](const C& c) { return std::to_string(c.warmup_steps); }},
      {"grad_clip", "float", "global L2-norm clipping threshold",
       [](C& c, const std::string& v, int l) { c.grad_clip = parse_float(v, "grad_clip", l); },
       [](const C& c) { return fmt_float(c.grad_clip); }},
      {"momentum", "float", "sgdm velocity / shampoo nesterov coefficient",
       [](C& c, const std::string& v, int l) { c.momentum = parse_float(v, "momentum", l); },
       [](const C& c) { return fmt_float(c.momentum); }},
      {"batch_size", "int", "examples per optimization step",
       [](C& c, const std::string& v, int l) { c.batch_size = int(parse_int(v, "batch_size", l)); },
       [](const C& c) { return std::to_string(c.batch_size); }},
      {"epochs", "int", "full passes over the training (or distillation) data; required for training tasks",
       [](C& c, const std::string& v, int l) { c.epochs = parse_int(v, "epochs", l); },
       [](const C& c) { return std::to_string(c.epochs); }},
      {"mixup", "bool", "mix inputs and labels in supervised tasks (distillation mixes via teacher_mode = mix)",
       [](C& c, const std::string& v, int l) { c.mixup = parse_bool(v, "mixup", l); },
       [](const C& c) { return std::string(c.mixup ? "true" : "false"); }},
      {"mixup_p", "float", "probability that an example participates in mixup",
       [](C& c, const std::string& v, int l) { c.mixup_p = parse_float(v, "mixup_p", l); },
       [](const C& c) { return fmt_float(c.mixup_p); }},
      {"run_seed", "int", "seed fixing every random draw of the run",
       [](C& c, const std::string& v, int l) { c.run_seed = uint64_t(parse_int(v, "run_seed", l)); },
       [](const C& c) { return std::to_string(c.run_seed); }},
      {"shuffle_buffer", "int", "streaming shuffle buffer capacity",
       [](C& c, const std::string& v, int l) { c.shuffle_buffer = parse_int(v, "shuffle_buffer", l); },
       [](const C& c) { return std::to_string(c.shuffle_buffer); }},
      {"log_every", "int", "steps between metric rows (step 0 and the final step always log)",
       [](C& c, const std::string& v, int l) { c.log_every = parse_int(v, "log_every", l); },
       [](const C& c) { return std::to_string(c.log_every); }},
      {"checkpoint_steps", "int", "write a resumable checkpoint every N steps (0 = final only)",
       [](C& c, const std::string& v, int l) { c.checkpoint_steps = parse_int(v, "checkpoint_steps", l); },
       [](const C& c) { return std::to_string(c.checkpoint_steps); }},
      {"out_dir", "path", "output directory for metrics and checkpoints",
       [](C& c, const std::string& v, int) { c.out_dir = v; },
       [](const C& c) { return c.out_dir; }},
      {"resume", "path", "checkpoint with optimizer state to continue training from",
       [](C& c, const std::string& v, int) { c.resume = v; },
       [](const C& c) { return c.resume; }},
      {"eval_checkpoint", "path", "model checkpoint evaluated by the eval task",
       [](C& c, const std::string& v, int) { c.eval_checkpoint = v; },
       [](const C& c) { return c.eval_checkpoint; }},
      {"eval_split", "split", "split evaluated by the eval task",
       [](C& c, const std::string& v, int) { c.eval_split = v; },
       [](const C& c) { return c.eval_split; }},
      {"shampoo_block_size", "int", "preconditioner block edge limit",
       [](C& c, const std::string& v, int l) { c.shampoo_block_size = int(parse_int(v, "shampoo_block_size", l)); },
       [](const C& c) { return std::to_string(c.shampoo_block_size); }},
      {"shampoo_refresh_interval", "int", "steps between inverse-root recomputations",
       [](C& c, const std::string& v, int l) { c.shampoo_refresh_interval = int(parse_int(v, "shampoo_refresh_interval", l)); },
       [](const C& c) { return std::to_string(c.shampoo_refresh_interval); }},
      {"shampoo_damping", "float", "eps added to preconditioner statistics",
       [](C& c, const std::string& v, int l) { c.shampoo_damping = parse_float(v, "shampoo_damping", l); },
       [](const C& c) { return fmt_float(c.shampoo_damping); }},
      {"shampoo_grafting", "bool", "rescale the shampoo direction to the concurrent adam-direction norm per layer",
       [](C& c, const std::string& v, int l) { c.shampoo_grafting = parse_bool(v, "shampoo_grafting", l); },
       [](const C& c) { return std::string(c.shampoo_grafting ? "true" : "false"); }},
      {"sweep_learning_rates", "floats", "learning-rate grid for the sweep task",
       [](C& c, const std::string& v, int l) { c.sweep_learning_rates = parse_float_list(v, "sweep_learning_rates", l); },
       [](const C& c) { return fmt_float_list(c.sweep_learning_rates); }},
      {"sweep_weight_decays", "floats", "weight-decay grid for the sweep task",
       [](C& c, const std::string& v, int l) { c.sweep_weight_decays = parse_float_list(v, "sweep_weight_decays", l); },
       [](const C& c) { return fmt_float_list(c.sweep_weight_decays); }},
      {"sweep_temperatures", "floats", "temperature grid for the sweep task",
       [](C& c, const std::string& v, int l) { c.sweep_temperatures = parse_float_list(v, "sweep_temperatures", l); },
       [](const C& c) { return fmt_float_list(c.sweep_temperatures); }},
  };
  return table;
}

}  // namespace cfg_detail

/// Cross-field invariants; called by parse_config and again by entrypoints
/// after CLI overrides.
inline void validate_config(const ExperimentConfig& c) {
  if (c.temperature <= 0) throw_error(ErrorKind::config, "temperature must be > 0");
  if (c.grad_clip <= 0) throw_error(ErrorKind::config, "grad_clip must be > 0");
  if (c.batch_size < 1) throw_error(ErrorKind::config, "batch_size must be >= 1");
  if (c.mixup_p < 0 || c.mixup_p > 1) throw_error(ErrorKind::config, "mixup_p must be in [0, 1]");
  if (c.learning_rate <= 0) throw_error(ErrorKind::config, "learning_rate must be > 0");
  if (c.weight_decay < 0) throw_error(ErrorKind::config, "weight_decay must be >= 0");
  if (c.shuffle_buffer < 1) throw_error(ErrorKind::config, "shuffle_buffer must be >= 1");
  if (c.log_every < 1) throw_error(ErrorKind::config, "log_every must be >= 1");
  if (c.warmup_steps < 0) throw_error(ErrorKind::config, "warmup_steps must be >= 0");
  SplitSpec::parse(c.train_split);
  SplitSpec::parse(c.val_split);
  SplitSpec::parse(c.test_split);

  const bool training =
      c.task == Task::train_teacher || c.task == Task::distill || c.task == Task::supervised_baseline;
  if (training && c.epochs < 1) throw_error(ErrorKind::config, "epochs must be >= 1");
  if (c.dataset.empty()) throw_error(ErrorKind::config, "dataset is required");

  if (c.task == Task::distill || c.task == Task::precompute) {
    if (c.teacher_checkpoint.empty())
      throw_error(ErrorKind::config, std::string(task_name(c.task)) + " requires teacher_checkpoint");
    const TeacherMode mode = parse_mode(c.teacher_mode);
    if (c.task == Task::precompute && !is_fixed_mode(mode))
      throw_error(ErrorKind::config, "precompute requires a fix/* teacher_mode");
    if (c.mixup && mode != TeacherMode::mix) {
      if (is_fixed_mode(mode))
        throw_error(ErrorKind::config,
                    "mixup cannot be combined with a fixed teacher: precomputed targets do not "
                    "describe mixed images");
      throw_error(ErrorKind::config, "distillation mixes via teacher_mode = mix, not the mixup flag");
    }
    if (c.ensemble_crops < 1) throw_error(ErrorKind::config, "ensemble_crops must be >= 1");
  }
  if (c.task == Task::eval_only && c.eval_checkpoint.empty())
    throw_error(ErrorKind::config, "eval requires eval_checkpoint");
}

/// Line-based `key = value` parsing with `#` comment lines. Unknown keys,
/// type mismatches and violated invariants are errors naming line and key.
inline ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig config;
  std::stringstream ss(text);
  std::string line;
  int line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    const std::string t = cfg_detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw_error(ErrorKind::config,
                  "line " + std::to_string(line_no) + ": expected 'key = value', got '" + t + "'");
    const std::string key = cfg_detail::trim(t.substr(0, eq));
    const std::string value = cfg_detail::trim(t.substr(eq + 1));
    bool found = false;
    for (const auto& info : cfg_detail::key_table()) {
      if (key == info.name) {
        info.set(config, value, line_no);
        found = true;
        break;
      }
    }
    if (!found)
      throw_error(ErrorKind::config, "line " + std::to_string(line_no) + ": unknown key '" + key + "'");
  }
  validate_config(config);
  return config;
}

/// Canonical rendering of a resolved config (stored in checkpoints).
inline std::string render_config(const ExperimentConfig& c) {
  std::string out;
  for (const auto& info : cfg_detail::key_table()) {
    out += info.name;
    out += " = ";
    out += info.get(c);
    out += "\n";
  }
  return out;
}

/// Reference documentation generated from the key table.
inline std::string render_config_reference() {
  const ExperimentConfig defaults;
  std::string out = "Configuration keys (line-based `key = value`, `#` comment lines):\n\n";
  for (const auto& info : cfg_detail::key_table()) {
    out += "  ";
    out += info.name;
    out += " (";
    out += info.type;
    out += ", default \"";
    out += info.get(defaults);
    out += "\")\n      ";
    out += info.doc;
    out += "\n";
  }
  return out;
}

}  // namespace funmatch
