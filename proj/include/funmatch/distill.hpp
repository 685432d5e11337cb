#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "funmatch/augment.hpp"
#include "funmatch/data.hpp"
#include "funmatch/mode.hpp"
#include "funmatch/nn.hpp"

namespace funmatch {

// ---------------------------------------------------------------------------
// Temperature and losses.
// ---------------------------------------------------------------------------

/// softmax(logits / T) rowwise; plain softmax at T = 1. Not differentiated
/// (teacher side); the student side goes through log_softmax on the tape.
inline Tensor temperature_scale(const Tensor& logits, float temperature) {
  if (temperature <= 0.f)
    throw_error(ErrorKind::config, "temperature must be > 0, got " + std::to_string(temperature));
  const int c = logits.shape().back();
  const int64_t rows = logits.size() / c;
  Tensor out(logits.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const float* x = logits.data() + r * c;
    float* y = out.data() + r * c;
    double mx = -1e300;
    for (int j = 0; j < c; ++j) mx = std::max(mx, double(x[j]) / temperature);
    double sum = 0.0;
    for (int j = 0; j < c; ++j) {
      const double e = std::exp(double(x[j]) / temperature - mx);
      y[j] = float(e);
      sum += e;
    }
    for (int j = 0; j < c; ++j) y[j] = float(double(y[j]) / sum);
  }
  return out;
}

/// Re-expresses stored T=1 probabilities at another temperature:
/// softmax(logits / T) == normalize(p ^ (1/T)). Lets one target store serve
/// every temperature in a sweep.
inline Tensor retemper(const Tensor& probs, float temperature) {
  if (temperature <= 0.f)
    throw_error(ErrorKind::config, "temperature must be > 0, got " + std::to_string(temperature));
  if (temperature == 1.f) return probs;
  const int c = probs.shape().back();
  const int64_t rows = probs.size() / c;
  Tensor out(probs.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const float* p = probs.data() + r * c;
    float* y = out.data() + r * c;
    double sum = 0.0;
    for (int j = 0; j < c; ++j) {
      const double v = p[j] > 0.f ? std::pow(double(p[j]), 1.0 / temperature) : 0.0;
      y[j] = float(v);
      sum += v;
    }
    for (int j = 0; j < c; ++j) y[j] = float(double(y[j]) / sum);
  }
  return out;
}

inline double row_entropy(const float* p, int c) {
  double h = 0.0;
  for (int j = 0; j < c; ++j)
    if (p[j] > 0.f) h -= double(p[j]) * std::log(double(p[j]));
  return h;
}

namespace detail {

inline void check_distribution_rows(const Tensor& p, float tolerance, const char* who) {
  const int c = p.shape().back();
  const int64_t rows = p.size() / c;
  for (int64_t r = 0; r < rows; ++r) {
    double sum = 0.0;
    for (int j = 0; j < c; ++j) {
      const float v = p.data()[r * c + j];
      if (v < 0.f)
        throw_error(ErrorKind::contract, std::string(who) + ": row " + std::to_string(r) +
                                             " has negative probability");
      sum += v;
    }
    if (std::fabs(sum - 1.0) > tolerance)
      throw_error(ErrorKind::contract, std::string(who) + ": row " + std::to_string(r) + " sums to " +
                                           std::to_string(sum) + ", not 1");
  }
}

}  // namespace detail

/// Mean over the batch of KL(p_t || p_s) with p_s = softmax(student_logits/T)
/// and p_t already at temperature T. The (constant) teacher entropy term is
/// included so the reported value is a true KL >= 0; gradients flow to the
/// student logits only. No hard-label term and no T^2 rescaling.
inline Tensor kl_loss(const Tensor& teacher_probs, const Tensor& student_logits, float temperature) {
  if (temperature <= 0.f)
    throw_error(ErrorKind::config, "temperature must be > 0, got " + std::to_string(temperature));
  if (teacher_probs.shape() != student_logits.shape())
    throw_error(ErrorKind::dimension, "kl_loss: teacher " + shape_str(teacher_probs.shape()) +
                                          " vs student " + shape_str(student_logits.shape()));
  detail::check_distribution_rows(teacher_probs, 1e-4f, "kl_loss teacher probabilities");
  const int c = teacher_probs.shape().back();
  const int64_t rows = teacher_probs.size() / c;

  double entropy = 0.0;  // sum over rows of sum_i p log p  (negated entropy)
  for (int64_t r = 0; r < rows; ++r) entropy -= row_entropy(teacher_probs.data() + r * c, c);

  Tensor log_ps = log_softmax(scale(student_logits, 1.f / temperature));
  Tensor cross = sum_all(mul(log_ps, teacher_probs));  // sum of p_t * log p_s
  return add_scalar(scale(cross, -1.f / float(rows)), float(entropy / double(rows)));
}

/// Softmax cross-entropy against (possibly mixed) label distributions; the
/// supervised baseline loss.
inline Tensor cross_entropy_loss(const Tensor& label_probs, const Tensor& logits) {
  if (label_probs.shape() != logits.shape())
    throw_error(ErrorKind::dimension, "cross_entropy_loss: labels " + shape_str(label_probs.shape()) +
                                          " vs logits " + shape_str(logits.shape()));
  const int64_t rows = logits.size() / logits.shape().back();
  Tensor log_p = log_softmax(logits);
  return scale(sum_all(mul(log_p, label_probs)), -1.f / float(rows));
}

inline Tensor one_hot(std::span<const int> labels, int num_classes) {
  Tensor t({int(labels.size()), num_classes});
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes)
      throw_error(ErrorKind::data, "label " + std::to_string(labels[i]) + " out of range at index " +
                                       std::to_string(i));
    t.data()[i * num_classes + labels[i]] = 1.f;
  }
  return t;
}

// ---------------------------------------------------------------------------
// Ensembles.
// ---------------------------------------------------------------------------

/// Arithmetic mean of member logits (the members may have seen different
/// resolutions of the same crop).
inline Tensor ensemble_logits(std::span<const Tensor> member_logits) {
  if (member_logits.empty()) throw_error(ErrorKind::config, "ensemble_logits: no members");
  const Shape& shape = member_logits[0].shape();
  for (const Tensor& t : member_logits)
    if (t.shape() != shape)
      throw_error(ErrorKind::config, "ensemble_logits: member shape " + shape_str(t.shape()) +
                                         " differs from " + shape_str(shape));
  Tensor out(shape);
  const float inv = 1.f / float(member_logits.size());
  for (const Tensor& t : member_logits)
    for (int64_t i = 0; i < t.size(); ++i) out.data()[i] += t.data()[i] * inv;
  return out;
}

// ---------------------------------------------------------------------------
// Target stores (fixed-teacher modes).
// ---------------------------------------------------------------------------

/// Write-once map example_index -> teacher probability row.
struct TargetStore {
  int num_classes = 0;
  std::vector<float> rows;  // count * num_classes

  int count() const { return num_classes ? int(rows.size()) / num_classes : 0; }
  const float* row(int index) const {
    if (index < 0 || index >= count())
      throw_error(ErrorKind::data, "target store has no row for example " + std::to_string(index));
    return rows.data() + size_t(index) * num_classes;
  }
};

// FMTS: magic "FMTS", version u32=1, count u32, C u32, then count rows of C
// little-endian f32, ordered by example index.

inline std::string encode_target_store(const TargetStore& store) {
  std::string out;
  out += "FMTS";
  io::put_u32(out, 1);
  io::put_u32(out, uint32_t(store.count()));
  io::put_u32(out, uint32_t(store.num_classes));
  for (float v : store.rows) io::put_f32(out, v);
  return out;
}

inline void save_target_store(const std::string& path, const TargetStore& store) {
  io::write_file(path, encode_target_store(store));
}

inline TargetStore decode_target_store(const std::string& bytes, const std::string& source) {
  io::Reader r(bytes, source);
  if (r.raw(4) != "FMTS") throw_error(ErrorKind::format, source + ": bad magic, expected FMTS");
  const uint32_t version = r.u32();
  if (version != 1)
    throw_error(ErrorKind::format, source + ": unsupported FMTS version " + std::to_string(version));
  TargetStore store;
  const uint32_t count = r.u32();
  store.num_classes = int(r.u32());
  if (store.num_classes < 2) throw_error(ErrorKind::format, source + ": num_classes must be >= 2");
  store.rows.resize(size_t(count) * store.num_classes);
  for (float& v : store.rows) v = r.f32();
  if (!r.done())
    throw_error(ErrorKind::format, source + ": " + std::to_string(r.remaining()) + " trailing bytes");
  return store;
}

inline TargetStore load_target_store(const std::string& path) {
  return decode_target_store(io::read_file(path), path);
}

// ---------------------------------------------------------------------------
// Teacher-target production.
// ---------------------------------------------------------------------------

/// Temperature T plus which resolutions the two branches consume. More than
/// one ensemble resolution means one teacher member per entry.
struct DistillConfig {
  float temperature = 1.f;
  int student_resolution = 32;
  std::vector<int> teacher_resolutions = {32};  // one per ensemble member

  void validate() const {
    if (temperature <= 0.f) throw_error(ErrorKind::config, "temperature must be > 0");
    if (student_resolution < 8) throw_error(ErrorKind::config, "student resolution must be >= 8");
    for (int r : teacher_resolutions)
      if (r < 8) throw_error(ErrorKind::config, "teacher resolution must be >= 8");
  }
};

/// Forward through every ensemble member at its own resolution of the same
/// views, averaging logits.
inline Tensor teacher_ensemble_logits(std::span<const Model* const> teachers,
                                      const std::vector<Tensor>& source_images,
                                      std::span<const ViewPlan> plans, const DistillConfig& cfg) {
  if (teachers.size() != cfg.teacher_resolutions.size())
    throw_error(ErrorKind::config, "have " + std::to_string(teachers.size()) + " teachers but " +
                                       std::to_string(cfg.teacher_resolutions.size()) +
                                       " teacher resolutions");
  std::vector<Tensor> member_logits;
  member_logits.reserve(teachers.size());
  for (size_t i = 0; i < teachers.size(); ++i) {
    const int classes = teachers[i]->spec.classes;
    if (classes != teachers[0]->spec.classes)
      throw_error(ErrorKind::config, "ensemble members disagree on class count: " +
                                         std::to_string(classes) + " vs " +
                                         std::to_string(teachers[0]->spec.classes));
    Tensor batch = build_view_batch(source_images, plans, cfg.teacher_resolutions[i]);
    member_logits.push_back(forward(*teachers[i], batch));
  }
  return ensemble_logits(member_logits);
}

/// Precomputes fixed-teacher targets for a whole dataset. fix/rs uses the
/// full-image view, fix/cc the center crop, fix/ic_ens the mean of
/// temperature-scaled probabilities over K key-derived inception crops.
/// Deterministic in run_seed.
inline TargetStore precompute_targets(const Model& teacher, const Dataset& dataset,
                                      TeacherMode variant, int ensemble_crops, float temperature,
                                      uint64_t run_seed, int teacher_resolution, int batch_size = 256) {
  if (!is_fixed_mode(variant))
    throw_error(ErrorKind::config,
                std::string("precompute_targets requires a fix/* mode, got ") + mode_name(variant));
  if (ensemble_crops < 1) throw_error(ErrorKind::config, "ensemble_crops must be >= 1");
  const int n = dataset.count();
  const int classes = teacher.spec.classes;
  TargetStore store;
  store.num_classes = classes;
  store.rows.assign(size_t(n) * classes, 0.f);

  const int k_views = variant == TeacherMode::fix_ic_ens ? ensemble_crops : 1;
  for (int view = 0; view < k_views; ++view) {
    for (int start = 0; start < n; start += batch_size) {
      const int end = std::min(n, start + batch_size);
      std::vector<Tensor> images;
      std::vector<ViewPlan> plans;
      images.reserve(size_t(end - start));
      plans.reserve(size_t(end - start));
      for (int i = start; i < end; ++i) {
        images.push_back(dataset.image_tensor(i));
        ViewPlan plan;
        if (variant == TeacherMode::fix_rs) {
          plan.crop = {0, 0, dataset.width, dataset.height};
        } else if (variant == TeacherMode::fix_cc) {
          plan.crop = center_crop(dataset.height, dataset.width);
        } else {
          RngKey key{run_seed, uint32_t(view), uint32_t(i), Branch::teacher_only};
          plan.crop = sample_crop(CropKind::inception, key, dataset.height, dataset.width);
          KeyStream flip_stream({run_seed, uint64_t(view), uint64_t(i),
                                 uint64_t(Branch::teacher_only), 0xF11Full});
          plan.flip = flip_stream.next_bool();
        }
        plans.push_back(plan);
      }
      Tensor batch = build_view_batch(images, plans, teacher_resolution);
      Tensor probs = temperature_scale(forward(teacher, batch), temperature);
      for (int i = start; i < end; ++i)
        for (int j = 0; j < classes; ++j)
          store.rows[size_t(i) * classes + j] +=
              probs.data()[size_t(i - start) * classes + j] / float(k_views);
    }
  }
  // Renormalize: float accumulation over K crops can drift the row sums.
  for (int i = 0; i < n; ++i) {
    double sum = 0.0;
    for (int j = 0; j < classes; ++j) sum += store.rows[size_t(i) * classes + j];
    for (int j = 0; j < classes; ++j)
      store.rows[size_t(i) * classes + j] = float(store.rows[size_t(i) * classes + j] / sum);
  }
  detail::check_distribution_rows(Tensor({n, classes}, store.rows), 1e-5f, "precomputed targets");
  return store;
}

/// Produces the teacher probability rows for one batch under a mode: store
/// lookups for fix/*, teacher forwards on the mode's views otherwise. The
/// returned rows are at temperature cfg.temperature.
inline Tensor teacher_targets(TeacherMode mode, const DistillConfig& cfg,
                              std::span<const Model* const> teachers, const TargetStore* store,
                              const std::vector<Tensor>& source_images,
                              std::span<const int> example_indices, const ViewPlans& plans) {
  const int n = int(example_indices.size());
  if (is_fixed_mode(mode)) {
    if (!store) throw_error(ErrorKind::contract, "fixed teacher mode requires a target store");
    Tensor rows({n, store->num_classes});
    for (int i = 0; i < n; ++i) {
      const float* src = store->row(example_indices[size_t(i)]);
      std::memcpy(rows.data() + size_t(i) * store->num_classes, src,
                  sizeof(float) * size_t(store->num_classes));
    }
    return retemper(rows, cfg.temperature);
  }
  if (store) throw_error(ErrorKind::contract, "target store given for a non-fixed mode");
  Tensor logits = teacher_ensemble_logits(teachers, source_images, plans.teacher, cfg);
  return temperature_scale(logits, cfg.temperature);
}

}  // namespace funmatch
