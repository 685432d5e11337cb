#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "funmatch/mode.hpp"
#include "funmatch/rng.hpp"
#include "funmatch/tensor.hpp"

namespace funmatch {

// ---------------------------------------------------------------------------
// Keyed randomness: the unit of reproducibility for the view pipeline.
// ---------------------------------------------------------------------------

enum class Branch : uint32_t { shared = 0, student_only = 1, teacher_only = 2, mixup = 3 };

/// Identifies one random stream. Identical keys give identical draws;
/// distinct branches are independent.
struct RngKey {
  uint64_t run_seed = 0;
  uint32_t epoch = 0;
  uint32_t example = 0;  // dataset index, so draws do not depend on batch order
  Branch branch = Branch::shared;

  KeyStream stream() const {
    return KeyStream({run_seed, uint64_t(epoch), uint64_t(example), uint64_t(branch)});
  }
};

// ---------------------------------------------------------------------------
// Crop sampling.
// ---------------------------------------------------------------------------

struct CropRect {
  int x0 = 0, y0 = 0, w = 0, h = 0;

  bool operator==(const CropRect&) const = default;
  bool valid_for(int src_h, int src_w) const {
    return x0 >= 0 && y0 >= 0 && w >= 1 && h >= 1 && x0 + w <= src_w && y0 + h <= src_h;
  }
};

enum class CropKind { mild, inception, center, full };

inline CropRect center_crop(int src_h, int src_w) {
  const int side = std::min(src_h, src_w);
  return {(src_w - side) / 2, (src_h - side) / 2, side, side};
}

/// Samples a crop rectangle. inception: up to 10 attempts with area fraction
/// ~U[0.08, 1] and log-uniform aspect in [3/4, 4/3], center-square fallback.
/// mild: square with side in [0.8, 1.0] * min(H, W) at a uniform position.
inline CropRect sample_crop(CropKind kind, const RngKey& key, int src_h, int src_w) {
  if (src_h < 8 || src_w < 8)
    throw_error(ErrorKind::input, "sample_crop: image " + std::to_string(src_h) + "x" +
                                      std::to_string(src_w) + " is smaller than 8px");
  switch (kind) {
    case CropKind::full:
      return {0, 0, src_w, src_h};
    case CropKind::center:
      return center_crop(src_h, src_w);
    case CropKind::mild: {
      KeyStream s = key.stream();
      const int min_side = std::min(src_h, src_w);
      int side = int(std::ceil(s.uniform(0.8, 1.0) * min_side));
      side = std::min(side, min_side);
      const int x0 = int(s.next_int(0, src_w - side));
      const int y0 = int(s.next_int(0, src_h - side));
      return {x0, y0, side, side};
    }
    case CropKind::inception: {
      KeyStream s = key.stream();
      const double area = double(src_h) * src_w;
      for (int attempt = 0; attempt < 10; ++attempt) {
        const double target_area = s.uniform(0.08, 1.0) * area;
        const double aspect = std::exp(s.uniform(std::log(3.0 / 4.0), std::log(4.0 / 3.0)));
        int w = int(std::lround(std::sqrt(target_area * aspect)));
        int h = int(std::lround(std::sqrt(target_area / aspect)));
        if (w < 1 || h < 1 || w > src_w || h > src_h) continue;
        const double frac = double(w) * h / area;
        const double got_aspect = double(w) / h;
        if (frac < 0.08 || frac > 1.0 || got_aspect < 0.75 || got_aspect > 4.0 / 3.0) continue;
        const int x0 = int(s.next_int(0, src_w - w));
        const int y0 = int(s.next_int(0, src_h - h));
        return {x0, y0, w, h};
      }
      return center_crop(src_h, src_w);
    }
  }
  throw_error(ErrorKind::contract, "unreachable crop kind");
}

// ---------------------------------------------------------------------------
// View application: crop, bilinear resize, flip.
// ---------------------------------------------------------------------------

/// Crop + corner-aligned bilinear resize to out_res^2 + optional horizontal
/// flip. Values stay within the [min, max] of the source region.
inline Tensor apply_view(const Tensor& image, const CropRect& crop, bool flip, int out_res) {
  if (image.rank() != 3)
    throw_error(ErrorKind::dimension, "apply_view expects [H,W,C], got " + shape_str(image.shape()));
  const int src_h = image.dim(0), src_w = image.dim(1), ch = image.dim(2);
  if (!crop.valid_for(src_h, src_w))
    throw_error(ErrorKind::contract, "crop (" + std::to_string(crop.x0) + "," + std::to_string(crop.y0) +
                                         "," + std::to_string(crop.w) + "," + std::to_string(crop.h) +
                                         ") invalid for " + shape_str(image.shape()));
  Tensor out({out_res, out_res, ch});
  const float* src = image.data();
  float* dst = out.data();
  // Corner-aligned sample grid; a 1-pixel output samples the crop center.
  const double sy = out_res > 1 ? double(crop.h - 1) / double(out_res - 1) : 0.0;
  const double sx = out_res > 1 ? double(crop.w - 1) / double(out_res - 1) : 0.0;
  const double oy0 = out_res > 1 ? 0.0 : double(crop.h - 1) / 2.0;
  const double ox0 = out_res > 1 ? 0.0 : double(crop.w - 1) / 2.0;
  struct Axis {
    int lo, hi;
    float w;
  };
  std::vector<Axis> cols(static_cast<size_t>(out_res));
  for (int ox = 0; ox < out_res; ++ox) {
    const double fx = crop.x0 + ox0 + sx * ox;
    const int x1 = std::min(int(fx), src_w - 1);
    cols[size_t(ox)] = {x1, std::min(x1 + 1, src_w - 1), float(fx - x1)};
  }
  for (int oy = 0; oy < out_res; ++oy) {
    const double fy = crop.y0 + oy0 + sy * oy;
    const int y1 = std::min(int(fy), src_h - 1);
    const int y2 = std::min(y1 + 1, src_h - 1);
    const float wy = float(fy - y1);
    const float* row1 = src + size_t(y1) * src_w * ch;
    const float* row2 = src + size_t(y2) * src_w * ch;
    for (int ox = 0; ox < out_res; ++ox) {
      const Axis& a = cols[size_t(ox)];
      const int out_x = flip ? out_res - 1 - ox : ox;
      float* po = dst + (size_t(oy) * out_res + out_x) * ch;
      const float* p11 = row1 + size_t(a.lo) * ch;
      const float* p12 = row1 + size_t(a.hi) * ch;
      const float* p21 = row2 + size_t(a.lo) * ch;
      const float* p22 = row2 + size_t(a.hi) * ch;
      for (int k = 0; k < ch; ++k) {
        const float top = p11[k] + (p12[k] - p11[k]) * a.w;
        const float bot = p21[k] + (p22[k] - p21[k]) * a.w;
        po[k] = top + (bot - top) * wy;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// View plans.
// ---------------------------------------------------------------------------

/// The full sampled randomness of one training view; the unit of
/// teacher/student consistency.
struct ViewPlan {
  CropRect crop;
  bool flip = false;
  int mixup_partner = -1;  // index within the batch, -1 when absent
  float lambda = -1.f;     // mix coefficient, in [0,1] iff partner present

  bool has_mixup() const { return mixup_partner >= 0; }
  bool operator==(const ViewPlan&) const = default;
};

struct ViewPlans {
  std::vector<ViewPlan> student;
  std::vector<ViewPlan> teacher;
};

namespace detail {

inline CropKind student_crop_kind(TeacherMode mode) {
  switch (mode) {
    case TeacherMode::fix_rs: return CropKind::full;  // both sides plain resized
    case TeacherMode::fix_cc: return CropKind::mild;
    case TeacherMode::fix_ic_ens: return CropKind::inception;
    case TeacherMode::ind_rc: return CropKind::mild;
    case TeacherMode::ind_ic: return CropKind::inception;
    case TeacherMode::same_rc: return CropKind::mild;
    case TeacherMode::same_ic: return CropKind::inception;
    case TeacherMode::mix: return CropKind::inception;
  }
  return CropKind::inception;
}

inline ViewPlan draw_plan(CropKind kind, const RngKey& key, int src_h, int src_w) {
  ViewPlan plan;
  plan.crop = sample_crop(kind, key, src_h, src_w);
  if (kind == CropKind::mild || kind == CropKind::inception) {
    // Flip comes from the same branch stream as the crop so consistency
    // covers it; the crop draw consumed counters from a fresh stream, so a
    // dedicated sub-stream keeps the flip stable regardless of crop attempts.
    KeyStream flip_stream({key.run_seed, uint64_t(key.epoch), uint64_t(key.example),
                           uint64_t(key.branch), 0xF11Full});
    plan.flip = flip_stream.next_bool();
  }
  return plan;
}

/// Key-derived fixed-point-free permutation of [0, n): Fisher-Yates shuffles
/// are redrawn until no element maps to itself.
inline std::vector<int> derangement(KeyStream& stream, int n) {
  std::vector<int> perm(static_cast<size_t>(n));
  while (true) {
    for (int i = 0; i < n; ++i) perm[size_t(i)] = i;
    for (int i = n - 1; i > 0; --i) std::swap(perm[size_t(i)], perm[size_t(stream.next_int(0, i))]);
    bool fixed_point = false;
    for (int i = 0; i < n; ++i)
      if (perm[size_t(i)] == i) {
        fixed_point = true;
        break;
      }
    if (!fixed_point) return perm;
  }
}

}  // namespace detail

/// Draws the student and teacher view plans for one batch under a teacher
/// mode. `example_indices` are dataset indices (keys), `batch_ordinal` keys
/// batch-level draws such as the mixup pairing.
inline ViewPlans make_view_plans(TeacherMode mode, uint64_t run_seed, uint32_t epoch,
                                 std::span<const int> example_indices, uint32_t batch_ordinal,
                                 int src_h, int src_w, float mixup_p = 1.f) {
  const int n = int(example_indices.size());
  ViewPlans plans;
  plans.student.resize(size_t(n));
  plans.teacher.resize(size_t(n));
  const CropKind student_kind = detail::student_crop_kind(mode);

  for (int i = 0; i < n; ++i) {
    const uint32_t ex = uint32_t(example_indices[size_t(i)]);
    if (is_shared_mode(mode)) {
      RngKey key{run_seed, epoch, ex, Branch::shared};
      plans.student[size_t(i)] = detail::draw_plan(student_kind, key, src_h, src_w);
      plans.teacher[size_t(i)] = plans.student[size_t(i)];
    } else if (is_independent_mode(mode)) {
      plans.student[size_t(i)] = detail::draw_plan(
          student_kind, RngKey{run_seed, epoch, ex, Branch::student_only}, src_h, src_w);
      plans.teacher[size_t(i)] = detail::draw_plan(
          student_kind, RngKey{run_seed, epoch, ex, Branch::teacher_only}, src_h, src_w);
    } else {
      // fixed teacher: student view is drawn, teacher view is the
      // deterministic precompute view
      plans.student[size_t(i)] = detail::draw_plan(
          student_kind, RngKey{run_seed, epoch, ex, Branch::student_only}, src_h, src_w);
      ViewPlan t;
      t.crop = (mode == TeacherMode::fix_rs) ? CropRect{0, 0, src_w, src_h} : center_crop(src_h, src_w);
      plans.teacher[size_t(i)] = t;
      if (mode == TeacherMode::fix_rs) plans.student[size_t(i)] = t;  // plain resize on both sides
    }
  }

  if (mode == TeacherMode::mix && n > 1) {
    KeyStream perm_stream({run_seed, uint64_t(epoch), uint64_t(batch_ordinal), uint64_t(Branch::mixup),
                           0xBA7C4ull});
    const std::vector<int> partner = detail::derangement(perm_stream, n);
    for (int i = 0; i < n; ++i) {
      KeyStream lam(RngKey{run_seed, epoch, uint32_t(example_indices[size_t(i)]), Branch::mixup}.stream());
      const bool apply = mixup_p >= 1.f || lam.next_unit() < mixup_p;
      const float lambda = float(lam.uniform(0.0, 1.0));
      if (!apply) continue;
      plans.student[size_t(i)].mixup_partner = partner[size_t(i)];
      plans.student[size_t(i)].lambda = lambda;
      plans.teacher[size_t(i)].mixup_partner = partner[size_t(i)];
      plans.teacher[size_t(i)].lambda = lambda;
    }
  }
  return plans;
}

// ---------------------------------------------------------------------------
// Mixup.
// ---------------------------------------------------------------------------

/// mixed_i = lambda_i * x_i + (1 - lambda_i) * x_partner(i), and the same
/// blend on labels when provided. Plans without mixup fields leave their
/// entries unchanged.
inline void mixup_apply(Tensor& images, Tensor* labels, std::span<const ViewPlan> plans) {
  const int n = images.dim(0);
  if (int(plans.size()) != n)
    throw_error(ErrorKind::contract, "mixup_apply: " + std::to_string(plans.size()) + " plans for batch of " +
                                         std::to_string(n));
  const int64_t stride = images.size() / n;
  const Tensor source_images(images.shape(), std::vector<float>(images.data(), images.data() + images.size()));
  std::vector<float> source_labels;
  int label_stride = 0;
  if (labels) {
    source_labels.assign(labels->data(), labels->data() + labels->size());
    label_stride = int(labels->size() / n);
  }
  for (int i = 0; i < n; ++i) {
    const ViewPlan& p = plans[size_t(i)];
    if (!p.has_mixup()) continue;
    if (p.mixup_partner >= n || p.lambda < 0.f || p.lambda > 1.f)
      throw_error(ErrorKind::contract, "mixup plan for example " + std::to_string(i) +
                                           " has partner " + std::to_string(p.mixup_partner) +
                                           " lambda " + std::to_string(p.lambda));
    const float lam = p.lambda;
    const float* self = source_images.data() + size_t(i) * stride;
    const float* other = source_images.data() + size_t(p.mixup_partner) * stride;
    float* out = images.data() + size_t(i) * stride;
    for (int64_t j = 0; j < stride; ++j) out[j] = lam * self[j] + (1.f - lam) * other[j];
    if (labels) {
      const float* ls = source_labels.data() + size_t(i) * label_stride;
      const float* lo = source_labels.data() + size_t(p.mixup_partner) * label_stride;
      float* lout = labels->data() + size_t(i) * label_stride;
      for (int j = 0; j < label_stride; ++j) lout[j] = lam * ls[j] + (1.f - lam) * lo[j];
    }
  }
}

/// Builds the view batch [N, out_res, out_res, C] for one branch, applying
/// mixup afterwards when the plans carry it. When `labels` is given it is
/// mixed with the same coefficients (supervised baselines).
inline Tensor build_view_batch(const std::vector<Tensor>& source_images,
                               std::span<const ViewPlan> plans, int out_res,
                               Tensor* labels = nullptr) {
  const int n = int(source_images.size());
  if (int(plans.size()) != n)
    throw_error(ErrorKind::contract, "build_view_batch: plan count mismatch");
  const int ch = source_images.empty() ? 0 : source_images[0].dim(2);
  Tensor batch({n, out_res, out_res, ch});
  const int64_t stride = int64_t(out_res) * out_res * ch;
  bool any_mixup = false;
  for (int i = 0; i < n; ++i) {
    const Tensor view = apply_view(source_images[size_t(i)], plans[size_t(i)].crop,
                                   plans[size_t(i)].flip, out_res);
    std::memcpy(batch.data() + size_t(i) * stride, view.data(), sizeof(float) * size_t(stride));
    any_mixup |= plans[size_t(i)].has_mixup();
  }
  if (any_mixup) mixup_apply(batch, labels, plans);
  return batch;
}

}  // namespace funmatch
