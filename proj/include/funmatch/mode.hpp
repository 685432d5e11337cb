#pragma once

#include <string>

#include "funmatch/common.hpp"

namespace funmatch {

/// The eight teacher-target regimes: fixed precomputed targets, independent
/// teacher/student views, consistent shared views, and consistent views plus
/// mixup (function matching).
enum class TeacherMode {
  fix_rs,
  fix_cc,
  fix_ic_ens,
  ind_rc,
  ind_ic,
  same_rc,
  same_ic,
  mix,
};

inline const char* mode_name(TeacherMode m) {
  switch (m) {
    case TeacherMode::fix_rs: return "fix/rs";
    case TeacherMode::fix_cc: return "fix/cc";
    case TeacherMode::fix_ic_ens: return "fix/ic_ens";
    case TeacherMode::ind_rc: return "ind/rc";
    case TeacherMode::ind_ic: return "ind/ic";
    case TeacherMode::same_rc: return "same/rc";
    case TeacherMode::same_ic: return "same/ic";
    case TeacherMode::mix: return "mix";
  }
  return "?";
}

inline TeacherMode parse_mode(const std::string& s) {
  for (TeacherMode m : {TeacherMode::fix_rs, TeacherMode::fix_cc, TeacherMode::fix_ic_ens,
                        TeacherMode::ind_rc, TeacherMode::ind_ic, TeacherMode::same_rc,
                        TeacherMode::same_ic, TeacherMode::mix})
    if (s == mode_name(m)) return m;
  throw_error(ErrorKind::config, "unknown teacher mode '" + s + "'");
}

inline bool is_fixed_mode(TeacherMode m) {
  return m == TeacherMode::fix_rs || m == TeacherMode::fix_cc || m == TeacherMode::fix_ic_ens;
}

inline bool is_independent_mode(TeacherMode m) {
  return m == TeacherMode::ind_rc || m == TeacherMode::ind_ic;
}

/// Modes where teacher and student consume the identical view.
inline bool is_shared_mode(TeacherMode m) {
  return m == TeacherMode::same_rc || m == TeacherMode::same_ic || m == TeacherMode::mix;
}

}  // namespace funmatch
