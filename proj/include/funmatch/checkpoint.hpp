#pragma once

#include <set>
#include <string>
#include <utility>
#include <vector>

#include "funmatch/data.hpp"
#include "funmatch/tensor.hpp"

namespace funmatch {

/// Named tensors plus a config snapshot. Model parameters keep their names;
/// optimizer slots use an "opt/" prefix. Save -> load is bitwise identical.
struct Checkpoint {
  std::vector<std::pair<std::string, Tensor>> tensors;
  std::string config_snapshot;

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
  bool has_optimizer_state() const {
    for (const auto& [n, t] : tensors)
      if (n.rfind("opt/", 0) == 0) return true;
    return false;
  }
};

// FMCK: magic "FMCK", version u32=1, num_tensors u32; per tensor: name_len
// u32, name bytes, rank u32, dims u32 each, then f32 values row-major;
// finally the config snapshot as length-prefixed UTF-8.

inline std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out;
  out += "FMCK";
  io::put_u32(out, 1);
  io::put_u32(out, uint32_t(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    io::put_u32(out, uint32_t(name.size()));
    out += name;
    io::put_u32(out, uint32_t(t.rank()));
    for (int d : t.shape()) io::put_u32(out, uint32_t(d));
    const float* data = t.data();
    for (int64_t i = 0; i < t.size(); ++i) io::put_f32(out, data[i]);
  }
  io::put_u32(out, uint32_t(ckpt.config_snapshot.size()));
  out += ckpt.config_snapshot;
  return out;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  io::write_file(path, encode_checkpoint(ckpt));
}

inline Checkpoint decode_checkpoint(const std::string& bytes, const std::string& source) {
  io::Reader r(bytes, source);
  if (r.raw(4) != "FMCK") throw_error(ErrorKind::format, source + ": bad magic, expected FMCK");
  const uint32_t version = r.u32();
  if (version != 1)
    throw_error(ErrorKind::format, source + ": unsupported FMCK version " + std::to_string(version));
  Checkpoint ckpt;
  const uint32_t count = r.u32();
  std::set<std::string> seen;
  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t name_len = r.u32();
    const std::string name = r.raw(name_len);
    if (!seen.insert(name).second)
      throw_error(ErrorKind::format, source + ": duplicate tensor name '" + name + "'");
    const uint32_t rank = r.u32();
    Shape shape;
    for (uint32_t d = 0; d < rank; ++d) shape.push_back(int(r.u32()));
    Tensor t(shape);
    for (int64_t j = 0; j < t.size(); ++j) t.data()[j] = r.f32();
    ckpt.tensors.emplace_back(name, std::move(t));
  }
  const uint32_t snapshot_len = r.u32();
  ckpt.config_snapshot = r.raw(snapshot_len);
  if (!r.done())
    throw_error(ErrorKind::format, source + ": " + std::to_string(r.remaining()) + " trailing bytes");
  return ckpt;
}

inline Checkpoint load_checkpoint(const std::string& path) {
  return decode_checkpoint(io::read_file(path), path);
}

}  // namespace funmatch
