#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "funmatch/rng.hpp"
#include "funmatch/tensor.hpp"

namespace funmatch {

// ---------------------------------------------------------------------------
// Little-endian binary IO helpers shared by the file formats.
// ---------------------------------------------------------------------------

namespace io {

inline void put_u32(std::string& out, uint32_t v) {
  out.push_back(char(v & 0xFF));
  out.push_back(char((v >> 8) & 0xFF));
  out.push_back(char((v >> 16) & 0xFF));
  out.push_back(char((v >> 24) & 0xFF));
}

inline void put_u16(std::string& out, uint16_t v) {
  out.push_back(char(v & 0xFF));
  out.push_back(char((v >> 8) & 0xFF));
}

inline void put_f32(std::string& out, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

class Reader {
 public:
  Reader(const std::string& bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

  uint32_t u32() {
    need(4);
    uint32_t v = uint32_t(uint8_t(bytes_[pos_])) | uint32_t(uint8_t(bytes_[pos_ + 1])) << 8 |
                 uint32_t(uint8_t(bytes_[pos_ + 2])) << 16 | uint32_t(uint8_t(bytes_[pos_ + 3])) << 24;
    pos_ += 4;
    return v;
  }
  uint16_t u16() {
    need(2);
    uint16_t v = uint16_t(uint8_t(bytes_[pos_])) | uint16_t(uint16_t(uint8_t(bytes_[pos_ + 1])) << 8);
    pos_ += 2;
    return v;
  }
  float f32() {
    uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::string raw(size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void raw_into(void* dst, size_t n) {
    need(n);
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == bytes_.size(); }
  size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(size_t n) {
    if (pos_ + n > bytes_.size())
      throw_error(ErrorKind::format, source_ + ": truncated (need " + std::to_string(n) + " bytes at offset " +
                                         std::to_string(pos_) + ", have " +
                                         std::to_string(bytes_.size() - pos_) + ")");
  }
  const std::string& bytes_;
  std::string source_;
  size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw_error(ErrorKind::input, "cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw_error(ErrorKind::input, "cannot open " + path + " for writing");
  out.write(bytes.data(), std::streamsize(bytes.size()));
  if (!out) throw_error(ErrorKind::input, "short write to " + path);
}

}  // namespace io

// ---------------------------------------------------------------------------
// Dataset.
// ---------------------------------------------------------------------------

/// Uncompressed image classification dataset: u8 pixels, channel-last,
/// converted to floats in [-1, 1] at batch time.
struct Dataset {
  std::string name = "train";
  int height = 0, width = 0, channels = 0;
  int num_classes = 0;
  std::vector<uint8_t> pixels;   // count * H * W * C
  std::vector<uint16_t> labels;  // count

  int count() const { return int(labels.size()); }
  size_t image_bytes() const { return size_t(height) * width * channels; }
  const uint8_t* image(int i) const { return pixels.data() + size_t(i) * image_bytes(); }

  /// One image as a float [H, W, C] tensor in [-1, 1]; 0 -> -1 and 255 -> +1
  /// exactly.
  Tensor image_tensor(int i) const {
    Tensor t({height, width, channels});
    const uint8_t* src = image(i);
    for (size_t j = 0; j < image_bytes(); ++j) t.data()[j] = float(src[j]) / 255.f * 2.f - 1.f;
    return t;
  }
};

// FMDS: magic "FMDS", version u32=1, count u32, height u32, width u32,
// channels u32, num_classes u32; then per record H*W*C u8 pixels + u16 label.

inline std::string encode_dataset(const Dataset& ds) {
  std::string out;
  out += "FMDS";
  io::put_u32(out, 1);
  io::put_u32(out, uint32_t(ds.count()));
  io::put_u32(out, uint32_t(ds.height));
  io::put_u32(out, uint32_t(ds.width));
  io::put_u32(out, uint32_t(ds.channels));
  io::put_u32(out, uint32_t(ds.num_classes));
  for (int i = 0; i < ds.count(); ++i) {
    out.append(reinterpret_cast<const char*>(ds.image(i)), ds.image_bytes());
    io::put_u16(out, ds.labels[size_t(i)]);
  }
  return out;
}

inline void save_dataset(const std::string& path, const Dataset& ds) {
  io::write_file(path, encode_dataset(ds));
}

inline Dataset decode_dataset(const std::string& bytes, const std::string& source) {
  io::Reader r(bytes, source);
  if (r.raw(4) != "FMDS") throw_error(ErrorKind::format, source + ": bad magic, expected FMDS");
  const uint32_t version = r.u32();
  if (version != 1)
    throw_error(ErrorKind::format, source + ": unsupported FMDS version " + std::to_string(version));
  Dataset ds;
  const uint32_t count = r.u32();
  ds.height = int(r.u32());
  ds.width = int(r.u32());
  ds.channels = int(r.u32());
  ds.num_classes = int(r.u32());
  if (count < 1) throw_error(ErrorKind::format, source + ": dataset count must be >= 1");
  if (ds.height < 1 || ds.width < 1 || ds.channels < 1 || ds.num_classes < 2)
    throw_error(ErrorKind::format, source + ": invalid header dimensions");
  ds.pixels.resize(size_t(count) * ds.image_bytes());
  ds.labels.resize(count);
  for (uint32_t i = 0; i < count; ++i) {
    r.raw_into(ds.pixels.data() + size_t(i) * ds.image_bytes(), ds.image_bytes());
    ds.labels[i] = r.u16();
    if (ds.labels[i] >= ds.num_classes)
      throw_error(ErrorKind::data, source + ": record " + std::to_string(i) + " has label " +
                                       std::to_string(ds.labels[i]) + " >= num_classes " +
                                       std::to_string(ds.num_classes));
  }
  if (!r.done()) throw_error(ErrorKind::format, source + ": " + std::to_string(r.remaining()) +
                                                    " trailing bytes");
  return ds;
}

inline Dataset load_dataset(const std::string& path) {
  return decode_dataset(io::read_file(path), path);
}

// ---------------------------------------------------------------------------
// Synthetic data.
// ---------------------------------------------------------------------------

/// Class-conditional synthetic images: each class is a smooth key-derived
/// wave-pattern template, spatially concentrated under a per-sample envelope
/// (class evidence lives somewhere in the image, as it does in photographs,
/// so crops can miss it); each sample adds affine jitter, smooth per-sample
/// distractor waves and pixel noise. The distractors carry no label signal,
/// so models must learn to ignore structure that varies per example - that
/// is what makes the task hard enough for capacity and augmentation gaps to
/// show. Disjoint sample ranges of the same seed share templates (via
/// `offset`), which gives held-out splits for free.
inline Dataset synth_dataset(uint64_t seed, int count, int num_classes, int resolution,
                             int offset = 0) {
  if (num_classes < 2) throw_error(ErrorKind::config, "synth_dataset: num_classes must be >= 2");
  if (resolution < 8) throw_error(ErrorKind::config, "synth_dataset: resolution must be >= 8");
  if (count < 1) throw_error(ErrorKind::config, "synth_dataset: count must be >= 1");

  constexpr int kWaves = 4;        // class-template waves
  constexpr int kDistractors = 3;  // per-sample structured nuisance waves
  constexpr double kSignal = 1.15;
  constexpr double kDistractor = 0.75;
  constexpr double kNoise = 0.40;  // uniform pixel noise amplitude
  constexpr double kJitterShift = 0.14;
  constexpr double kJitterScale = 0.12;
  constexpr double kEnvelopeMin = 0.22, kEnvelopeMax = 0.34;  // class-signal radius
  const int channels = 3;

  Dataset ds;
  ds.height = resolution;
  ds.width = resolution;
  ds.channels = channels;
  ds.num_classes = num_classes;
  ds.pixels.resize(size_t(count) * ds.image_bytes());
  ds.labels.resize(size_t(count));

  struct Wave {
    double fx, fy, phase, amp[3];
  };
  auto draw_wave = [](KeyStream& s, double amp_scale) {
    Wave wv;
    const double freq = s.uniform(0.5, 2.5);
    const double angle = s.uniform(0.0, 2.0 * M_PI);
    wv.fx = freq * std::cos(angle);
    wv.fy = freq * std::sin(angle);
    wv.phase = s.uniform(0.0, 2.0 * M_PI);
    for (int ch = 0; ch < 3; ++ch) wv.amp[ch] = amp_scale * s.uniform(-1.0, 1.0);
    return wv;
  };

  // Per-class template waves.
  std::vector<Wave> waves(size_t(num_classes) * kWaves);
  for (int c = 0; c < num_classes; ++c) {
    KeyStream s({seed, 0x7E3Bull, uint64_t(c)});
    for (int k = 0; k < kWaves; ++k) waves[size_t(c) * kWaves + k] = draw_wave(s, kSignal);
  }

  std::vector<Wave> sample_waves(kDistractors);
  for (int i = 0; i < count; ++i) {
    const int c = (offset + i) % num_classes;
    ds.labels[size_t(i)] = uint16_t(c);
    KeyStream s({seed, 0x5A3Dull, uint64_t(offset + i)});
    const double dx = s.uniform(-kJitterShift, kJitterShift);
    const double dy = s.uniform(-kJitterShift, kJitterShift);
    const double sc = s.uniform(1.0 - kJitterScale, 1.0 + kJitterScale);
    const double ex = s.uniform(0.3, 0.7);  // class-evidence location
    const double ey = s.uniform(0.3, 0.7);
    const double er = s.uniform(kEnvelopeMin, kEnvelopeMax);
    for (int k = 0; k < kDistractors; ++k) sample_waves[size_t(k)] = draw_wave(s, kDistractor);
    uint8_t* img = ds.pixels.data() + size_t(i) * ds.image_bytes();
    for (int y = 0; y < resolution; ++y) {
      const double v = ((double(y) / (resolution - 1)) - 0.5) * sc + 0.5 + dy;
      for (int x = 0; x < resolution; ++x) {
        const double u = ((double(x) / (resolution - 1)) - 0.5) * sc + 0.5 + dx;
        const double d2 = (u - ex) * (u - ex) + (v - ey) * (v - ey);
        const double envelope = std::exp(-d2 / (2.0 * er * er));
        double val[3] = {0, 0, 0};
        for (int k = 0; k < kWaves; ++k) {
          const Wave& wv = waves[size_t(c) * kWaves + k];
          const double sv = envelope * std::sin(2.0 * M_PI * (wv.fx * u + wv.fy * v) + wv.phase);
          for (int ch = 0; ch < 3; ++ch) val[ch] += wv.amp[ch] * sv;
        }
        for (int k = 0; k < kDistractors; ++k) {
          const Wave& wv = sample_waves[size_t(k)];
          const double sv = std::sin(2.0 * M_PI * (wv.fx * u + wv.fy * v) + wv.phase);
          for (int ch = 0; ch < 3; ++ch) val[ch] += wv.amp[ch] * sv;
        }
        for (int ch = 0; ch < 3; ++ch) {
          double pixel = val[ch] * 0.5 + s.uniform(-kNoise, kNoise);
          pixel = std::min(1.0, std::max(-1.0, pixel));
          img[(size_t(y) * resolution + x) * 3 + ch] = uint8_t(std::lround((pixel + 1.0) * 127.5));
        }
      }
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Splits.
// ---------------------------------------------------------------------------

/// Contiguous prefix/suffix slice expression: name[:P%], name[P%:], or a
/// whole-split name.
struct SplitSpec {
  enum class Kind { whole, prefix, suffix };
  std::string base;
  Kind kind = Kind::whole;
  int percent = 100;

  static SplitSpec parse(const std::string& text) {
    SplitSpec spec;
    const size_t bracket = text.find('[');
    if (bracket == std::string::npos) {
      spec.base = text;
      if (spec.base.empty()) throw_error(ErrorKind::config, "empty split expression");
      return spec;
    }
    spec.base = text.substr(0, bracket);
    if (text.back() != ']')
      throw_error(ErrorKind::config, "split expression '" + text + "' missing closing bracket");
    std::string inner = text.substr(bracket + 1, text.size() - bracket - 2);
    const size_t colon = inner.find(':');
    if (colon == std::string::npos || inner.find('%') == std::string::npos)
      throw_error(ErrorKind::config, "split expression '" + text + "' must look like name[:P%] or name[P%:]");
    auto parse_pct = [&](const std::string& s) {
      size_t pos = 0;
      int v = std::stoi(s, &pos);
      if (pos + 1 != s.size() || s[pos] != '%')
        throw_error(ErrorKind::config, "bad percentage in split expression '" + text + "'");
      return v;
    };
    if (colon == 0) {
      spec.kind = Kind::prefix;
      spec.percent = parse_pct(inner.substr(1));
    } else {
      spec.kind = Kind::suffix;
      spec.percent = parse_pct(inner.substr(0, colon));
      if (colon + 1 != inner.size())
        throw_error(ErrorKind::config, "split expression '" + text + "' must slice only one side");
    }
    if (spec.kind != Kind::whole && (spec.percent <= 0 || spec.percent >= 100)) {
      if (!(spec.kind == Kind::prefix && spec.percent == 100))
        throw_error(ErrorKind::config, "split percentage must be in (0, 100) in '" + text + "'");
    }
    return spec;
  }

  std::string str() const {
    if (kind == Kind::whole) return base;
    if (kind == Kind::prefix) return base + "[:" + std::to_string(percent) + "%]";
    return base + "[" + std::to_string(percent) + "%:]";
  }
};

/// Slice by stored order with floor rounding at the boundary; complementary
/// specs partition exactly.
inline Dataset split(const Dataset& ds, const SplitSpec& spec) {
  int begin = 0, end = ds.count();
  if (spec.kind == SplitSpec::Kind::prefix) {
    end = int(int64_t(ds.count()) * spec.percent / 100);
  } else if (spec.kind == SplitSpec::Kind::suffix) {
    begin = int(int64_t(ds.count()) * spec.percent / 100);
  }
  if (begin >= end)
    throw_error(ErrorKind::data, "split " + spec.str() + " of " + std::to_string(ds.count()) +
                                     " records is empty");
  Dataset out;
  out.name = spec.str();
  out.height = ds.height;
  out.width = ds.width;
  out.channels = ds.channels;
  out.num_classes = ds.num_classes;
  out.pixels.assign(ds.pixels.begin() + int64_t(begin) * int64_t(ds.image_bytes()),
                    ds.pixels.begin() + int64_t(end) * int64_t(ds.image_bytes()));
  out.labels.assign(ds.labels.begin() + begin, ds.labels.begin() + end);
  return out;
}

// ---------------------------------------------------------------------------
// Batching.
// ---------------------------------------------------------------------------

/// Emission order of one epoch under a bounded streaming shuffle: a buffer of
/// the given capacity is filled and each emission swaps a key-derived random
/// occupant out. Pure function of (run_seed, epoch); covers every index
/// exactly once.
inline std::vector<int> epoch_order(int count, int shuffle_buffer, uint64_t run_seed, uint32_t epoch) {
  if (shuffle_buffer < 1) shuffle_buffer = 1;
  KeyStream stream({run_seed, uint64_t(epoch), 0x5F0Full, 0xD47Aull});
  std::vector<int> order;
  order.reserve(size_t(count));
  std::vector<int> buffer;
  buffer.reserve(size_t(std::min(count, shuffle_buffer)));
  for (int i = 0; i < count; ++i) {
    if (int(buffer.size()) < shuffle_buffer) {
      buffer.push_back(i);
      continue;
    }
    const size_t j = size_t(stream.next_int(0, int64_t(buffer.size()) - 1));
    order.push_back(buffer[j]);
    buffer[j] = i;
  }
  while (!buffer.empty()) {
    const size_t j = size_t(stream.next_int(0, int64_t(buffer.size()) - 1));
    order.push_back(buffer[j]);
    buffer[j] = buffer.back();
    buffer.pop_back();
  }
  return order;
}

struct BatchIndices {
  std::vector<int> indices;  // dataset indices in emission order
};

/// Batches of one epoch; the final short batch is emitted as-is.
inline std::vector<BatchIndices> iterate_batches(int count, int batch_size, int shuffle_buffer,
                                                 uint64_t run_seed, uint32_t epoch) {
  if (batch_size < 1) throw_error(ErrorKind::contract, "batch_size must be >= 1");
  const std::vector<int> order = epoch_order(count, shuffle_buffer, run_seed, epoch);
  std::vector<BatchIndices> batches;
  for (int start = 0; start < count; start += batch_size) {
    BatchIndices b;
    const int end = std::min(count, start + batch_size);
    b.indices.assign(order.begin() + start, order.begin() + end);
    batches.push_back(std::move(b));
  }
  return batches;
}

/// Materializes the float image batch [N, H, W, C] for a set of indices.
inline Tensor materialize_images(const Dataset& ds, std::span<const int> indices) {
  Tensor batch({int(indices.size()), ds.height, ds.width, ds.channels});
  const size_t stride = ds.image_bytes();
  for (size_t i = 0; i < indices.size(); ++i) {
    const uint8_t* src = ds.image(indices[i]);
    float* dst = batch.data() + i * stride;
    for (size_t j = 0; j < stride; ++j) dst[j] = float(src[j]) / 255.f * 2.f - 1.f;
  }
  return batch;
}

inline std::vector<Tensor> materialize_image_list(const Dataset& ds, std::span<const int> indices) {
  std::vector<Tensor> out;
  out.reserve(indices.size());
  for (int idx : indices) out.push_back(ds.image_tensor(idx));
  return out;
}

}  // namespace funmatch
