#pragma once

#include <cstdint>
#include <initializer_list>

namespace funmatch {

// Counter-based randomness: every draw is a pure function of a key and a
// counter, so streams can be evaluated in any order and always reproduce.

inline uint64_t mix64(uint64_t x) {
  // splitmix64 finalizer
  x ^= x >> 30;
  x *= 0xBF58476D1CE4E5B9ull;
  x ^= x >> 27;
  x *= 0x94D049BB133111EBull;
  x ^= x >> 31;
  return x;
}

inline uint64_t hash_combine(uint64_t h, uint64_t v) {
  return mix64(h ^ (v + 0x9E3779B97F4A7C15ull + (h << 6) + (h >> 2)));
}

// A deterministic stream of draws derived from a tuple of key fields.
class KeyStream {
 public:
  explicit KeyStream(std::initializer_list<uint64_t> fields) {
    base_ = 0x243F6A8885A308D3ull;
    for (uint64_t f : fields) base_ = hash_combine(base_, f);
  }

  uint64_t next_u64() { return mix64(base_ + (++counter_) * 0x9E3779B97F4A7C15ull); }

  // Uniform in [0, 1).
  double next_unit() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

  // Uniform integer in [lo, hi], inclusive.
  int64_t next_int(int64_t lo, int64_t hi) {
    uint64_t range = uint64_t(hi - lo) + 1;
    // Lemire multiply-shift; bias is < 2^-64 per draw, irrelevant here.
    uint64_t x = next_u64();
    uint64_t hi_part = uint64_t((__uint128_t(x) * __uint128_t(range)) >> 64);
    return lo + int64_t(hi_part);
  }

  bool next_bool() { return (next_u64() & 1ull) != 0; }

 private:
  uint64_t base_ = 0;
  uint64_t counter_ = 0;
};

}  // namespace funmatch
