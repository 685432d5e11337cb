#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace funmatch {

// Error taxonomy used across the library. Every throw site goes through
// one of the helpers below so messages stay greppable.
enum class ErrorKind {
  dimension,  // shape / rank mismatch
  config,     // invalid configuration value or combination
  contract,   // precondition violated by the caller
  data,       // bad record content (labels, indices)
  format,     // malformed file
  input,      // unusable input (too small, empty)
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void throw_error(ErrorKind kind, const std::string& msg) {
  throw Error(kind, msg);
}

using Shape = std::vector<int>;

inline int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

}  // namespace funmatch
