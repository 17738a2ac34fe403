#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace var3d {

using Scalar = double;
using ArrayX = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec3 = Eigen::Matrix<Scalar, 3, 1>;

using Shape = std::vector<int>;

struct ArgumentError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct IOError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct StateError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline long numel(const Shape& s) {
  long n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s);

inline void check_arg(bool ok, const std::string& msg) {
  if (!ok) throw ArgumentError(msg);
}

// FNV-1a, used for parameter hashing and seed derivation.
uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull);
uint64_t fnv1a64(std::string_view s, uint64_t h = 0xcbf29ce484222325ull);

// Derives an independent stream seed from (root seed, purpose tag, counters).
uint64_t mix_seed(uint64_t seed, std::string_view tag, uint64_t a = 0, uint64_t b = 0);

// Deterministic RNG with fixed bit-exact uniform/normal draws (no reliance on
// libstdc++ distribution internals).
class RngStream {
 public:
  explicit RngStream(uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ull) {}

  uint64_t next_u64();
  Scalar uniform();                    // [0, 1)
  Scalar uniform(Scalar lo, Scalar hi);
  Scalar normal();                     // N(0, 1)
  int uniform_int(int lo, int hi);     // inclusive range

 private:
  uint64_t state_;
  bool have_spare_ = false;
  Scalar spare_ = 0;
};

}  // namespace var3d
