#include "var3d/common.hpp"

#include <cmath>
#include <sstream>

namespace var3d {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

uint64_t fnv1a64(const void* data, size_t n, uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

uint64_t fnv1a64(std::string_view s, uint64_t h) { return fnv1a64(s.data(), s.size(), h); }

static uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

uint64_t mix_seed(uint64_t seed, std::string_view tag, uint64_t a, uint64_t b) {
  uint64_t h = fnv1a64(tag);
  h = splitmix64(h ^ splitmix64(seed));
  h = splitmix64(h ^ splitmix64(a * 0x2545f4914f6cdd1dull + 1));
  h = splitmix64(h ^ splitmix64(b * 0x9e3779b97f4a7c15ull + 1));
  return h;
}

uint64_t RngStream::next_u64() {
  state_ = splitmix64(state_);
  return state_;
}

Scalar RngStream::uniform() {
  return static_cast<Scalar>(next_u64() >> 11) * (1.0 / 9007199254740992.0);
}

Scalar RngStream::uniform(Scalar lo, Scalar hi) { return lo + (hi - lo) * uniform(); }

Scalar RngStream::normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  Scalar u1 = uniform(), u2 = uniform();
  while (u1 <= 1e-300) u1 = uniform();
  Scalar r = std::sqrt(-2.0 * std::log(u1));
  Scalar a = 2.0 * M_PI * u2;
  spare_ = r * std::sin(a);
  have_spare_ = true;
  return r * std::cos(a);
}

int RngStream::uniform_int(int lo, int hi) {
  check_arg(hi >= lo, "uniform_int: empty range");
  uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
  return lo + static_cast<int>(next_u64() % span);
}

}  // namespace var3d
