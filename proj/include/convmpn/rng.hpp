#pragma once

// Seeded random streams. The engine is std::mt19937_64 (bit-exact across
// platforms by the standard); the distribution transforms are written out
// here because the standard library distributions are implementation-defined
// and would break cross-toolchain reproducibility.

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace convmpn {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Stable child-stream seed for (parent seed, stream id). Worker count never
// changes outputs because every record/stream derives its own seed.
inline std::uint64_t child_seed(std::uint64_t seed, std::uint64_t id) {
  return splitmix64(seed ^ splitmix64(id + 0x517cc1b727220a95ULL));
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  // Uniform in [0,1), 53-bit resolution.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n); n >= 1.
  std::uint64_t index(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(eng_()) * n) >> 64);
  }

  int range(int lo, int hi) {  // inclusive bounds
    return lo + static_cast<int>(index(static_cast<std::uint64_t>(hi - lo + 1)));
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal via Box-Muller, cosine branch only: no cached spare, so
  // the serialized engine state alone reproduces the stream.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
  }

  double normal(double mean, double sigma) { return mean + sigma * normal(); }

  std::string serialize() const {
    std::ostringstream os;
    os << eng_;
    return os.str();
  }

  void deserialize(const std::string& s) {
    std::istringstream is(s);
    is >> eng_;
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace convmpn
