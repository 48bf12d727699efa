#pragma once

#include <cmath>
#include <cstdint>

namespace planepose {

// Counter-based generator (splitmix64). Every consumer derives its own
// stream from a parent seed and a stream id, so results do not depend on
// evaluation order or thread count.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  Rng split(uint64_t stream) const {
    return Rng(mix(state_ + 0x9E3779B97F4A7C15ULL * (stream + 1)));
  }

  uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    return mix(state_);
  }

  // [0, 1)
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // standard normal, Box-Muller (two uniforms per draw)
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log1p(-u1));
    return r * std::cos(2.0 * M_PI * u2);
  }

  // uniform integer in [0, n)
  int uniform_int(int n) {
    return static_cast<int>(next_u64() % static_cast<uint64_t>(n));
  }

 private:
  static uint64_t mix(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  uint64_t state_;
};

}  // namespace planepose
