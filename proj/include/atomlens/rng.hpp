#pragma once

// Self-contained seeded random generator (splitmix64). All randomness in the
// pipeline flows through this so that a given seed produces bit-identical
// results on every platform; std::random distributions are not portable
// across standard libraries.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string_view>
#include <vector>

namespace atomlens {

inline uint64_t fnv1a64(std::string_view bytes) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Unbiased integer in [0, bound) via rejection.
  uint64_t below(uint64_t bound) {
    if (bound == 0) throw std::invalid_argument("Rng::below: bound must be > 0");
    const uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    uint64_t r;
    do {
      r = next_u64();
    } while (r >= limit);
    return r % bound;
  }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; the second value of each pair is cached.
  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 == 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * M_PI * u2;
    cached_ = r * std::sin(theta);
    have_cached_ = true;
    return r * std::cos(theta);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t state_;
  bool have_cached_ = false;
  double cached_ = 0.0;
};

// Per-stage seed derivation: the stage label is hashed into the base seed so
// that pipeline stages driven by one --seed flag draw independent streams.
inline uint64_t derive_seed(uint64_t base, std::string_view label) {
  Rng g(base ^ fnv1a64(label));
  return g.next_u64();
}

inline uint64_t derive_seed(uint64_t base, std::string_view label, uint64_t index) {
  Rng g(base ^ fnv1a64(label) ^ (0x9e3779b97f4a7c15ull * (index + 1)));
  return g.next_u64();
}

}  // namespace atomlens
