#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <vector>

namespace dsac {

// Deterministic random source. All sampling helpers convert raw engine
// output themselves so results do not depend on the standard library's
// distribution implementations.
class RandomSource {
 public:
  explicit RandomSource(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n), n > 0.
  std::uint64_t uniform_index(std::uint64_t n) {
    // rejection sampling on the top bits, bias-free
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  // Standard normal via Box-Muller (no cached spare, keeps state minimal).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Independent child stream. Mixing is splitmix64 over (state draw, tag) so
  // per-entry streams are reproducible regardless of consumption order
  // elsewhere.
  RandomSource split(std::uint64_t tag) {
    std::uint64_t x = engine_() + 0x9e3779b97f4a7c15ULL * (tag + 1);
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebULL;
    x ^= x >> 31;
    return RandomSource(x);
  }

 private:
  std::mt19937_64 engine_;
};

// n distinct indices drawn uniformly from [0, count). Draw order is kept.
inline std::vector<int> sample_distinct_indices(int count, int n, RandomSource& rng) {
  if (n < 0 || count < n)
    throw std::invalid_argument("sample_distinct_indices: need count >= n >= 0");
  std::vector<int> out;
  out.reserve(n);
  if (n > count / 2) {
    // partial Fisher-Yates
    std::vector<int> pool(count);
    for (int i = 0; i < count; ++i) pool[i] = i;
    for (int i = 0; i < n; ++i) {
      const int j = i + static_cast<int>(rng.uniform_index(count - i));
      std::swap(pool[i], pool[j]);
      out.push_back(pool[i]);
    }
  } else {
    while (static_cast<int>(out.size()) < n) {
      const int candidate = static_cast<int>(rng.uniform_index(count));
      bool dup = false;
      for (const int v : out) dup |= (v == candidate);
      if (!dup) out.push_back(candidate);
    }
  }
  return out;
}

}  // namespace dsac
