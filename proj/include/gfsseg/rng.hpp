#pragma once

#include <cstdint>
#include <vector>

namespace gfsseg {

// Deterministic RNG used everywhere seeds appear in the public API.
// Generator and distributions are hand-rolled so that streams are identical
// across standard libraries and platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(split_mix(seed)) {}

  std::uint64_t next_u64() {
    // xorshift* keeps the generator self-contained and reproducible.
    std::uint64_t x = state_;
    x ^= x >> 12;
    x ^= x << 25;
    x ^= x >> 27;
    state_ = x;
    return x * 0x2545F4914F6CDD1DULL;
  }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n), n >= 1.
  std::uint64_t below(std::uint64_t n) {
    // Rejection sampling to avoid modulo bias.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  int range_int(int lo, int hi) {  // inclusive bounds
    return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi - lo + 1)));
  }

  // Standard normal via Box-Muller (no cached spare, to keep state minimal).
  double normal();

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // First k elements of a Fisher-Yates pass: a uniform k-subset of 0..n-1,
  // in sampled order.
  std::vector<int> sample_without_replacement(int n, int k);

  // Derive an independent stream for a sub-task, stable in (seed, tags).
  static std::uint64_t mix(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

 private:
  static std::uint64_t split_mix(std::uint64_t x);

  std::uint64_t state_;
};

}  // namespace gfsseg
