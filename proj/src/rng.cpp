#include "gfsseg/rng.hpp"

#include <cmath>
#include <numbers>

namespace gfsseg {

double Rng::normal() {
  double u1 = uniform();
  double u2 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::vector<int> Rng::sample_without_replacement(int n, int k) {
  if (k > n) k = n;
  std::vector<int> pool(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) pool[static_cast<std::size_t>(i)] = i;
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    std::size_t j = i + static_cast<std::size_t>(below(static_cast<std::uint64_t>(n - i)));
    std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
    out.push_back(pool[static_cast<std::size_t>(i)]);
  }
  return out;
}

std::uint64_t Rng::split_mix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  x = x ^ (x >> 31);
  return x == 0 ? 0x9E3779B97F4A7C15ULL : x;
}

std::uint64_t Rng::mix(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::uint64_t h = split_mix(seed);
  h = split_mix(h ^ (a + 0x9E3779B97F4A7C15ULL));
  h = split_mix(h ^ (b + 0xC2B2AE3D27D4EB4FULL));
  return h;
}

}  // namespace gfsseg
