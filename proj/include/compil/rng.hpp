#pragma once

#include <cstdint>
#include <random>

#include "compil/tensor.hpp"

namespace compil {

// splitmix64; used to derive independent sub-seeds from (seed, stream ids) so
// that restarting at a task boundary reproduces the exact stream.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                                 std::uint64_t c = 0) {
  return mix_seed(mix_seed(mix_seed(seed ^ 0x243f6a8885a308d3ull) ^ a) ^ mix_seed(b ^ c));
}

template <typename T>
void fill_uniform(Tensor<T>& t, std::mt19937_64& rng, T lo, T hi) {
  std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
  for (T& v : t.values()) v = static_cast<T>(dist(rng));
}

// Normal(0, std) resampled until within 2 std, the usual truncated init.
template <typename T>
void fill_trunc_normal(Tensor<T>& t, std::mt19937_64& rng, T stddev) {
  std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
  for (T& v : t.values()) {
    double x = dist(rng);
    while (std::abs(x) > 2.0 * static_cast<double>(stddev)) x = dist(rng);
    v = static_cast<T>(x);
  }
}

}  // namespace compil
