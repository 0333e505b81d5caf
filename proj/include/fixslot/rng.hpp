#pragma once

// Seed derivation and portable samplers. Distributions are hand-rolled on top
// of the raw engine output so that streams do not depend on the standard
// library implementation.

#include <cmath>
#include <cstdint>
#include <random>

#include "fixslot/tensor.hpp"

namespace fixslot {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent sub-stream seed from a base seed and up to three stream tags.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag, std::uint64_t a = 0,
                                 std::uint64_t b = 0) {
  std::uint64_t s = splitmix64(base ^ (tag * 0x9e3779b97f4a7c15ULL));
  s = splitmix64(s ^ (a + 0x1000193ULL));
  s = splitmix64(s ^ (b + 0x811c9dc5ULL));
  return s;
}

inline double uniform_unit(Rng& rng) {  // [0, 1)
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform_unit(rng); }

inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) { return rng() % n; }

// One standard normal draw (Box-Muller, cosine branch; consumes two words).
inline double normal(Rng& rng) {
  const double u1 = static_cast<double>((rng() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
  const double u2 = uniform_unit(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

template <typename S>
void fill_normal(Rng& rng, S* p, Index n) {
  Index i = 0;
  for (; i + 1 < n; i += 2) {
    const double u1 = static_cast<double>((rng() >> 11) + 1) * 0x1.0p-53;
    const double u2 = uniform_unit(rng);
    const double r = std::sqrt(-2.0 * std::log(u1));
    p[i] = static_cast<S>(r * std::cos(2.0 * M_PI * u2));
    p[i + 1] = static_cast<S>(r * std::sin(2.0 * M_PI * u2));
  }
  if (i < n) p[i] = static_cast<S>(normal(rng));
}

template <typename S>
Tensor<S> randn(Rng& rng, const Shape& shape) {
  typename Tensor<S>::Buffer b(shape.numel());
  fill_normal(rng, b.data(), b.size());
  return Tensor<S>(shape, std::move(b));
}

template <typename S>
Tensor<S> rand_uniform(Rng& rng, const Shape& shape, S lo, S hi) {
  typename Tensor<S>::Buffer b(shape.numel());
  for (Index i = 0; i < b.size(); ++i) b(i) = static_cast<S>(uniform(rng, lo, hi));
  return Tensor<S>(shape, std::move(b));
}

}  // namespace fixslot
