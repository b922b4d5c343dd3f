#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <utility>
#include <vector>

#include "cscde/tensor.hpp"

namespace cscde {

/// SplitMix64 generator. Every distribution below is derived from next() so
/// sequences are identical across standard libraries.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, bound).
  std::uint64_t below(std::uint64_t bound) {
    // Lemire's multiply-shift; the slight bias is irrelevant at our bounds.
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next()) * bound) >> 64);
  }

  bool coin(double p = 0.5) { return uniform() < p; }

  /// Standard normal via Box-Muller (one value per call).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

 private:
  std::uint64_t state_;
};

/// Independent streams per concern, so drawing more numbers for one of them
/// leaves the others untouched.
enum class Stream : std::uint64_t { Init = 1, Augment = 2, Shuffle = 3, Data = 4, Check = 5 };

inline SplitMix64 make_stream(std::uint64_t seed, Stream s, std::uint64_t sub = 0) {
  SplitMix64 mix(seed ^ (static_cast<std::uint64_t>(s) * 0xd1b54a32d192ed03ULL));
  const std::uint64_t a = mix.next();
  SplitMix64 mix2(a + sub * 0x9e3779b97f4a7c15ULL);
  return SplitMix64(mix2.next());
}

template <typename Real>
Tensor<Real> random_normal(Shape s, SplitMix64& rng, double stddev = 1.0) {
  Tensor<Real> t(s);
  for (auto& v : t.vec()) v = static_cast<Real>(rng.normal() * stddev);
  return t;
}

template <typename Real>
Tensor<Real> random_uniform(Shape s, SplitMix64& rng, double lo, double hi) {
  Tensor<Real> t(s);
  for (auto& v : t.vec()) v = static_cast<Real>(rng.uniform(lo, hi));
  return t;
}

}  // namespace cscde
