#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <vector>

namespace itit {

/// SplitMix64 finalizer; used to derive independent stream seeds.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Experiment random stream. Every stochastic decision in the library draws
/// from an explicitly passed Rng so that runs are reproducible bit for bit.
///
/// Streams are counter-derived: `Rng::derive(seed, {step, purpose})` always
/// yields the same sequence, which is what lets a resumed training run
/// continue identically without serializing generator internals.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(mix64(seed)) {}

  static Rng derive(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
    std::uint64_t s = mix64(seed);
    for (auto p : path) s = mix64(s ^ mix64(p + 0x632be59bd9b4e019ULL));
    return Rng(s);
  }

  /// A child stream; advances this stream by one draw.
  Rng fork() { return Rng(engine_()); }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n) {
    std::uniform_int_distribution<std::size_t> d(0, n - 1);
    return d(engine_);
  }

  double normal(double mean, double stddev) {
    std::normal_distribution<double> d(mean, stddev);
    return d(engine_);
  }

  /// Standard Gumbel sample, G = -log(-log(u)) with u clamped away from {0, 1}.
  double gumbel() {
    double u = std::clamp(uniform(), 1e-12, 1.0 - 1e-12);
    return -std::log(-std::log(u));
  }

  template <class It>
  void shuffle(It first, It last) {
    // Fisher-Yates with our own index draws so the permutation does not
    // depend on the standard library's shuffle implementation.
    auto n = static_cast<std::size_t>(last - first);
    for (std::size_t i = n; i > 1; --i) {
      std::size_t j = below(i);
      std::iter_swap(first + (i - 1), first + j);
    }
  }

  /// Index drawn from an unnormalized nonnegative weight vector.
  template <class T>
  std::size_t categorical(std::span<const T> weights) {
    double total = 0.0;
    for (auto w : weights) total += static_cast<double>(w);
    double r = uniform() * total;
    double acc = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      acc += static_cast<double>(weights[i]);
      if (r < acc) return i;
    }
    // Rounding left r == total; pick the last positive weight.
    for (std::size_t i = weights.size(); i-- > 0;)
      if (weights[i] > T(0)) return i;
    return 0;
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace itit
