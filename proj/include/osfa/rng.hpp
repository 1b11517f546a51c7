#pragma once

#include <cstdint>

namespace osfa {

/// Counter-based random source. Output k of a stream is a pure function of
/// (seed, k), so streams are reproducible across platforms and compilers.
/// Independent streams are derived with fork().
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64();

  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform();
  /// Uniform in [lo, hi). Throws std::invalid_argument when lo >= hi.
  double uniform(double lo, double hi);
  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);
  /// Standard normal via Box-Muller; consumes two counter steps.
  double normal();
  bool bernoulli(double p) { return uniform() < p; }

  /// Child stream keyed by `stream`; does not advance this stream.
  Rng fork(std::uint64_t stream) const;

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

std::uint64_t mix64(std::uint64_t x);

}  // namespace osfa
