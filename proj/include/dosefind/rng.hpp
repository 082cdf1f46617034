#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace dosefind {

// SplitMix64 finalizer; used only to derive stream keys.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seeded, splittable random stream.
///
/// A stream is identified by (seed, stream). Both the engine (mt19937_64)
/// and the seeding procedure (std::seed_seq) are fully specified by the
/// standard, and the variate transforms below are written out by hand, so
/// draws are bit-reproducible across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
      : seed_(seed), stream_(stream) {}

  /// Child stream determined by (seed, stream, key); independent of how
  /// many draws this stream has made.
  Rng split(std::uint64_t key) const { return Rng(seed_, mix64(stream_ + mix64(key + 1))); }

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }

  std::uint64_t next_u64() { return engine()(); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine()() >> 11) * 0x1.0p-53; }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller (one variate per call).
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  // Seeding is deferred to the first draw: many streams (one per decision)
  // are never drawn from, and seeding dominates their cost.
  std::mt19937_64& engine() {
    if (!seeded_) {
      const std::uint64_t s = mix64(stream_ ^ mix64(seed_));
      std::array<std::uint32_t, 4> words{
          static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32),
          static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(s >> 32)};
      std::seed_seq seq(words.begin(), words.end());
      engine_.seed(seq);
      seeded_ = true;
    }
    return engine_;
  }

  std::uint64_t seed_;
  std::uint64_t stream_;
  bool seeded_ = false;
  std::mt19937_64 engine_{0};
};

}  // namespace dosefind
