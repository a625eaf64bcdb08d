#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace mergerl {

// Seeded pseudo-random source. Draws are derived from raw mt19937_64 output
// rather than <random> distributions so sequences are identical across
// standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  // Independent stream for a named purpose ("scene", "policy", "training").
  static Rng stream(std::uint64_t master_seed, std::string_view purpose,
                    std::uint64_t index = 0);

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::size_t index(std::size_t n) {
    return static_cast<std::size_t>(uniform() * static_cast<double>(n));
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Samples an index from a probability vector (entries sum to one).
  std::size_t categorical(std::span<const double> probs);

 private:
  std::mt19937_64 engine_;
};

// SplitMix64 finalizer; used to derive stream seeds and hash-based tables.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace mergerl
