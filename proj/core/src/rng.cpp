#include "mergerl/rng.hpp"

namespace mergerl {

Rng Rng::stream(std::uint64_t master_seed, std::string_view purpose,
                std::uint64_t index) {
  // FNV-1a over the purpose name, then mixed with the seed and index.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : purpose) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return Rng(mix64(mix64(master_seed) ^ h) ^ mix64(index + 0x51ed27));
}

std::size_t Rng::categorical(std::span<const double> probs) {
  const double u = uniform();
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return i;
  }
  // Rounding left u above the cumulative sum: take the last positive entry.
  for (std::size_t i = probs.size(); i-- > 0;) {
    if (probs[i] > 0.0) return i;
  }
  return probs.size() - 1;
}

}  // namespace mergerl
