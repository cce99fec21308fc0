#pragma once

#include <cstdint>

namespace factorizer {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t mix_seed(uint64_t a, uint64_t b) { return splitmix64(splitmix64(a) ^ b); }

inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c) {
  return splitmix64(mix_seed(a, b) ^ c);
}

/// Stateless counter-based stream: value i of stream `key` is a pure
/// function of (key, i), so any element can be regenerated independently.
class CounterRng {
 public:
  explicit CounterRng(uint64_t key) : key_(key) {}

  uint64_t bits(uint64_t counter) const { return splitmix64(splitmix64(key_ ^ counter) + counter); }

  /// Uniform on the open interval (0, 1).
  double uniform01(uint64_t counter) const {
    return (static_cast<double>(bits(counter) >> 11) + 0.5) * 0x1.0p-53;
  }

 private:
  uint64_t key_;
};

}  // namespace factorizer
