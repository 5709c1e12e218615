#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace seqrl {

using Rng = std::mt19937_64;

/// Stable 64-bit seed for a named substream of a master seed.
std::uint64_t derive_seed(std::uint64_t master, std::string_view name);

inline Rng make_stream(std::uint64_t master, std::string_view name) {
  return Rng(derive_seed(master, name));
}

/// Uniform double in [0, 1) with 53 random bits.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Uniform integer in [0, n) by rejection; independent of the standard
/// library's distribution implementations.
std::uint64_t uniform_index(Rng& rng, std::uint64_t n);

/// Fisher-Yates shuffle driven by uniform_index.
template <class T>
void shuffle_in_place(std::vector<T>& values, Rng& rng) {
  for (std::size_t i = values.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform_index(rng, i));
    std::swap(values[i - 1], values[j]);
  }
}

std::string serialize_rng(const Rng& rng);
Rng deserialize_rng(const std::string& text);

}  // namespace seqrl
