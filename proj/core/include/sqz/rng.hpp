#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace sqz {

using Rng = std::mt19937_64;

// Independent stream seeds derived from one run seed, so that every consumer
// of randomness (init, shuffling, subsets, augmentation) is reproducible on
// its own and across resumed runs.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag, std::uint64_t index = 0);

inline Rng make_rng(std::uint64_t seed, std::string_view tag, std::uint64_t index = 0) {
  return Rng(derive_seed(seed, tag, index));
}

}  // namespace sqz
