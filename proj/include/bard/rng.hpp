#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace bard {

using Rng = std::mt19937_64;

// Seed for a named sub-stream of `base`. Streams with different names or
// indices are decorrelated, so adding draws to one stage never shifts the
// draws seen by another.
std::uint64_t derive_seed(std::uint64_t base, std::string_view stream, std::uint64_t index = 0);

inline Rng make_rng(std::uint64_t base, std::string_view stream, std::uint64_t index = 0) {
  return Rng{derive_seed(base, stream, index)};
}

}  // namespace bard
