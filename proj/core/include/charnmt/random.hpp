#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "charnmt/abi.hpp"

namespace charnmt::inline CHARNMT_ABI {

using Rng = std::mt19937_64;

// Uniform in [lo, hi).
inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

std::string rng_state(const Rng& rng);
void set_rng_state(Rng& rng, const std::string& state);

}  // namespace charnmt
