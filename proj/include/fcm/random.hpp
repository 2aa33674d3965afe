#pragma once

#include <cstdint>
#include <random>

namespace fcm {

using Rng = std::mt19937_64;

// Independent generator streams derived from one run seed.
enum class Stream : std::uint32_t {
  init = 1,
  data = 2,
  mask = 3,
  dropout = 4,
  eval = 5,
  synth = 6,
};

inline Rng make_rng(std::uint64_t seed, Stream stream, std::uint64_t index = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  return Rng(seq);
}

}  // namespace fcm
