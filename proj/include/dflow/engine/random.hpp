#pragma once

#include <cstdint>
#include <random>

namespace dflow {

/// Independent stream per (seed, stream, index); no global generator anywhere.
inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

/// Stream identifiers used across the library.
namespace streams {
inline constexpr std::uint64_t train_batch = 11;
inline constexpr std::uint64_t eval_base = 23;
inline constexpr std::uint64_t eval_target = 29;
inline constexpr std::uint64_t dump = 31;
}  // namespace streams

}  // namespace dflow
