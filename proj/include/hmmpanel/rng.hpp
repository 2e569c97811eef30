#pragma once

#include <cstdint>
#include <random>

namespace hmmpanel {

// Named substreams so that parallel work (starts, replicates) stays
// reproducible regardless of scheduling.
namespace stream {
inline constexpr std::uint64_t kStarts = 1;
inline constexpr std::uint64_t kBootstrap = 2;
inline constexpr std::uint64_t kSimulation = 3;
inline constexpr std::uint64_t kGeneral = 4;
}  // namespace stream

inline std::mt19937_64 substream(std::uint64_t seed, std::uint64_t tag,
                                 std::uint64_t index = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed),
                    static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(tag),
                    static_cast<std::uint32_t>(tag >> 32),
                    static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

}  // namespace hmmpanel
