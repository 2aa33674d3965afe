#pragma once

#include <cstdint>

// Byte-level vocabulary: ids 0-255 are raw bytes, followed by four specials.
namespace fcm::vocab {

inline constexpr std::int32_t kBos = 256;
inline constexpr std::int32_t kEod = 257;
inline constexpr std::int32_t kMask = 258;
inline constexpr std::int32_t kPad = 259;
inline constexpr std::int32_t kSize = 260;

inline constexpr bool is_special(std::int32_t id) { return id >= kBos && id < kSize; }

}  // namespace fcm::vocab
