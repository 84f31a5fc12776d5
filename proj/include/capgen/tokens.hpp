#pragma once

#include <cstddef>
#include <string_view>

#include "capgen/nn.hpp"

namespace capgen {

// Fixed vocabulary slots for the special tokens; they count toward v.
inline constexpr TokenId kUnknownToken = 0;
inline constexpr TokenId kStartToken = 1;
inline constexpr TokenId kEndToken = 2;
inline constexpr std::size_t kSpecialTokenCount = 3;

inline constexpr std::string_view kUnknownText = "<unk>";
inline constexpr std::string_view kStartText = "<beg>";
inline constexpr std::string_view kEndText = "<end>";

inline constexpr bool is_special(TokenId id) { return id >= 0 && static_cast<std::size_t>(id) < kSpecialTokenCount; }

}  // namespace capgen
