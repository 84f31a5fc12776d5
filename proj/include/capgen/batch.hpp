#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "capgen/nn.hpp"

namespace capgen {

// A padded block of encoded captions with their image features. Row r of
// `tokens` holds lengths[r] real tokens (start ... end) followed by padding;
// padded positions are never scored.
struct Minibatch {
  std::size_t size = 0;
  std::size_t max_length = 0;
  std::vector<TokenId> tokens;
  std::vector<std::size_t> lengths;
  std::size_t feature_dim = 0;
  std::vector<float> features;

  std::span<const TokenId> caption(std::size_t r) const {
    return std::span<const TokenId>(tokens).subspan(r * max_length, lengths[r]);
  }
  std::span<const float> feature(std::size_t r) const {
    return std::span<const float>(features).subspan(r * feature_dim, feature_dim);
  }
};

}  // namespace capgen
