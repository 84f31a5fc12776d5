#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "capgen/captioner.hpp"
#include "capgen/tokens.hpp"

namespace capgen {

// Incremental next-token distribution used by the decoders. A state stands
// for an image plus the prefix read so far.
class Scorer {
 public:
  struct State {
    virtual ~State() = default;
  };
  using StatePtr = std::shared_ptr<const State>;

  virtual ~Scorer() = default;

  virtual std::size_t vocab_size() const = 0;
  // State after reading the start token.
  virtual StatePtr start(std::span<const float> image) const = 0;
  virtual StatePtr advance(const StatePtr& state, TokenId token) const = 0;
  // Natural-log probabilities of every next token (size vocab_size()).
  virtual std::vector<double> log_probs(const State& state) const = 0;
};

// Adapts a CaptionModel; the image projection is computed once per image
// and the LSTM state is carried forward one token at a time.
template <typename Real>
class ModelScorer final : public Scorer {
 public:
  explicit ModelScorer(const CaptionModel<Real>& model) : model_(model) {}

  std::size_t vocab_size() const override { return model_.config().vocab_size; }
  StatePtr start(std::span<const float> image) const override;
  StatePtr advance(const StatePtr& state, TokenId token) const override;
  std::vector<double> log_probs(const State& state) const override;

 private:
  const CaptionModel<Real>& model_;
};

// Scorer defined by a function of the whole prefix (which starts with the
// start token); the image is ignored. Used for stub models.
class PrefixScorer final : public Scorer {
 public:
  using Function = std::function<std::vector<double>(std::span<const TokenId> prefix)>;

  PrefixScorer(std::size_t vocab_size, Function log_probs) : vocab_size_(vocab_size), fn_(std::move(log_probs)) {}

  std::size_t vocab_size() const override { return vocab_size_; }
  StatePtr start(std::span<const float> image) const override;
  StatePtr advance(const StatePtr& state, TokenId token) const override;
  std::vector<double> log_probs(const State& state) const override;

 private:
  std::size_t vocab_size_;
  Function fn_;
};

struct Hypothesis {
  std::vector<TokenId> tokens;  // emitted tokens without start and end
  double log_prob = 0.0;        // sum of per-step log-probabilities, end token included
  bool ended = false;           // false when stopped by the length cap
};

// Beam search over raw cumulative log-probabilities. Every active hypothesis
// is expanded with every token except the start token; the best `width`
// candidates survive. A candidate ending in the end token is finished and
// leaves the beam, as does one holding `max_len` tokens. Search stops when
// the beam is empty or no active hypothesis can beat the best finished one.
// Ties go to the earlier parent, then the lower token id.
Hypothesis beam_search(const Scorer& scorer, std::span<const float> image, std::size_t width = 3,
                       std::size_t max_len = 20);

// Highest-probability token at each step (lowest id on ties).
Hypothesis greedy_decode(const Scorer& scorer, std::span<const float> image, std::size_t max_len = 20);

// Hypothesis files: UTF-8 lines "image_id<TAB>space-separated tokens".
struct CaptionLine {
  std::string image_id;
  std::vector<std::string> tokens;

  friend bool operator==(const CaptionLine&, const CaptionLine&) = default;
};

void write_hypotheses(const std::filesystem::path& path, const std::vector<CaptionLine>& lines);
std::vector<CaptionLine> read_hypotheses(const std::filesystem::path& path);

}  // namespace capgen
