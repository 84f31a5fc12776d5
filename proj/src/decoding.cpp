#include "capgen/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "capgen/errors.hpp"

namespace capgen {

namespace {

template <typename Real>
struct ModelState final : Scorer::State {
  nn::Var<Real> projected;
  nn::LstmState<Real> lstm;
};

struct PrefixState final : Scorer::State {
  std::vector<TokenId> prefix;
};

std::vector<double> checked_log_probs(const Scorer& scorer, const Scorer::State& state) {
  auto lp = scorer.log_probs(state);
  if (lp.size() != scorer.vocab_size()) {
    throw DimensionError("scorer returned " + std::to_string(lp.size()) + " log-probabilities for vocabulary size " +
                         std::to_string(scorer.vocab_size()));
  }
  for (double x : lp) {
    if (std::isnan(x)) throw NumericError("scorer returned a NaN log-probability");
  }
  return lp;
}

void check_decode_args(const Scorer& scorer, std::size_t width, std::size_t max_len) {
  if (width == 0) throw UsageError("beam width must be at least 1");
  if (max_len == 0) throw UsageError("maximum caption length must be at least 1");
  if (scorer.vocab_size() < kSpecialTokenCount) throw UsageError("scorer vocabulary lacks the special tokens");
}

}  // namespace

template <typename Real>
Scorer::StatePtr ModelScorer<Real>::start(std::span<const float> image) const {
  auto state = std::make_shared<ModelState<Real>>();
  state->projected = model_.project_image(image, 1, nullptr);
  const TokenId first = kStartToken;
  state->lstm = model_.step(state->projected, model_.initial_state(1), std::span(&first, 1), nullptr);
  return state;
}

template <typename Real>
Scorer::StatePtr ModelScorer<Real>::advance(const StatePtr& state, TokenId token) const {
  const auto& s = static_cast<const ModelState<Real>&>(*state);
  auto next = std::make_shared<ModelState<Real>>();
  next->projected = s.projected;
  next->lstm = model_.step(s.projected, s.lstm, std::span(&token, 1), nullptr);
  return next;
}

template <typename Real>
std::vector<double> ModelScorer<Real>::log_probs(const State& state) const {
  const auto& s = static_cast<const ModelState<Real>&>(state);
  auto logits = model_.logits(s.projected, s.lstm, nullptr);
  return nn::log_softmax<Real>(logits->value.values());
}

Scorer::StatePtr PrefixScorer::start(std::span<const float>) const {
  auto state = std::make_shared<PrefixState>();
  state->prefix = {kStartToken};
  return state;
}

Scorer::StatePtr PrefixScorer::advance(const StatePtr& state, TokenId token) const {
  auto next = std::make_shared<PrefixState>(static_cast<const PrefixState&>(*state));
  next->prefix.push_back(token);
  return next;
}

std::vector<double> PrefixScorer::log_probs(const State& state) const {
  return fn_(static_cast<const PrefixState&>(state).prefix);
}

Hypothesis beam_search(const Scorer& scorer, std::span<const float> image, std::size_t width, std::size_t max_len) {
  check_decode_args(scorer, width, max_len);
  struct Active {
    std::vector<TokenId> tokens;
    double score;
    Scorer::StatePtr state;
  };
  struct Candidate {
    double score;
    std::size_t parent;
    TokenId token;
  };
  const auto v = static_cast<TokenId>(scorer.vocab_size());

  std::vector<Active> beam{{{}, 0.0, scorer.start(image)}};
  Hypothesis best;
  bool have_best = false;
  std::vector<Candidate> candidates;
  while (!beam.empty()) {
    candidates.clear();
    for (std::size_t p = 0; p < beam.size(); ++p) {
      const auto lp = checked_log_probs(scorer, *beam[p].state);
      for (TokenId t = 0; t < v; ++t) {
        if (t == kStartToken) continue;
        candidates.push_back({beam[p].score + lp[static_cast<std::size_t>(t)], p, t});
      }
    }
    const std::size_t keep = std::min(width, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end(),
                      [](const Candidate& a, const Candidate& b) {
                        if (a.score != b.score) return a.score > b.score;
                        if (a.parent != b.parent) return a.parent < b.parent;
                        return a.token < b.token;
                      });

    std::vector<Active> next;
    for (std::size_t k = 0; k < keep; ++k) {
      const auto& c = candidates[k];
      const auto& parent = beam[c.parent];
      Hypothesis done;
      bool finished = false;
      if (c.token == kEndToken) {
        done = {parent.tokens, c.score, true};
        finished = true;
      } else {
        auto tokens = parent.tokens;
        tokens.push_back(c.token);
        if (tokens.size() >= max_len) {
          done = {std::move(tokens), c.score, false};
          finished = true;
        } else {
          next.push_back({std::move(tokens), c.score, scorer.advance(parent.state, c.token)});
        }
      }
      if (finished && (!have_best || done.log_prob > best.log_prob)) {
        best = std::move(done);
        have_best = true;
      }
    }
    beam = std::move(next);
    // Log-probabilities are non-positive, so no active hypothesis can climb
    // past the best finished one.
    if (have_best && !beam.empty() && best.log_prob >= beam.front().score) break;
  }
  return best;
}

Hypothesis greedy_decode(const Scorer& scorer, std::span<const float> image, std::size_t max_len) {
  check_decode_args(scorer, 1, max_len);
  Hypothesis out;
  auto state = scorer.start(image);
  while (true) {
    const auto lp = checked_log_probs(scorer, *state);
    TokenId best = -1;
    for (TokenId t = 0; t < static_cast<TokenId>(lp.size()); ++t) {
      if (t == kStartToken) continue;
      if (best < 0 || lp[static_cast<std::size_t>(t)] > lp[static_cast<std::size_t>(best)]) best = t;
    }
    out.log_prob += lp[static_cast<std::size_t>(best)];
    if (best == kEndToken) {
      out.ended = true;
      return out;
    }
    out.tokens.push_back(best);
    if (out.tokens.size() >= max_len) return out;
    state = scorer.advance(state, best);
  }
}

void write_hypotheses(const std::filesystem::path& path, const std::vector<CaptionLine>& lines) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FileError("cannot write hypothesis file " + path.string());
  for (const auto& line : lines) {
    out << line.image_id << '\t';
    for (std::size_t k = 0; k < line.tokens.size(); ++k) out << (k ? " " : "") << line.tokens[k];
    out << '\n';
  }
  if (!out) throw FileError("failed writing hypothesis file " + path.string());
}

std::vector<CaptionLine> read_hypotheses(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FileError("cannot open hypothesis file " + path.string());
  std::vector<CaptionLine> lines;
  std::string text;
  for (int number = 1; std::getline(in, text); ++number) {
    if (text.empty()) continue;
    const auto tab = text.find('\t');
    if (tab == std::string::npos || tab == 0) {
      throw FormatError(path.string() + ":" + std::to_string(number) + ": expected 'image_id<TAB>caption'");
    }
    CaptionLine line{text.substr(0, tab), {}};
    std::istringstream words(text.substr(tab + 1));
    for (std::string w; words >> w;) line.tokens.push_back(w);
    lines.push_back(std::move(line));
  }
  return lines;
}

template class ModelScorer<float>;
template class ModelScorer<double>;

}  // namespace capgen
