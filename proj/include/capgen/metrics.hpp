#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "capgen/data.hpp"
#include "capgen/decoding.hpp"

namespace capgen {

using Tokens = std::vector<std::string>;

struct EvalItem {
  std::string image_id;
  Tokens hypothesis;
  std::vector<Tokens> references;
};

using EvalCorpus = std::vector<EvalItem>;

// Pairs each hypothesis line with the references of its image. Throws
// IntegrityError when an image id has no references.
EvalCorpus make_eval_corpus(const std::vector<CaptionLine>& hypotheses, const std::vector<ImageEntry>& images);

// Corpus-level BLEU-n (1 <= n <= 4): geometric mean of clipped k-gram
// precisions for k = 1..n times exp(min(0, 1 - r/c)), where r sums the
// reference length closest to each hypothesis (ties to the shorter). No
// smoothing: any zero precision gives 0.
double bleu(const EvalCorpus& corpus, int n);
std::array<double, 4> bleu_all(const EvalCorpus& corpus);

// LCS F-measure with beta = 1.2 from the best precision and best recall
// over an image's references; per image, then averaged. Empty
// hypotheses score 0.
double rouge_l(const EvalCorpus& corpus);
std::vector<double> rouge_l_scores(const EvalCorpus& corpus);

// CIDEr-D: tf-idf k-gram vectors (k = 1..4) with document frequency taken
// over each image's reference set, clipped similarity, Gaussian length
// penalty (sigma 6), averaged over k and references, times 10; per image,
// then averaged. Needs at least two images.
double cider(const EvalCorpus& corpus);
std::vector<double> cider_scores(const EvalCorpus& corpus);

// 100 * distinct non-special generated tokens found in `vocab` / number of
// non-special vocabulary tokens.
double vocab_usage(std::span<const Tokens> hypotheses, const Vocabulary& vocab);

struct MetricReport {
  std::array<double, 4> bleu{};
  double rouge_l = 0.0;
  double cider = 0.0;
  double vocab_usage_percent = 0.0;

  friend bool operator==(const MetricReport&, const MetricReport&) = default;
};

MetricReport evaluate(const EvalCorpus& corpus, const Vocabulary& vocab);

// Lines "metric<TAB>value" with six decimals; keys bleu1..bleu4, rouge_l,
// cider, vocab_usage.
void write_report(const std::filesystem::path& path, const MetricReport& report);
MetricReport read_report(const std::filesystem::path& path);

}  // namespace capgen
