#include "capgen/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <unordered_map>

#include "capgen/errors.hpp"

namespace capgen {

namespace {

constexpr int kMaxOrder = 4;

// k-gram -> count, keyed by the space-joined tokens.
using NgramCounts = std::map<std::string, int>;

std::array<NgramCounts, kMaxOrder> count_ngrams(const Tokens& tokens) {
  std::array<NgramCounts, kMaxOrder> counts;
  for (std::size_t k = 1; k <= kMaxOrder; ++k) {
    for (std::size_t i = 0; i + k <= tokens.size(); ++i) {
      std::string key = tokens[i];
      for (std::size_t j = 1; j < k; ++j) key += ' ' + tokens[i + j];
      ++counts[k - 1][key];
    }
  }
  return counts;
}

void check_corpus(const EvalCorpus& corpus) {
  if (corpus.empty()) throw UsageError("cannot score an empty corpus");
  for (const auto& item : corpus) {
    if (item.references.empty()) throw IntegrityError("image " + item.image_id + " has no references");
  }
}

std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> row(b.size() + 1, 0);
  for (const auto& x : a) {
    std::size_t diagonal = 0;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t above = row[j];
      row[j] = x == b[j - 1] ? diagonal + 1 : std::max(row[j], row[j - 1]);
      diagonal = above;
    }
  }
  return row[b.size()];
}

std::string fixed6(double value) {
  char buffer[64];
  std::snprintf(buffer, sizeof buffer, "%.6f", value);
  return buffer;
}

}  // namespace

EvalCorpus make_eval_corpus(const std::vector<CaptionLine>& hypotheses, const std::vector<ImageEntry>& images) {
  std::unordered_map<std::string, const ImageEntry*> by_id;
  for (const auto& image : images) by_id.emplace(image.id, &image);
  EvalCorpus corpus;
  for (const auto& line : hypotheses) {
    auto it = by_id.find(line.image_id);
    if (it == by_id.end()) throw IntegrityError("hypothesis for unknown image " + line.image_id);
    EvalItem item{line.image_id, line.tokens, {}};
    for (const auto& caption : it->second->captions) item.references.push_back(caption.tokens);
    if (item.references.empty()) throw IntegrityError("image " + line.image_id + " has no references");
    corpus.push_back(std::move(item));
  }
  return corpus;
}

std::array<double, 4> bleu_all(const EvalCorpus& corpus) {
  check_corpus(corpus);
  std::array<double, kMaxOrder> guess{}, correct{};
  double hyp_len = 0.0, ref_len = 0.0;
  for (const auto& item : corpus) {
    const auto hyp = count_ngrams(item.hypothesis);
    std::array<std::map<std::string, int>, kMaxOrder> max_ref;
    std::size_t closest = item.references.front().size();
    for (const auto& ref : item.references) {
      const auto c = item.hypothesis.size();
      const auto gap = [c](std::size_t r) { return r > c ? r - c : c - r; };
      if (gap(ref.size()) < gap(closest) || (gap(ref.size()) == gap(closest) && ref.size() < closest)) {
        closest = ref.size();
      }
      const auto counts = count_ngrams(ref);
      for (int k = 0; k < kMaxOrder; ++k) {
        for (const auto& [gram, n] : counts[k]) max_ref[k][gram] = std::max(max_ref[k][gram], n);
      }
    }
    hyp_len += static_cast<double>(item.hypothesis.size());
    ref_len += static_cast<double>(closest);
    for (int k = 0; k < kMaxOrder; ++k) {
      for (const auto& [gram, n] : hyp[k]) {
        guess[k] += n;
        auto it = max_ref[k].find(gram);
        if (it != max_ref[k].end()) correct[k] += std::min(n, it->second);
      }
    }
  }

  const double brevity = hyp_len > 0.0 ? std::exp(std::min(0.0, 1.0 - ref_len / hyp_len)) : 0.0;
  std::array<double, 4> scores{};
  double log_sum = 0.0;
  bool zero = false;
  for (int k = 0; k < kMaxOrder; ++k) {
    if (correct[k] == 0.0) zero = true;
    if (!zero) log_sum += std::log(correct[k] / guess[k]);
    scores[k] = zero ? 0.0 : brevity * std::exp(log_sum / (k + 1));
  }
  return scores;
}

double bleu(const EvalCorpus& corpus, int n) {
  if (n < 1 || n > kMaxOrder) throw UsageError("BLEU order must be in 1..4, got " + std::to_string(n));
  return bleu_all(corpus)[static_cast<std::size_t>(n - 1)];
}

std::vector<double> rouge_l_scores(const EvalCorpus& corpus) {
  check_corpus(corpus);
  constexpr double kBeta = 1.2;
  std::vector<double> scores;
  for (const auto& item : corpus) {
    double best_p = 0.0, best_r = 0.0;
    if (!item.hypothesis.empty()) {
      for (const auto& ref : item.references) {
        if (ref.empty()) continue;
        const double lcs = static_cast<double>(lcs_length(item.hypothesis, ref));
        best_p = std::max(best_p, lcs / static_cast<double>(item.hypothesis.size()));
        best_r = std::max(best_r, lcs / static_cast<double>(ref.size()));
      }
    }
    const double b2 = kBeta * kBeta;
    scores.push_back(best_p > 0.0 && best_r > 0.0 ? (1.0 + b2) * best_p * best_r / (best_r + b2 * best_p) : 0.0);
  }
  return scores;
}

double rouge_l(const EvalCorpus& corpus) {
  const auto scores = rouge_l_scores(corpus);
  double sum = 0.0;
  for (double s : scores) sum += s;
  return sum / static_cast<double>(scores.size());
}

std::vector<double> cider_scores(const EvalCorpus& corpus) {
  check_corpus(corpus);
  if (corpus.size() < 2) throw UsageError("CIDEr-D needs at least two images for document frequencies");
  constexpr double kSigma = 6.0;

  std::map<std::string, double> df;
  std::vector<std::vector<std::array<NgramCounts, kMaxOrder>>> ref_counts;
  for (const auto& item : corpus) {
    std::set<std::string> seen;
    auto& counts = ref_counts.emplace_back();
    for (const auto& ref : item.references) {
      counts.push_back(count_ngrams(ref));
      for (const auto& order : counts.back()) {
        for (const auto& entry : order) seen.insert(entry.first);
      }
    }
    for (const auto& gram : seen) df[gram] += 1.0;
  }
  const double log_n = std::log(static_cast<double>(corpus.size()));

  struct Vec {
    std::array<std::map<std::string, double>, kMaxOrder> weights;
    std::array<double, kMaxOrder> norm{};
    int length = 0;  // bigram count, as in the reference toolkit
  };
  const auto to_vec = [&](const std::array<NgramCounts, kMaxOrder>& counts) {
    Vec v;
    for (int k = 0; k < kMaxOrder; ++k) {
      for (const auto& [gram, tf] : counts[k]) {
        auto it = df.find(gram);
        const double idf = log_n - std::log(std::max(1.0, it == df.end() ? 0.0 : it->second));
        const double w = tf * idf;
        v.weights[k][gram] = w;
        v.norm[k] += w * w;
        if (k == 1) v.length += tf;
      }
      v.norm[k] = std::sqrt(v.norm[k]);
    }
    return v;
  };

  std::vector<double> scores;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const Vec hyp = to_vec(count_ngrams(corpus[i].hypothesis));
    std::array<double, kMaxOrder> total{};
    for (const auto& counts : ref_counts[i]) {
      const Vec ref = to_vec(counts);
      const double delta = static_cast<double>(hyp.length - ref.length);
      const double penalty = std::exp(-(delta * delta) / (2.0 * kSigma * kSigma));
      for (int k = 0; k < kMaxOrder; ++k) {
        double dot = 0.0;
        for (const auto& [gram, w] : hyp.weights[k]) {
          auto it = ref.weights[k].find(gram);
          if (it != ref.weights[k].end()) dot += std::min(w, it->second) * it->second;
        }
        if (hyp.norm[k] != 0.0 && ref.norm[k] != 0.0) dot /= hyp.norm[k] * ref.norm[k];
        total[k] += dot * penalty;
      }
    }
    double mean = 0.0;
    for (double t : total) mean += t;
    mean /= kMaxOrder;
    scores.push_back(10.0 * mean / static_cast<double>(ref_counts[i].size()));
  }
  return scores;
}

double cider(const EvalCorpus& corpus) {
  const auto scores = cider_scores(corpus);
  double sum = 0.0;
  for (double s : scores) sum += s;
  return sum / static_cast<double>(scores.size());
}

double vocab_usage(std::span<const Tokens> hypotheses, const Vocabulary& vocab) {
  if (vocab.size() <= kSpecialTokenCount) throw UsageError("vocabulary has no content tokens");
  std::set<std::string> used;
  for (const auto& h : hypotheses) {
    for (const auto& token : h) {
      if (vocab.contains(token) && !is_special(vocab.id(token))) used.insert(token);
    }
  }
  return 100.0 * static_cast<double>(used.size()) / static_cast<double>(vocab.size() - kSpecialTokenCount);
}

MetricReport evaluate(const EvalCorpus& corpus, const Vocabulary& vocab) {
  MetricReport report;
  report.bleu = bleu_all(corpus);
  report.rouge_l = rouge_l(corpus);
  report.cider = cider(corpus);
  std::vector<Tokens> hyps;
  for (const auto& item : corpus) hyps.push_back(item.hypothesis);
  report.vocab_usage_percent = vocab_usage(hyps, vocab);
  return report;
}

void write_report(const std::filesystem::path& path, const MetricReport& report) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FileError("cannot write report " + path.string());
  for (int k = 0; k < 4; ++k) out << "bleu" << k + 1 << '\t' << fixed6(report.bleu[k]) << '\n';
  out << "rouge_l\t" << fixed6(report.rouge_l) << '\n';
  out << "cider\t" << fixed6(report.cider) << '\n';
  out << "vocab_usage\t" << fixed6(report.vocab_usage_percent) << '\n';
  if (!out) throw FileError("failed writing report " + path.string());
}

MetricReport read_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FileError("cannot open report " + path.string());
  std::map<std::string, double> values;
  std::string line;
  for (int number = 1; std::getline(in, line); ++number) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    try {
      if (tab == std::string::npos) throw std::invalid_argument("no tab");
      values[line.substr(0, tab)] = std::stod(line.substr(tab + 1));
    } catch (const std::logic_error&) {
      throw FormatError(path.string() + ":" + std::to_string(number) + ": expected 'metric<TAB>value'");
    }
  }
  const auto get = [&](const std::string& key) {
    auto it = values.find(key);
    if (it == values.end()) throw FormatError(path.string() + ": missing metric " + key);
    return it->second;
  };
  MetricReport report;
  for (int k = 0; k < 4; ++k) report.bleu[k] = get("bleu" + std::to_string(k + 1));
  report.rouge_l = get("rouge_l");
  report.cider = get("cider");
  report.vocab_usage_percent = get("vocab_usage");
  return report;
}

}  // namespace capgen
