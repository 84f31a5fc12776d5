#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "capgen/batch.hpp"
#include "capgen/nn.hpp"
#include "capgen/tokens.hpp"

namespace capgen {

struct CaptionRecord {
  std::string image_id;
  std::string caption_id;
  std::vector<std::string> tokens;
};

struct ImageEntry {
  std::string id;  // the distribution's filename
  std::vector<float> feature;
  std::vector<CaptionRecord> captions;
};

struct DatasetSplit {
  std::vector<ImageEntry> train;
  std::vector<ImageEntry> val;
  std::vector<ImageEntry> test;
  std::size_t feature_dim = 0;

  const std::vector<ImageEntry>& split(const std::string& name) const;
};

// Token <-> index mapping. Indices 0..2 are the specials (unknown, start,
// end); the remaining tokens follow by descending training frequency, ties
// broken lexicographically.
class Vocabulary {
 public:
  Vocabulary() = default;

  std::size_t size() const noexcept { return tokens_.size(); }
  int threshold() const noexcept { return threshold_; }

  // Unknown token for anything not in the vocabulary.
  TokenId id(const std::string& token) const;
  bool contains(const std::string& token) const { return index_.count(token) > 0; }
  const std::string& token(TokenId id) const;
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  // One token per line in index order, after a "#threshold N" header.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  friend Vocabulary build_vocab(std::span<const std::vector<std::string>> captions, int threshold);

 private:
  void add(const std::string& token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  int threshold_ = 0;
};

// Keeps tokens whose frequency over `captions` is at least `threshold`.
Vocabulary build_vocab(std::span<const std::vector<std::string>> captions, int threshold);
Vocabulary build_vocab(const std::vector<ImageEntry>& train, int threshold);

// [start] + ids (out-of-vocabulary -> unknown) + [end]
std::vector<TokenId> encode_caption(std::span<const std::string> tokens, const Vocabulary& vocab);

// Inverse of encode_caption: drops start/end and maps ids back to tokens.
std::vector<std::string> decode_caption(std::span<const TokenId> ids, const Vocabulary& vocab);

std::vector<float> normalize_feature(std::span<const float> vector);

// ---------------------------------------------------------------------------
// Files.

// Karpathy caption layout: {"images": [{"split", "filename", "sentences":
// [{"tokens": [...]}, ...]}, ...]}. Features are left empty.
DatasetSplit load_captions(const std::filesystem::path& caption_file);

void write_captions(const std::filesystem::path& caption_file, const DatasetSplit& data);

struct FeatureTable {
  std::vector<std::string> names;
  std::size_t dim = 0;
  std::vector<float> values;  // names.size() x dim

  std::span<const float> row(std::size_t r) const {
    return std::span<const float>(values).subspan(r * dim, dim);
  }
};

// "FEAT0001", u32 count, u32 dim, count*dim f32 (little-endian), with the
// row names in a sidecar index file (one filename per line).
std::filesystem::path feature_index_path(const std::filesystem::path& feature_file);
FeatureTable load_features(const std::filesystem::path& feature_file);
void write_features(const std::filesystem::path& feature_file, const FeatureTable& table);

// Captions joined with their feature rows; rows are unit-normalized unless
// `normalize` is false.
DatasetSplit load_dataset(const std::filesystem::path& caption_file, const std::filesystem::path& feature_file,
                          bool normalize = true);

// ---------------------------------------------------------------------------
// Batching.

// Every caption of `images` exactly once, shuffled by `seed`, in blocks of
// `batch_size` (the last block may be smaller).
std::vector<Minibatch> make_batches(const std::vector<ImageEntry>& images, const Vocabulary& vocab,
                                    std::size_t batch_size, std::uint64_t seed);

// Same blocks without shuffling: image order, then caption order.
std::vector<Minibatch> make_ordered_batches(const std::vector<ImageEntry>& images, const Vocabulary& vocab,
                                            std::size_t batch_size);

// Number of captions across `images`.
std::size_t caption_count(const std::vector<ImageEntry>& images);

// ---------------------------------------------------------------------------
// Synthetic grounded corpus: random unit features, five identical captions
// per image drawn from a template grammar whose word choices are fixed by the
// signs of feature components. `vocab_size` counts content word types.
DatasetSplit synth_corpus(std::size_t n_images, std::size_t vocab_size, std::uint64_t seed,
                          std::size_t feature_dim = 16);

}  // namespace capgen
