#include "capgen/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <random>

#include <json.hpp>

#include "binary_io.hpp"
#include "rng.hpp"

namespace capgen {
namespace {

constexpr char kFeatureMagic[] = "FEAT0001";

void append_split(DatasetSplit& data, const std::string& split, ImageEntry entry, const std::string& source) {
  if (split == "train" || split == "restval") {
    data.train.push_back(std::move(entry));
  } else if (split == "val") {
    data.val.push_back(std::move(entry));
  } else if (split == "test") {
    data.test.push_back(std::move(entry));
  } else {
    throw FormatError(source + ": unknown split '" + split + "' for image " + entry.id);
  }
}

}  // namespace

const std::vector<ImageEntry>& DatasetSplit::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  if (name == "test") return test;
  throw UsageError("unknown split '" + name + "' (expected train, val or test)");
}

TokenId Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnknownToken : it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw VocabularyError("token index " + std::to_string(id) + " outside vocabulary of size " +
                              std::to_string(tokens_.size()),
                          id);
  }
  return tokens_[static_cast<std::size_t>(id)];
}

void Vocabulary::add(const std::string& token) {
  index_.emplace(token, static_cast<TokenId>(tokens_.size()));
  tokens_.push_back(token);
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FileError("cannot write vocabulary " + path.string());
  out << "#threshold " << threshold_ << '\n';
  for (const auto& t : tokens_) out << t << '\n';
  if (!out) throw FileError("failed writing vocabulary " + path.string());
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError("cannot open vocabulary " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("#threshold ", 0) != 0) {
    throw FormatError(path.string() + ": missing '#threshold' header");
  }
  Vocabulary vocab;
  vocab.threshold_ = std::stoi(line.substr(11));
  while (std::getline(in, line)) {
    if (vocab.index_.count(line)) throw FormatError(path.string() + ": duplicate token '" + line + "'");
    vocab.add(line);
  }
  if (vocab.size() < kSpecialTokenCount || vocab.tokens_[kUnknownToken] != kUnknownText ||
      vocab.tokens_[kStartToken] != kStartText || vocab.tokens_[kEndToken] != kEndText) {
    throw FormatError(path.string() + ": special tokens missing from the head of the vocabulary");
  }
  return vocab;
}

Vocabulary build_vocab(std::span<const std::vector<std::string>> captions, int threshold) {
  if (threshold < 1) throw UsageError("vocabulary threshold must be >= 1, got " + std::to_string(threshold));
  if (captions.empty()) throw UsageError("cannot build a vocabulary from an empty corpus");
  std::map<std::string, long long> counts;
  for (const auto& caption : captions) {
    for (const auto& token : caption) ++counts[token];
  }
  std::vector<std::pair<std::string, long long>> kept;
  for (auto& [token, n] : counts) {
    if (n < threshold) continue;
    if (token == kUnknownText || token == kStartText || token == kEndText) continue;
    kept.emplace_back(token, n);
  }
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });

  Vocabulary vocab;
  vocab.threshold_ = threshold;
  vocab.add(std::string(kUnknownText));
  vocab.add(std::string(kStartText));
  vocab.add(std::string(kEndText));
  for (const auto& [token, n] : kept) vocab.add(token);
  return vocab;
}

Vocabulary build_vocab(const std::vector<ImageEntry>& train, int threshold) {
  std::vector<std::vector<std::string>> captions;
  for (const auto& image : train) {
    for (const auto& c : image.captions) captions.push_back(c.tokens);
  }
  return build_vocab(captions, threshold);
}

std::vector<TokenId> encode_caption(std::span<const std::string> tokens, const Vocabulary& vocab) {
  std::vector<TokenId> ids;
  ids.reserve(tokens.size() + 2);
  ids.push_back(kStartToken);
  for (const auto& t : tokens) ids.push_back(vocab.id(t));
  ids.push_back(kEndToken);
  return ids;
}

std::vector<std::string> decode_caption(std::span<const TokenId> ids, const Vocabulary& vocab) {
  std::vector<std::string> tokens;
  for (TokenId id : ids) {
    if (id == kStartToken || id == kEndToken) continue;
    tokens.push_back(vocab.token(id));
  }
  return tokens;
}

std::vector<float> normalize_feature(std::span<const float> vector) {
  double norm = 0.0;
  for (float x : vector) norm += static_cast<double>(x) * x;
  norm = std::sqrt(norm);
  if (!(norm > 0.0) || !std::isfinite(norm)) throw NumericError("cannot normalize a zero or non-finite vector");
  std::vector<float> out(vector.size());
  for (std::size_t k = 0; k < vector.size(); ++k) out[k] = static_cast<float>(vector[k] / norm);
  return out;
}

DatasetSplit load_captions(const std::filesystem::path& caption_file) {
  std::ifstream in(caption_file, std::ios::binary);
  if (!in) throw FileError("cannot open caption file " + caption_file.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(caption_file.string() + ": " + e.what());
  }
  const std::string source = caption_file.string();
  if (!doc.is_object() || !doc.contains("images") || !doc["images"].is_array()) {
    throw FormatError(source + ": expected a top-level \"images\" array");
  }
  DatasetSplit data;
  try {
    for (const auto& img : doc["images"]) {
      ImageEntry entry;
      entry.id = img.at("filename").get<std::string>();
      std::size_t n = 0;
      for (const auto& sentence : img.at("sentences")) {
        CaptionRecord record;
        record.image_id = entry.id;
        record.caption_id = sentence.contains("sentid") ? sentence["sentid"].dump() : entry.id + "#" + std::to_string(n);
        record.tokens = sentence.at("tokens").get<std::vector<std::string>>();
        ++n;
        if (record.tokens.empty()) continue;  // records must carry at least one token
        entry.captions.push_back(std::move(record));
      }
      append_split(data, img.at("split").get<std::string>(), std::move(entry), source);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(source + ": " + e.what());
  }
  return data;
}

void write_captions(const std::filesystem::path& caption_file, const DatasetSplit& data) {
  nlohmann::json images = nlohmann::json::array();
  long long sentid = 0;
  long long imgid = 0;
  for (const char* split : {"train", "val", "test"}) {
    for (const auto& image : data.split(split)) {
      nlohmann::json sentences = nlohmann::json::array();
      for (const auto& c : image.captions) {
        std::string raw;
        for (const auto& t : c.tokens) raw += (raw.empty() ? "" : " ") + t;
        sentences.push_back({{"tokens", c.tokens}, {"raw", raw}, {"imgid", imgid}, {"sentid", sentid++}});
      }
      images.push_back({{"filename", image.id}, {"imgid", imgid++}, {"split", split}, {"sentences", sentences}});
    }
  }
  std::ofstream out(caption_file, std::ios::binary | std::ios::trunc);
  if (!out) throw FileError("cannot write caption file " + caption_file.string());
  out << nlohmann::json{{"images", images}}.dump() << '\n';
}

std::filesystem::path feature_index_path(const std::filesystem::path& feature_file) {
  auto p = feature_file;
  p += ".index";
  return p;
}

FeatureTable load_features(const std::filesystem::path& feature_file) {
  std::ifstream in(feature_file, std::ios::binary);
  if (!in) throw FileError("cannot open feature file " + feature_file.string());
  const std::string where = feature_file.string() + ": ";
  if (binary::read_bytes(in, 8, where + "magic") != kFeatureMagic) throw FormatError(where + "bad magic");
  const std::uint32_t count = binary::read_u32(in, where + "row count");
  const std::uint32_t dim = binary::read_u32(in, where + "dimension");
  const auto expected = 16ULL + 4ULL * count * dim;
  const auto actual = std::filesystem::file_size(feature_file);
  if (actual != expected) {
    throw FormatError(where + "size " + std::to_string(actual) + " bytes, header implies " + std::to_string(expected));
  }
  FeatureTable table;
  table.dim = dim;
  table.values.resize(static_cast<std::size_t>(count) * dim);
  for (auto& v : table.values) v = binary::read_f32(in, where + "feature values");

  const auto index_path = feature_index_path(feature_file);
  std::ifstream index(index_path, std::ios::binary);
  if (!index) throw FileError("cannot open feature index " + index_path.string());
  std::string line;
  while (std::getline(index, line)) table.names.push_back(line);
  if (table.names.size() != count) {
    throw FormatError(index_path.string() + ": " + std::to_string(table.names.size()) + " names for " +
                      std::to_string(count) + " feature rows");
  }
  return table;
}

void write_features(const std::filesystem::path& feature_file, const FeatureTable& table) {
  if (table.values.size() != table.names.size() * table.dim) {
    throw DimensionError("feature table holds " + std::to_string(table.values.size()) + " values for " +
                         std::to_string(table.names.size()) + " rows of " + std::to_string(table.dim));
  }
  {
    std::ofstream out(feature_file, std::ios::binary | std::ios::trunc);
    if (!out) throw FileError("cannot write feature file " + feature_file.string());
    out.write(kFeatureMagic, 8);
    binary::write_u32(out, static_cast<std::uint32_t>(table.names.size()));
    binary::write_u32(out, static_cast<std::uint32_t>(table.dim));
    for (float v : table.values) binary::write_f32(out, v);
    if (!out) throw FileError("failed writing feature file " + feature_file.string());
  }
  std::ofstream index(feature_index_path(feature_file), std::ios::binary | std::ios::trunc);
  if (!index) throw FileError("cannot write feature index for " + feature_file.string());
  for (const auto& name : table.names) index << name << '\n';
}

DatasetSplit load_dataset(const std::filesystem::path& caption_file, const std::filesystem::path& feature_file,
                          bool normalize) {
  DatasetSplit data = load_captions(caption_file);
  const FeatureTable features = load_features(feature_file);
  std::unordered_map<std::string, std::size_t> row_of;
  for (std::size_t r = 0; r < features.names.size(); ++r) row_of.emplace(features.names[r], r);
  data.feature_dim = features.dim;
  for (auto* split : {&data.train, &data.val, &data.test}) {
    for (auto& image : *split) {
      auto it = row_of.find(image.id);
      if (it == row_of.end()) throw IntegrityError("image " + image.id + " has no feature row");
      auto row = features.row(it->second);
      image.feature = normalize ? normalize_feature(row) : std::vector<float>(row.begin(), row.end());
    }
  }
  return data;
}

std::size_t caption_count(const std::vector<ImageEntry>& images) {
  std::size_t n = 0;
  for (const auto& image : images) n += image.captions.size();
  return n;
}

namespace {

using CaptionOrder = std::vector<std::pair<std::size_t, std::size_t>>;

CaptionOrder caption_order(const std::vector<ImageEntry>& images) {
  CaptionOrder order;
  for (std::size_t i = 0; i < images.size(); ++i) {
    for (std::size_t c = 0; c < images[i].captions.size(); ++c) order.emplace_back(i, c);
  }
  return order;
}

std::vector<Minibatch> batch_in_order(const std::vector<ImageEntry>& images, const Vocabulary& vocab,
                                      std::size_t batch_size, const CaptionOrder& order) {
  if (batch_size == 0) throw UsageError("batch size must be positive");
  std::vector<Minibatch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t rows = std::min(batch_size, order.size() - start);
    std::vector<std::vector<TokenId>> encoded(rows);
    Minibatch batch;
    batch.size = rows;
    batch.feature_dim = images[order[start].first].feature.size();
    for (std::size_t r = 0; r < rows; ++r) {
      const auto& [img, cap] = order[start + r];
      encoded[r] = encode_caption(images[img].captions[cap].tokens, vocab);
      batch.max_length = std::max(batch.max_length, encoded[r].size());
      const auto& feature = images[img].feature;
      if (feature.size() != batch.feature_dim) {
        throw IntegrityError("image " + images[img].id + " has feature size " + std::to_string(feature.size()) +
                             ", expected " + std::to_string(batch.feature_dim));
      }
      batch.features.insert(batch.features.end(), feature.begin(), feature.end());
    }
    batch.tokens.assign(rows * batch.max_length, kEndToken);
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy(encoded[r].begin(), encoded[r].end(), batch.tokens.begin() + static_cast<std::ptrdiff_t>(r * batch.max_length));
      batch.lengths.push_back(encoded[r].size());
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

}  // namespace

std::vector<Minibatch> make_batches(const std::vector<ImageEntry>& images, const Vocabulary& vocab,
                                    std::size_t batch_size, std::uint64_t seed) {
  auto order = caption_order(images);
  std::mt19937_64 gen(seed);
  rng::shuffle(order, gen);
  return batch_in_order(images, vocab, batch_size, order);
}

std::vector<Minibatch> make_ordered_batches(const std::vector<ImageEntry>& images, const Vocabulary& vocab,
                                            std::size_t batch_size) {
  return batch_in_order(images, vocab, batch_size, caption_order(images));
}

DatasetSplit synth_corpus(std::size_t n_images, std::size_t vocab_size, std::uint64_t seed, std::size_t feature_dim) {
  if (n_images < 2) throw UsageError("synthetic corpus needs at least 2 images");
  if (vocab_size < 4) throw UsageError("synthetic corpus needs at least 4 content words");
  if (feature_dim == 0) throw UsageError("synthetic feature dimension must be positive");

  static const std::array<std::vector<std::string>, 4> kLexicon{{
      {"red", "blue", "green", "small", "large", "young", "old", "brown", "black", "white", "striped", "spotted"},
      {"dog", "cat", "child", "man", "woman", "bird", "horse", "boy", "girl", "bike", "ball", "car"},
      {"runs", "jumps", "sits", "plays", "swims", "walks", "climbs", "rides", "sleeps", "stands", "waits", "eats"},
      {"park", "beach", "street", "field", "water", "snow", "grass", "road", "lake", "forest", "room", "hill"},
  }};
  // Slot word lists, sizes summing to vocab_size.
  std::array<std::vector<std::string>, 4> slots;
  for (std::size_t k = 0; k < 4; ++k) {
    const std::size_t n = vocab_size / 4 + (k < vocab_size % 4 ? 1 : 0);
    for (std::size_t w = 0; w < n; ++w) {
      const auto& base = kLexicon[k];
      slots[k].push_back(w < base.size() ? base[w] : base[w % base.size()] + std::to_string(w / base.size()));
    }
  }

  std::mt19937_64 gen(seed);
  DatasetSplit data;
  data.feature_dim = feature_dim;
  const std::size_t held = std::max<std::size_t>(1, n_images / 8);
  const std::size_t n_test = n_images >= 3 ? held : 0;
  const std::size_t n_val = held;
  const std::size_t n_train = n_images - n_val - n_test;

  for (std::size_t i = 0; i < n_images; ++i) {
    ImageEntry image;
    char name[32];
    std::snprintf(name, sizeof name, "synth_%04zu.jpg", i);
    image.id = name;
    std::vector<float> raw(feature_dim);
    for (auto& x : raw) x = static_cast<float>(rng::normal(gen));
    image.feature = normalize_feature(raw);

    // Slot k reads sign bits starting at component k * bits_per_slot.
    std::vector<std::string> tokens;
    std::size_t cursor = 0;
    for (std::size_t k = 0; k < 4; ++k) {
      const std::size_t n = slots[k].size();
      std::size_t bits = 0;
      while ((std::size_t{1} << bits) < n) ++bits;
      std::size_t code = 0;
      for (std::size_t b = 0; b < bits; ++b, ++cursor) {
        if (image.feature[cursor % feature_dim] > 0.0f) code |= std::size_t{1} << b;
      }
      const bool drop_adjective = k == 0 && image.feature[feature_dim - 1] < 0.0f;
      if (!drop_adjective) tokens.push_back(slots[k][code % n]);
    }
    for (int c = 0; c < 5; ++c) image.captions.push_back({image.id, image.id + "#" + std::to_string(c), tokens});

    if (i < n_train) {
      data.train.push_back(std::move(image));
    } else if (i < n_train + n_val) {
      data.val.push_back(std::move(image));
    } else {
      data.test.push_back(std::move(image));
    }
  }
  return data;
}

}  // namespace capgen
