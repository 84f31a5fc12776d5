#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "capgen/data.hpp"

using namespace capgen;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("capgen_data_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::vector<std::vector<std::string>> toy_captions() {
  // a:5, b:2, c:3, d:3
  return {{"a", "b", "c"}, {"a", "c", "d"}, {"a", "a", "d"}, {"a", "b", "c", "d"}};
}

// Builds a Karpathy-layout corpus with the given split sizes, five captions per image.
DatasetSplit sized_corpus(std::size_t train, std::size_t val, std::size_t test) {
  DatasetSplit d;
  d.feature_dim = 3;
  auto fill = [&](std::vector<ImageEntry>& out, std::size_t n, const std::string& tag) {
    for (std::size_t i = 0; i < n; ++i) {
      ImageEntry e;
      e.id = tag + std::to_string(i) + ".jpg";
      e.feature = {1.0f, 0.0f, 0.0f};
      for (int c = 0; c < 5; ++c) e.captions.push_back({e.id, e.id + "#" + std::to_string(c), {"w" + std::to_string(c)}});
      out.push_back(std::move(e));
    }
  };
  fill(d.train, train, "tr");
  fill(d.val, val, "va");
  fill(d.test, test, "te");
  return d;
}

FeatureTable table_for(const DatasetSplit& d, std::uint64_t seed) {
  FeatureTable t;
  t.dim = d.feature_dim;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> dist(-2.f, 2.f);
  for (const char* s : {"test", "val", "train"}) {
    for (const auto& image : d.split(s)) {
      t.names.push_back(image.id);
      for (std::size_t k = 0; k < t.dim; ++k) t.values.push_back(dist(rng));
    }
  }
  return t;
}

}  // namespace

TEST(Vocab, ThresholdSemantics) {
  const std::vector<std::vector<std::string>> caps{{"a", "a", "a", "b"}, {"a", "a", "b"}};
  auto v = build_vocab(caps, 3);
  EXPECT_EQ(v.size(), kSpecialTokenCount + 1);
  EXPECT_TRUE(v.contains("a"));
  EXPECT_FALSE(v.contains("b"));
  EXPECT_EQ(v.id("b"), kUnknownToken);
}

TEST(Vocab, ThresholdOneKeepsEverything) {
  auto caps = toy_captions();
  auto v = build_vocab(caps, 1);
  EXPECT_EQ(v.size(), kSpecialTokenCount + 4);
}

TEST(Vocab, OrderIsFrequencyThenLexicographic) {
  auto caps = toy_captions();
  auto v = build_vocab(caps, 1);
  EXPECT_EQ(v.token(0), "<unk>");
  EXPECT_EQ(v.token(1), "<beg>");
  EXPECT_EQ(v.token(2), "<end>");
  EXPECT_EQ(v.token(3), "a");
  EXPECT_EQ(v.token(4), "c");  // c and d tie at 3
  EXPECT_EQ(v.token(5), "d");
  EXPECT_EQ(v.token(6), "b");
}

TEST(Vocab, Errors) {
  std::vector<std::vector<std::string>> none;
  EXPECT_THROW(build_vocab(none, 3), UsageError);
  auto caps = toy_captions();
  EXPECT_THROW(build_vocab(caps, 0), UsageError);
  auto v = build_vocab(caps, 1);
  EXPECT_THROW(v.token(99), VocabularyError);
}

TEST(Vocab, SizeNonIncreasingInThreshold) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::vector<std::string>> caps(50);
    for (auto& c : caps) {
      for (std::size_t k = 0, n = 1 + rng() % 10; k < n; ++k) c.push_back("t" + std::to_string(rng() % 40));
    }
    std::size_t last = SIZE_MAX;
    for (int th = 1; th <= 8; ++th) {
      const std::size_t size = build_vocab(caps, th).size();
      EXPECT_LE(size, last);
      last = size;
    }
  }
}

TEST(Vocab, SaveLoadRoundTrip) {
  auto caps = toy_captions();
  auto v = build_vocab(caps, 2);
  const auto dir = scratch_dir("vocab");
  v.save(dir / "vocab.txt");
  auto loaded = Vocabulary::load(dir / "vocab.txt");
  EXPECT_EQ(loaded.tokens(), v.tokens());
  EXPECT_EQ(loaded.threshold(), 2);
}

TEST(Encode, Examples) {
  const std::vector<std::vector<std::string>> caps{{"a", "dog"}};
  auto v = build_vocab(caps, 1);
  const std::vector<std::string> in{"a", "dog"};
  EXPECT_EQ(encode_caption(in, v), (std::vector<TokenId>{kStartToken, v.id("a"), v.id("dog"), kEndToken}));
  const std::vector<std::string> oov{"zyzzyva"};
  EXPECT_EQ(encode_caption(oov, v), (std::vector<TokenId>{kStartToken, kUnknownToken, kEndToken}));
  EXPECT_EQ(encode_caption({}, v), (std::vector<TokenId>{kStartToken, kEndToken}));
}

TEST(Encode, DecodeRestoresInVocabularyTokens) {
  auto caps = toy_captions();
  auto v = build_vocab(caps, 1);
  for (const auto& c : caps) EXPECT_EQ(decode_caption(encode_caption(c, v), v), c);
}

TEST(Normalize, Examples) {
  const std::vector<float> v{3, 4};
  auto u = normalize_feature(v);
  EXPECT_NEAR(u[0], 0.6, 1e-7);
  EXPECT_NEAR(u[1], 0.8, 1e-7);
  for (const std::vector<float>& unit : {std::vector<float>{1, 0, 0}, std::vector<float>{0.5f, -0.5f, 0.5f, 0.5f}}) {
    auto same = normalize_feature(unit);
    for (std::size_t k = 0; k < unit.size(); ++k) EXPECT_NEAR(same[k], unit[k], 1e-12);
  }
  EXPECT_THROW(normalize_feature(std::vector<float>{0, 0, 0}), NumericError);
}

TEST(Normalize, UnitNormSweep) {
  std::mt19937_64 rng(2);
  std::normal_distribution<float> dist(0.f, 10.f);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<float> v(1 + rng() % 64);
    for (auto& x : v) x = dist(rng);
    auto u = normalize_feature(v);
    double n = 0;
    for (float x : u) n += static_cast<double>(x) * x;
    EXPECT_NEAR(std::sqrt(n), 1.0, 1e-6);
    // Idempotent up to float rounding.
    auto again = normalize_feature(u);
    for (std::size_t k = 0; k < u.size(); ++k) EXPECT_NEAR(again[k], u[k], 1e-7);
  }
}

TEST(Batches, CountsAndPartition) {
  auto d = sized_corpus(6000, 0, 0);
  std::vector<std::vector<std::string>> caps{{"w0", "w1"}};
  auto v = build_vocab(caps, 1);
  auto batches = make_batches(d.train, v, 50, 3);
  EXPECT_EQ(batches.size(), 600u);
  std::size_t total = 0;
  for (const auto& b : batches) {
    EXPECT_LE(b.size, 50u);
    total += b.size;
  }
  EXPECT_EQ(total, 30000u);
}

TEST(Batches, DeterministicAndEachCaptionOnce) {
  auto d = synth_corpus(40, 16, 5);
  auto v = build_vocab(d.train, 1);
  auto a = make_batches(d.train, v, 7, 11);
  auto b = make_batches(d.train, v, 7, 11);
  auto c = make_batches(d.train, v, 7, 12);
  ASSERT_EQ(a.size(), b.size());
  bool differs = false;
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a[k].tokens, b[k].tokens);
    EXPECT_EQ(a[k].features, b[k].features);
    differs |= a[k].features != c[k].features;
  }
  EXPECT_TRUE(differs);
  // Every (feature row, caption) pair appears exactly as often as in the corpus.
  std::multiset<std::vector<float>> seen;
  for (const auto& batch : a) {
    EXPECT_EQ(batch.size, batch.lengths.size());
    EXPECT_EQ(batch.tokens.size(), batch.size * batch.max_length);
    EXPECT_EQ(batch.features.size(), batch.size * batch.feature_dim);
    for (std::size_t r = 0; r < batch.size; ++r) {
      auto f = batch.feature(r);
      seen.insert(std::vector<float>(f.begin(), f.end()));
      auto cap = batch.caption(r);
      EXPECT_EQ(cap.front(), kStartToken);
      EXPECT_EQ(cap.back(), kEndToken);
      for (std::size_t t = batch.lengths[r]; t < batch.max_length; ++t) {
        EXPECT_EQ(batch.tokens[r * batch.max_length + t], kEndToken);
      }
    }
  }
  for (const auto& image : d.train) EXPECT_EQ(seen.count(image.feature), image.captions.size());
  EXPECT_THROW(make_batches(d.train, v, 0, 1), UsageError);
}

TEST(Synth, EightImages) {
  auto d = synth_corpus(8, 16, 1);
  EXPECT_EQ(d.train.size(), 6u);
  EXPECT_EQ(d.val.size(), 1u);
  EXPECT_EQ(d.test.size(), 1u);
  for (const auto* split : {&d.train, &d.val, &d.test}) {
    for (const auto& image : *split) {
      ASSERT_EQ(image.captions.size(), 5u);
      for (const auto& c : image.captions) EXPECT_EQ(c.tokens, image.captions[0].tokens);
      double n = 0;
      for (float x : image.feature) n += static_cast<double>(x) * x;
      EXPECT_NEAR(n, 1.0, 1e-6);
    }
  }
}

TEST(Synth, DeterministicAndGrounded) {
  auto a = synth_corpus(30, 12, 9);
  auto b = synth_corpus(30, 12, 9);
  ASSERT_EQ(a.train.size(), b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    EXPECT_EQ(a.train[i].feature, b.train[i].feature);
    EXPECT_EQ(a.train[i].captions[0].tokens, b.train[i].captions[0].tokens);
  }
  // Captions are a function of the feature sign pattern.
  std::set<std::vector<std::string>> distinct;
  for (const auto& image : a.train) distinct.insert(image.captions[0].tokens);
  EXPECT_GT(distinct.size(), 3u);
  EXPECT_THROW(synth_corpus(1, 12, 0), UsageError);
}

TEST(Files, CaptionAndFeatureRoundTrip) {
  const auto dir = scratch_dir("roundtrip");
  auto d = synth_corpus(10, 12, 4);
  write_captions(dir / "captions.json", d);
  FeatureTable t = table_for(d, 1);
  write_features(dir / "features.bin", t);
  EXPECT_EQ(std::filesystem::file_size(dir / "features.bin"), 16 + 4 * t.names.size() * t.dim);

  auto raw = load_dataset(dir / "captions.json", dir / "features.bin", false);
  auto norm = load_dataset(dir / "captions.json", dir / "features.bin");
  ASSERT_EQ(raw.train.size(), d.train.size());
  ASSERT_EQ(raw.val.size(), d.val.size());
  ASSERT_EQ(raw.test.size(), d.test.size());
  EXPECT_EQ(raw.feature_dim, d.feature_dim);
  for (std::size_t i = 0; i < d.train.size(); ++i) {
    EXPECT_EQ(raw.train[i].id, d.train[i].id);
    EXPECT_EQ(raw.train[i].captions[2].tokens, d.train[i].captions[2].tokens);
  }
  // Raw rows are bit-exact; normalized rows have unit norm.
  auto loaded = load_features(dir / "features.bin");
  EXPECT_EQ(loaded.values, t.values);
  EXPECT_EQ(loaded.names, t.names);
  for (const auto& image : norm.test) {
    double n = 0;
    for (float x : image.feature) n += static_cast<double>(x) * x;
    EXPECT_NEAR(n, 1.0, 1e-6);
  }
}

TEST(Files, KarpathySplitSizes) {
  const auto dir = scratch_dir("splits");
  for (auto [tr, va, te] : {std::tuple{6000u, 1000u, 1000u}, std::tuple{29000u, 1014u, 1000u}}) {
    write_captions(dir / "c.json", sized_corpus(tr, va, te));
    auto d = load_captions(dir / "c.json");
    EXPECT_EQ(d.train.size(), tr);
    EXPECT_EQ(d.val.size(), va);
    EXPECT_EQ(d.test.size(), te);
    EXPECT_EQ(d.train[17].captions.size(), 5u);
  }
}

TEST(Files, Errors) {
  const auto dir = scratch_dir("errors");
  EXPECT_THROW(load_captions(dir / "missing.json"), FileError);
  EXPECT_THROW(load_dataset(dir / "missing.json", dir / "missing.bin"), FileError);

  {
    std::ofstream(dir / "bad.json") << "{\"images\": [ {\"split\": \"train\"";
  }
  EXPECT_THROW(load_captions(dir / "bad.json"), FormatError);
  {
    std::ofstream(dir / "weird.json") << R"({"images": [{"split": "holdout", "filename": "x.jpg", "sentences": []}]})";
  }
  EXPECT_THROW(load_captions(dir / "weird.json"), FormatError);

  auto d = synth_corpus(6, 8, 2);
  write_captions(dir / "captions.json", d);
  FeatureTable t = table_for(d, 3);
  write_features(dir / "features.bin", t);
  // Odd-sized feature file.
  std::filesystem::resize_file(dir / "features.bin", std::filesystem::file_size(dir / "features.bin") - 2);
  EXPECT_THROW(load_dataset(dir / "captions.json", dir / "features.bin"), FormatError);

  // Image without a feature row.
  t.names.pop_back();
  t.values.resize(t.names.size() * t.dim);
  write_features(dir / "features.bin", t);
  EXPECT_THROW(load_dataset(dir / "captions.json", dir / "features.bin"), IntegrityError);
}
