#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "capgen/training.hpp"

using namespace capgen;

namespace capgen {
void PrintTo(Architecture arch, std::ostream* os) { *os << to_string(arch); }
}  // namespace capgen

namespace {

ModelConfig small_config(Architecture arch, std::size_t layer = 8) {
  ModelConfig c;
  c.architecture = arch;
  c.layer_size = layer;
  return c;
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("capgen_training_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST(Validate, ZeroModelIsUniform) {
  auto data = synth_corpus(16, 10, 3);
  auto vocab = build_vocab(data.train, 1);
  ModelConfig c = small_config(Architecture::merge);
  c.vocab_size = vocab.size();
  c.image_size = data.feature_dim;
  CaptionModel<double> zero(c);
  double expected = 0;
  for (const auto& image : data.val) {
    for (const auto& cap : image.captions) expected += static_cast<double>(cap.tokens.size() + 1) * std::log(vocab.size());
  }
  EXPECT_NEAR(validate(zero, data.val, vocab), expected, 1e-9);
}

TEST(Validate, PureAndMatchesPerCaptionLoss) {
  auto data = synth_corpus(16, 10, 3);
  auto vocab = build_vocab(data.train, 1);
  ModelConfig c = small_config(Architecture::inject);
  c.vocab_size = vocab.size();
  c.image_size = data.feature_dim;
  auto model = build_model<double>(c, 5);
  const double a = validate(model, data.val, vocab);
  const double b = validate(model, data.val, vocab, 3);
  EXPECT_EQ(a, validate(model, data.val, vocab));
  double direct = 0;
  for (const auto& image : data.val) {
    for (const auto& cap : image.captions) direct += model.caption_loss(image.feature, encode_caption(cap.tokens, vocab));
  }
  EXPECT_NEAR(a, direct, 1e-9);
  EXPECT_NEAR(b, direct, 1e-9);
}

TEST(Train, ScriptedValidationStopsAfterFirstIncrease) {
  auto data = synth_corpus(16, 10, 3);
  auto vocab = build_vocab(data.train, 1);
  const std::vector<double> script{3.0, 2.5, 2.6, 2.0, 1.0};
  std::vector<std::vector<Tensor<double>>> seen;
  int calls = 0;
  Validator<double> stub = [&](const CaptionModel<double>& m) {
    std::vector<Tensor<double>> values;
    for (const auto* p : m.parameters()) values.push_back(p->value);
    seen.push_back(values);
    return script[static_cast<std::size_t>(calls++)];
  };
  auto result = train<double>(small_config(Architecture::merge), data, vocab, 7, {}, stub);
  EXPECT_EQ(calls, 3);
  EXPECT_EQ(result.state.epochs, 3);
  EXPECT_EQ(result.state.best_epoch, 2);
  EXPECT_EQ(result.state.best_val_loss, 2.5);
  ASSERT_EQ(result.state.history.size(), 3u);
  auto params = result.model.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) EXPECT_EQ(params[k]->value, seen[1][k]);
  EXPECT_FALSE(params[0]->value == seen[2][0]);
}

TEST(Train, NoStopBeforeTwoEpochs) {
  auto data = synth_corpus(16, 10, 3);
  auto vocab = build_vocab(data.train, 1);
  const std::vector<double> script{1.0, 2.0, 0.5};
  int calls = 0;
  Validator<double> stub = [&](const CaptionModel<double>&) { return script[static_cast<std::size_t>(calls++)]; };
  auto result = train<double>(small_config(Architecture::merge), data, vocab, 7, {}, stub);
  // Epoch 2 is worse than epoch 1: stop there, keep epoch 1.
  EXPECT_EQ(result.state.epochs, 2);
  EXPECT_EQ(result.state.best_epoch, 1);
}

TEST(Train, BestLossIsHistoryMinimum) {
  auto data = synth_corpus(24, 10, 4);
  auto vocab = build_vocab(data.train, 1);
  TrainOptions options;
  options.batch_size = 10;
  options.max_epochs = 8;
  auto result = train<double>(small_config(Architecture::inject), data, vocab, 2, options);
  double best = INFINITY;
  for (const auto& r : result.state.history) best = std::min(best, r.val_loss);
  EXPECT_EQ(result.state.best_val_loss, best);
  // The returned parameters achieve it.
  EXPECT_NEAR(validate(result.model, data.val, vocab, options.batch_size), best, 1e-9);
}

TEST(Train, ValidationDecreasesAfterOneEpoch) {
  auto data = synth_corpus(40, 10, 5);
  auto vocab = build_vocab(data.train, 1);
  auto config = small_config(Architecture::merge, 16);
  config.vocab_size = vocab.size();
  config.image_size = data.feature_dim;
  const double before = validate(build_model<double>(config, 3), data.val, vocab);
  TrainOptions options;
  options.max_epochs = 1;
  options.batch_size = 5;
  auto result = train<double>(config, data, vocab, 3, options);
  EXPECT_LT(result.state.history[0].val_loss, before);
}

TEST(Train, DeterministicCheckpoints) {
  auto data = synth_corpus(16, 10, 3);
  auto vocab = build_vocab(data.train, 1);
  TrainOptions options;
  options.max_epochs = 3;
  options.batch_size = 7;
  const auto dir = scratch_dir("determinism");
  for (const char* name : {"a.ckpt", "b.ckpt"}) {
    auto result = train<float>(small_config(Architecture::merge), data, vocab, 11, options);
    save_checkpoint(dir / name, result.model);
  }
  auto other = train<float>(small_config(Architecture::merge), data, vocab, 12, options);
  save_checkpoint(dir / "c.ckpt", other.model);
  EXPECT_EQ(file_bytes(dir / "a.ckpt"), file_bytes(dir / "b.ckpt"));
  EXPECT_NE(file_bytes(dir / "a.ckpt"), file_bytes(dir / "c.ckpt"));
}

TEST(Train, HeldOutCaptionsNeverTouchGradients) {
  auto data = synth_corpus(16, 10, 3);
  auto vocab = build_vocab(data.train, 1);
  auto noisy = data;
  for (auto* split : {&noisy.val, &noisy.test}) {
    for (auto& image : *split) {
      for (auto& cap : image.captions) cap.tokens = {"noise", "noise", "zzz"};
    }
  }
  TrainOptions options;
  options.early_stopping = false;
  options.max_epochs = 4;
  options.batch_size = 9;
  auto a = train<double>(small_config(Architecture::inject), data, vocab, 1, options);
  auto b = train<double>(small_config(Architecture::inject), noisy, vocab, 1, options);
  auto pa = a.model.parameters();
  auto pb = b.model.parameters();
  for (std::size_t k = 0; k < pa.size(); ++k) EXPECT_EQ(pa[k]->value, pb[k]->value);
}

TEST(Train, DivergenceReportsEpochAndBatch) {
  auto data = synth_corpus(16, 10, 3);
  auto vocab = build_vocab(data.train, 1);
  TrainOptions options;
  options.adam.learning_rate = INFINITY;
  options.batch_size = 10;
  try {
    train<double>(small_config(Architecture::merge), data, vocab, 1, options);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.epoch(), 1);
    EXPECT_EQ(e.batch(), 2);
  }
}

TEST(Train, Errors) {
  auto data = synth_corpus(16, 10, 3);
  auto vocab = build_vocab(data.train, 1);
  TrainOptions options;
  options.max_epochs = 0;
  EXPECT_THROW(train<double>(small_config(Architecture::merge), data, vocab, 1, options), UsageError);
  DatasetSplit empty;
  EXPECT_THROW(train<double>(small_config(Architecture::merge), empty, vocab, 1), UsageError);
}

class Overfit : public ::testing::TestWithParam<Architecture> {};

TEST_P(Overfit, ReachesTargetWithNearMonotoneLoss) {
  auto data = synth_corpus(8, 12, 1);
  auto vocab = build_vocab(data.train, 1);
  TrainOptions options;
  options.early_stopping = false;
  options.max_epochs = 200;
  options.batch_size = 1;
  options.target_train_loss = 0.05;
  auto result = train<float>(small_config(GetParam(), 16), data, vocab, 1, options);
  const double final_loss = validate(result.model, data.train, vocab) / static_cast<double>(caption_count(data.train));
  EXPECT_LT(final_loss, 0.05) << "after " << result.state.epochs << " epochs";
  int increases = 0;
  const auto& h = result.state.history;
  for (std::size_t e = 2; e < h.size(); ++e) {
    if (h[e].train_loss > h[e - 1].train_loss) {
      ++increases;
      EXPECT_LT(h[e].train_loss, 1.05 * h[e - 1].train_loss);
    }
  }
  EXPECT_LE(increases, 1);
}

INSTANTIATE_TEST_SUITE_P(Train, Overfit, ::testing::Values(Architecture::merge, Architecture::inject),
                         [](const auto& info) { return to_string(info.param); });

TEST(Experiment, ThreeSeedsThreeCheckpointsAndManifest) {
  auto data = synth_corpus(16, 10, 3);
  auto vocab = build_vocab(data.train, 1);
  RunSpec spec;
  spec.config = small_config(Architecture::inject);
  spec.seeds = {4, 5, 6};
  spec.out_dir = scratch_dir("experiment");
  spec.options.max_epochs = 2;
  spec.options.batch_size = 10;
  auto runs = run_experiment<float>(spec, data, vocab);
  ASSERT_EQ(runs.size(), 3u);
  EXPECT_NE(file_bytes(runs[0].checkpoint), file_bytes(runs[1].checkpoint));
  EXPECT_NE(file_bytes(runs[1].checkpoint), file_bytes(runs[2].checkpoint));
  auto manifest = read_manifest(spec.out_dir / "manifest.tsv");
  EXPECT_EQ(manifest, runs);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(manifest[k].seed, spec.seeds[k]);
    EXPECT_GT(manifest[k].epochs, 0);
    EXPECT_EQ(read_checkpoint_config(manifest[k].checkpoint).seed, spec.seeds[k]);
  }
  spec.seeds = {1, 1, 2};
  EXPECT_THROW(run_experiment<float>(spec, data, vocab), UsageError);
}

TEST(Experiment, ManifestErrors) {
  const auto dir = scratch_dir("manifest");
  EXPECT_THROW(read_manifest(dir / "none.tsv"), FileError);
  std::ofstream(dir / "bad.tsv") << "1\t2.5\n";
  EXPECT_THROW(read_manifest(dir / "bad.tsv"), FormatError);
}
