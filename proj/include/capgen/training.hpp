#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <vector>

#include "capgen/captioner.hpp"
#include "capgen/data.hpp"
#include "capgen/nn.hpp"

namespace capgen {

struct EpochRecord {
  int epoch = 0;            // 1-based
  double train_loss = 0.0;  // mean per-caption sum cross-entropy accumulated over the epoch's updates
  double val_loss = 0.0;    // validator value after the epoch
};

template <typename Real>
struct TrainState {
  int epochs = 0;  // completed epochs
  int best_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::vector<Tensor<Real>> best_parameters;  // in CaptionModel::parameters() order
  std::vector<EpochRecord> history;
};

struct TrainOptions {
  std::size_t batch_size = 50;
  int max_epochs = 100;
  // Stop after the first epoch whose validation loss exceeds the previous
  // one, once at least `min_epochs` epochs are done, and return the best
  // epoch's parameters. When disabled, every epoch up to the cap runs and
  // the last parameters are returned.
  bool early_stopping = true;
  int min_epochs = 2;
  // Stop as soon as an epoch's train loss falls below this; 0 disables.
  double target_train_loss = 0.0;
  nn::AdamConfig adam;
};

// Called after every epoch with the current model; returns the value early
// stopping compares.
template <typename Real>
using Validator = std::function<double(const CaptionModel<Real>&)>;

using EpochCallback = std::function<void(const EpochRecord&)>;

// Sum cross-entropy over every caption of `images`; parameters untouched.
template <typename Real>
double validate(const CaptionModel<Real>& model, const std::vector<ImageEntry>& images, const Vocabulary& vocab,
                std::size_t batch_size = 50);

template <typename Real>
struct TrainResult {
  CaptionModel<Real> model;
  TrainState<Real> state;
};

// Trains a fresh model built from `config` and `seed` on data.train. The
// default validator is validate() over data.val.
template <typename Real>
TrainResult<Real> train(ModelConfig config, const DatasetSplit& data, const Vocabulary& vocab, std::uint64_t seed,
                        const TrainOptions& options = {}, Validator<Real> validator = {},
                        const EpochCallback& on_epoch = {});

// ---------------------------------------------------------------------------
// Multi-run experiments.

struct RunSpec {
  ModelConfig config;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::filesystem::path out_dir;
  TrainOptions options;
};

struct RunRecord {
  std::uint64_t seed = 0;
  double best_val_loss = 0.0;
  int epochs = 0;
  std::filesystem::path checkpoint;

  friend bool operator==(const RunRecord&, const RunRecord&) = default;
};

// "<arch>_x<layer>_t<threshold>_seed<seed>.ckpt"
std::string checkpoint_name(const ModelConfig& config, std::uint64_t seed);

// One train() per seed. Each finished run writes its checkpoint and rewrites
// out_dir/manifest.tsv, so a failing run leaves earlier runs recorded.
template <typename Real>
std::vector<RunRecord> run_experiment(const RunSpec& spec, const DatasetSplit& data, const Vocabulary& vocab,
                                      const EpochCallback& on_epoch = {});

// Lines "seed<TAB>best_val_loss<TAB>epochs<TAB>checkpoint_path".
void write_manifest(const std::filesystem::path& path, const std::vector<RunRecord>& runs);
std::vector<RunRecord> read_manifest(const std::filesystem::path& path);

}  // namespace capgen
