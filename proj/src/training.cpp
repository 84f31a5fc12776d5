#include "capgen/training.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "capgen/errors.hpp"
#include "rng.hpp"

namespace capgen {

namespace {

std::string shortest(double value) {
  char buffer[64];
  auto [end, ec] = std::to_chars(buffer, buffer + sizeof buffer, value);
  return std::string(buffer, end);
}

template <typename Real>
std::vector<Tensor<Real>> snapshot(const CaptionModel<Real>& model) {
  std::vector<Tensor<Real>> values;
  for (const auto* p : model.parameters()) values.push_back(p->value);
  return values;
}

template <typename Real>
void restore(CaptionModel<Real>& model, const std::vector<Tensor<Real>>& values) {
  auto params = model.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) params[k]->value = values[k];
}

}  // namespace

template <typename Real>
double validate(const CaptionModel<Real>& model, const std::vector<ImageEntry>& images, const Vocabulary& vocab,
                std::size_t batch_size) {
  double total = 0.0;
  for (const auto& batch : make_ordered_batches(images, vocab, batch_size)) {
    total += static_cast<double>(model.batch_loss(batch, nullptr)->value.data()[0]);
  }
  return total;
}

template <typename Real>
TrainResult<Real> train(ModelConfig config, const DatasetSplit& data, const Vocabulary& vocab, std::uint64_t seed,
                        const TrainOptions& options, Validator<Real> validator, const EpochCallback& on_epoch) {
  if (options.max_epochs < 1) throw UsageError("max_epochs must be at least 1");
  if (options.min_epochs < 1) throw UsageError("min_epochs must be at least 1");
  if (data.train.empty()) throw UsageError("training split is empty");
  config.seed = seed;
  config.vocab_size = vocab.size();
  config.min_token_frequency = vocab.threshold();
  config.precision = precision_of<Real>();
  if (data.feature_dim != 0) config.image_size = data.feature_dim;
  config.validate();

  if (!validator) {
    validator = [&data, &vocab, &options](const CaptionModel<Real>& m) {
      return validate(m, data.val, vocab, options.batch_size);
    };
  }

  TrainResult<Real> result{build_model<Real>(config, seed), {}};
  auto& model = result.model;
  auto& state = result.state;
  auto params = model.parameters();
  const double captions = static_cast<double>(caption_count(data.train));
  long long step = 0;

  for (int epoch = 1; epoch <= options.max_epochs; ++epoch) {
    const auto batches = make_batches(data.train, vocab, options.batch_size, rng::mix(seed, epoch));
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      nn::Tape<Real> tape;
      auto loss = model.batch_loss(batches[b], &tape);
      const double value = static_cast<double>(loss->value.data()[0]);
      if (!std::isfinite(value)) {
        throw DivergenceError("non-finite training loss at epoch " + std::to_string(epoch) + ", batch " +
                                  std::to_string(b + 1),
                              epoch, static_cast<long long>(b + 1));
      }
      epoch_loss += value;
      tape.backward(loss);
      tape.flush(params);
      nn::adam_step<Real>(params, ++step, options.adam);
    }

    const double val = validator(model);
    if (!std::isfinite(val)) {
      throw DivergenceError("non-finite validation loss after epoch " + std::to_string(epoch), epoch, 0);
    }
    const EpochRecord record{epoch, epoch_loss / captions, val};
    const double previous = state.history.empty() ? 0.0 : state.history.back().val_loss;
    state.history.push_back(record);
    state.epochs = epoch;
    if (val < state.best_val_loss) {
      state.best_val_loss = val;
      state.best_epoch = epoch;
      if (options.early_stopping) state.best_parameters = snapshot(model);
    }
    if (on_epoch) on_epoch(record);

    if (options.early_stopping && epoch >= options.min_epochs && epoch > 1 && val > previous) break;
    if (options.target_train_loss > 0.0 && record.train_loss < options.target_train_loss) break;
  }

  if (options.early_stopping) {
    restore(model, state.best_parameters);
  } else {
    state.best_parameters = snapshot(model);
  }
  return result;
}

std::string checkpoint_name(const ModelConfig& config, std::uint64_t seed) {
  return to_string(config.architecture) + "_x" + std::to_string(config.layer_size) + "_t" +
         std::to_string(config.min_token_frequency) + "_seed" + std::to_string(seed) + ".ckpt";
}

template <typename Real>
std::vector<RunRecord> run_experiment(const RunSpec& spec, const DatasetSplit& data, const Vocabulary& vocab,
                                      const EpochCallback& on_epoch) {
  if (spec.seeds.empty()) throw UsageError("an experiment needs at least one seed");
  if (std::set<std::uint64_t>(spec.seeds.begin(), spec.seeds.end()).size() != spec.seeds.size()) {
    throw UsageError("experiment seeds must be distinct");
  }
  std::filesystem::create_directories(spec.out_dir);
  const auto manifest = spec.out_dir / "manifest.tsv";
  std::vector<RunRecord> runs;
  for (auto seed : spec.seeds) {
    auto result = train<Real>(spec.config, data, vocab, seed, spec.options, {}, on_epoch);
    RunRecord run{seed, result.state.best_val_loss, result.state.epochs,
                  spec.out_dir / checkpoint_name(result.model.config(), seed)};
    save_checkpoint(run.checkpoint, result.model);
    runs.push_back(run);
    write_manifest(manifest, runs);
  }
  return runs;
}

void write_manifest(const std::filesystem::path& path, const std::vector<RunRecord>& runs) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FileError("cannot write manifest " + path.string());
  for (const auto& run : runs) {
    out << run.seed << '\t' << shortest(run.best_val_loss) << '\t' << run.epochs << '\t' << run.checkpoint.string()
        << '\n';
  }
  if (!out) throw FileError("failed writing manifest " + path.string());
}

std::vector<RunRecord> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FileError("cannot open manifest " + path.string());
  std::vector<RunRecord> runs;
  std::string line;
  for (int number = 1; std::getline(in, line); ++number) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string seed, loss, epochs, checkpoint;
    if (!std::getline(fields, seed, '\t') || !std::getline(fields, loss, '\t') ||
        !std::getline(fields, epochs, '\t') || !std::getline(fields, checkpoint)) {
      throw FormatError(path.string() + ":" + std::to_string(number) + ": expected four tab-separated fields");
    }
    try {
      runs.push_back({std::stoull(seed), std::stod(loss), std::stoi(epochs), checkpoint});
    } catch (const std::logic_error&) {
      throw FormatError(path.string() + ":" + std::to_string(number) + ": malformed number");
    }
  }
  return runs;
}

template double validate<float>(const CaptionModel<float>&, const std::vector<ImageEntry>&, const Vocabulary&,
                                std::size_t);
template double validate<double>(const CaptionModel<double>&, const std::vector<ImageEntry>&, const Vocabulary&,
                                 std::size_t);
template TrainResult<float> train<float>(ModelConfig, const DatasetSplit&, const Vocabulary&, std::uint64_t,
                                         const TrainOptions&, Validator<float>, const EpochCallback&);
template TrainResult<double> train<double>(ModelConfig, const DatasetSplit&, const Vocabulary&, std::uint64_t,
                                           const TrainOptions&, Validator<double>, const EpochCallback&);
template std::vector<RunRecord> run_experiment<float>(const RunSpec&, const DatasetSplit&, const Vocabulary&,
                                                      const EpochCallback&);
template std::vector<RunRecord> run_experiment<double>(const RunSpec&, const DatasetSplit&, const Vocabulary&,
                                                       const EpochCallback&);

}  // namespace capgen
