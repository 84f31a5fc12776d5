// capgen: dataset preparation, training, decoding, evaluation and reporting
// for the inject and merge caption generators.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <iostream>
#include <string>
#include <vector>

#include "capgen/captioner.hpp"
#include "capgen/data.hpp"
#include "capgen/decoding.hpp"
#include "capgen/errors.hpp"
#include "capgen/metrics.hpp"
#include "capgen/report.hpp"
#include "capgen/training.hpp"

namespace fs = std::filesystem;
using namespace capgen;

namespace {

constexpr const char* kCaptionFile = "captions.json";
constexpr const char* kFeatureFile = "features.bin";

fs::path vocab_file(const fs::path& dataset, int threshold) {
  return dataset / ("vocab_" + std::to_string(threshold) + ".txt");
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FileError("cannot write " + path.string());
  out << text;
  if (!out) throw FileError("failed writing " + path.string());
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  fs::path out;
  std::size_t images = 100;
  std::size_t words = 12;
  std::size_t dim = 16;
  std::uint64_t seed = 0;
};

void cmd_synth(const SynthArgs& a) {
  const auto data = synth_corpus(a.images, a.words, a.seed, a.dim);
  fs::create_directories(a.out);
  write_captions(a.out / kCaptionFile, data);
  FeatureTable table;
  table.dim = data.feature_dim;
  for (const char* split : {"train", "val", "test"}) {
    for (const auto& image : data.split(split)) {
      table.names.push_back(image.id);
      table.values.insert(table.values.end(), image.feature.begin(), image.feature.end());
    }
  }
  write_features(a.out / kFeatureFile, table);
  std::cout << "wrote " << data.train.size() << "/" << data.val.size() << "/" << data.test.size()
            << " synthetic images to " << a.out.string() << '\n';
}

// ---------------------------------------------------------------------------

struct PrepArgs {
  fs::path dataset;
  fs::path captions;
  fs::path features;
  fs::path out;
  std::vector<int> thresholds{3, 4, 5};
};

fs::path find_caption_file(const fs::path& dir) {
  if (fs::exists(dir / kCaptionFile)) return dir / kCaptionFile;
  std::vector<fs::path> found;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    if (name.rfind("dataset_", 0) == 0 && entry.path().extension() == ".json") found.push_back(entry.path());
  }
  if (found.size() != 1) {
    throw FileError("expected " + (dir / kCaptionFile).string() + " or exactly one dataset_*.json in " + dir.string());
  }
  return found.front();
}

void cmd_prep(const PrepArgs& a) {
  const auto captions = a.captions.empty() ? find_caption_file(a.dataset) : a.captions;
  const auto features = a.features.empty() ? a.dataset / kFeatureFile : a.features;
  const auto data = load_dataset(captions, features, true);

  fs::create_directories(a.out);
  write_captions(a.out / kCaptionFile, data);
  FeatureTable table;
  table.dim = data.feature_dim;
  for (const char* split : {"train", "val", "test"}) {
    for (const auto& image : data.split(split)) {
      table.names.push_back(image.id);
      table.values.insert(table.values.end(), image.feature.begin(), image.feature.end());
    }
  }
  write_features(a.out / kFeatureFile, table);

  std::string summary = "threshold\tvocab_size\tcontent_types\n";
  for (int t : a.thresholds) {
    const auto vocab = build_vocab(data.train, t);
    vocab.save(vocab_file(a.out, t));
    summary += std::to_string(t) + '\t' + std::to_string(vocab.size()) + '\t' +
               std::to_string(vocab.size() - kSpecialTokenCount) + '\n';
  }
  write_text(a.out / "vocab_sizes.tsv", summary);
  std::cout << "splits (images): train " << data.train.size() << ", val " << data.val.size() << ", test "
            << data.test.size() << "; feature dim " << data.feature_dim << '\n'
            << summary;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  fs::path dataset;
  fs::path out;
  std::string arch = "merge";
  std::size_t layer = 128;
  int min_freq = 3;
  std::uint64_t seed = 1;
  std::size_t runs = 3;
  std::string precision = "32";
  std::size_t batch = 50;
  int max_epochs = 100;
};

Vocabulary load_or_build_vocab(const fs::path& dataset, const DatasetSplit& data, int threshold) {
  const auto path = vocab_file(dataset, threshold);
  if (fs::exists(path)) return Vocabulary::load(path);
  return build_vocab(data.train, threshold);
}

void cmd_train(const TrainArgs& a) {
  const auto data = load_dataset(a.dataset / kCaptionFile, a.dataset / kFeatureFile, true);
  const auto vocab = load_or_build_vocab(a.dataset, data, a.min_freq);

  RunSpec spec;
  spec.config.architecture = parse_architecture(a.arch);
  spec.config.layer_size = a.layer;
  spec.config.min_token_frequency = a.min_freq;
  spec.config.precision = parse_precision(a.precision);
  spec.seeds.clear();
  for (std::size_t k = 0; k < a.runs; ++k) spec.seeds.push_back(a.seed + k);
  spec.out_dir = fs::absolute(a.out) / (a.arch + "_x" + std::to_string(a.layer) + "_t" + std::to_string(a.min_freq));
  spec.options.batch_size = a.batch;
  spec.options.max_epochs = a.max_epochs;

  std::cerr << "training " << a.arch << " x=" << a.layer << " v=" << vocab.size() << " on "
            << caption_count(data.train) << " captions; runs in " << spec.out_dir.string() << '\n';
  const EpochCallback log = [](const EpochRecord& r) {
    std::cerr << "  epoch " << r.epoch << ": train " << r.train_loss << " per caption, val " << r.val_loss << '\n';
  };
  const auto runs = spec.config.precision == Precision::f64 ? run_experiment<double>(spec, data, vocab, log)
                                                            : run_experiment<float>(spec, data, vocab, log);
  for (const auto& r : runs) {
    std::cout << r.seed << '\t' << r.best_val_loss << '\t' << r.epochs << '\t' << r.checkpoint.string() << '\n';
  }
}

// ---------------------------------------------------------------------------

struct GenerateArgs {
  std::vector<fs::path> checkpoints;
  fs::path dataset;
  std::string split = "test";
  std::size_t beam = 3;
  std::size_t max_len = 20;
  fs::path out;
};

template <typename Real>
std::vector<CaptionLine> decode_split(const fs::path& checkpoint, const std::vector<ImageEntry>& images,
                                      const Vocabulary& vocab, const GenerateArgs& a) {
  const auto model = load_checkpoint<Real>(checkpoint);
  const ModelScorer<Real> scorer(model);
  std::vector<CaptionLine> lines;
  for (const auto& image : images) {
    const auto h = beam_search(scorer, image.feature, a.beam, a.max_len);
    lines.push_back({image.id, decode_caption(h.tokens, vocab)});
  }
  return lines;
}

Vocabulary vocab_for(const fs::path& dataset, const ModelConfig& config) {
  auto vocab = Vocabulary::load(vocab_file(dataset, config.min_token_frequency));
  if (vocab.size() != config.vocab_size) {
    throw IntegrityError("vocabulary " + vocab_file(dataset, config.min_token_frequency).string() + " has " +
                         std::to_string(vocab.size()) + " entries, the model expects " +
                         std::to_string(config.vocab_size));
  }
  return vocab;
}

void cmd_generate(const GenerateArgs& a) {
  if (!a.out.empty() && a.checkpoints.size() != 1) throw UsageError("--out needs exactly one --checkpoint");
  const auto data = load_dataset(a.dataset / kCaptionFile, a.dataset / kFeatureFile, true);
  const auto& images = data.split(a.split);
  for (const auto& checkpoint : a.checkpoints) {
    const auto config = read_checkpoint_config(checkpoint);
    const auto vocab = vocab_for(a.dataset, config);
    const auto lines = config.precision == Precision::f64 ? decode_split<double>(checkpoint, images, vocab, a)
                                                          : decode_split<float>(checkpoint, images, vocab, a);
    const auto out = a.out.empty() ? hypothesis_path_for(checkpoint) : a.out;
    write_hypotheses(out, lines);
    std::cerr << "wrote " << lines.size() << " captions to " << out.string() << '\n';
  }
}

// ---------------------------------------------------------------------------

struct EvaluateArgs {
  std::vector<fs::path> hypotheses;
  fs::path dataset;
  std::string split = "test";
  fs::path checkpoint;
  int min_freq = 3;
  fs::path out;
};

fs::path metrics_path_for_hypotheses(const fs::path& hyp) {
  const auto name = hyp.filename().string();
  const std::string suffix = ".hyp.tsv";
  if (name.size() > suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) {
    return hyp.parent_path() / (name.substr(0, name.size() - suffix.size()) + ".metrics.tsv");
  }
  return hyp.parent_path() / (name + ".metrics.tsv");
}

void cmd_evaluate(const EvaluateArgs& a) {
  if (!a.out.empty() && a.hypotheses.size() != 1) throw UsageError("--out needs exactly one --hyp");
  const auto data = load_captions(a.dataset / kCaptionFile);
  const auto& images = data.split(a.split);
  for (const auto& hyp : a.hypotheses) {
    // Threshold: explicit checkpoint, else a sibling checkpoint, else --min-freq.
    int threshold = a.min_freq;
    auto checkpoint = a.checkpoint;
    if (checkpoint.empty()) {
      auto sibling = metrics_path_for_hypotheses(hyp);
      sibling.replace_extension();  // drop ".tsv"
      sibling.replace_extension(".ckpt");
      if (fs::exists(sibling)) checkpoint = sibling;
    }
    if (!checkpoint.empty()) threshold = read_checkpoint_config(checkpoint).min_token_frequency;
    const auto vocab = Vocabulary::load(vocab_file(a.dataset, threshold));

    const auto report = evaluate(make_eval_corpus(read_hypotheses(hyp), images), vocab);
    const auto out = a.out.empty() ? metrics_path_for_hypotheses(hyp) : a.out;
    write_report(out, report);
    std::ifstream written(out);
    std::cout << "# " << hyp.string() << '\n' << written.rdbuf();
  }
}

// ---------------------------------------------------------------------------

struct ReportArgs {
  fs::path grid;
  fs::path out;
};

void cmd_report(const ReportArgs& a) {
  const auto rendered = render_report(scan_grid(a.grid));
  const auto prefix = a.out.empty() ? a.grid / "report" : a.out;
  write_text(prefix.string() + ".txt", rendered.text);
  write_text(prefix.string() + ".csv", rendered.csv);
  std::cout << rendered.text;
}

// Flat "key = value" config file shared by every subcommand; keys are the
// long option names without dashes, '#' starts a comment. Values become the
// option defaults, so command-line flags still take precedence.
void add_config(CLI::App* sub) {
  static std::string path;  // consumed before parsing, see apply_config
  sub->add_option("--config", path, "flat 'key = value' file; command-line flags take precedence");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::optional<std::string> config_argument(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--config" && i + 1 < argc) return argv[i + 1];
    if (arg.rfind("--config=", 0) == 0) return arg.substr(9);
  }
  return std::nullopt;
}

void apply_config(CLI::App& app, const fs::path& file, int argc, char** argv) {
  std::ifstream in(file);
  if (!in) throw FileError("cannot read config " + file.string());
  CLI::App* sub = nullptr;
  for (int i = 1; i < argc && !sub; ++i) {
    for (auto* candidate : app.get_subcommands({})) {
      if (candidate->get_name() == argv[i]) sub = candidate;
    }
  }
  if (!sub) return;
  std::string line;
  for (int number = 1; std::getline(in, line); ++number) {
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(file.string() + ":" + std::to_string(number) + ": expected 'key = value'");
    }
    const auto key = trim(line.substr(0, eq));
    auto value = trim(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    bool known = false;
    for (const auto* other : app.get_subcommands({})) known |= other->get_option_no_throw("--" + key) != nullptr;
    if (!known) throw ConfigError(file.string() + ":" + std::to_string(number) + ": unknown key '" + key + "'");
    // Keys for other subcommands are allowed so one file can serve them all.
    if (auto* opt = sub->get_option_no_throw("--" + key); opt && key != "config") {
      opt->default_val(value);
      opt->required(false);
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Inject and merge image caption generators: prep, train, generate, evaluate, report"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth", "write a synthetic grounded dataset (captions + features)");
  synth_cmd->add_option("--out", synth.out, "output dataset directory")->required();
  synth_cmd->add_option("--images", synth.images, "number of images")->capture_default_str();
  synth_cmd->add_option("--words", synth.words, "content word types per slot")->capture_default_str();
  synth_cmd->add_option("--dim", synth.dim, "feature dimension")->capture_default_str();
  synth_cmd->add_option("--seed", synth.seed, "random seed")->capture_default_str();
  add_config(synth_cmd);

  PrepArgs prep;
  auto* prep_cmd = app.add_subcommand("prep", "normalize features and build vocabularies for a dataset");
  prep_cmd->add_option("--dataset", prep.dataset, "raw dataset directory")->required()->check(CLI::ExistingDirectory);
  prep_cmd->add_option("--captions", prep.captions, "caption JSON (default: captions.json or dataset_*.json)");
  prep_cmd->add_option("--features", prep.features, "feature file (default: <dataset>/features.bin)");
  prep_cmd->add_option("--out", prep.out, "processed dataset directory")->required();
  prep_cmd->add_option("--thresholds", prep.thresholds, "vocabulary thresholds")->capture_default_str()->delimiter(',');
  add_config(prep_cmd);

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "train seeded runs of one architecture and write a manifest");
  train_cmd->add_option("--dataset", train_args.dataset, "processed dataset directory")->required();
  train_cmd->add_option("--out", train_args.out, "grid directory")->required();
  train_cmd->add_option("--arch", train_args.arch, "architecture")->check(CLI::IsMember({"inject", "merge"}))
      ->capture_default_str();
  train_cmd->add_option("--layer", train_args.layer, "layer size x")->capture_default_str();
  train_cmd->add_option("--min-freq", train_args.min_freq, "vocabulary threshold")->capture_default_str();
  train_cmd->add_option("--seed", train_args.seed, "seed of the first run; later runs add 1")->capture_default_str();
  train_cmd->add_option("--runs", train_args.runs, "number of seeded runs")->capture_default_str()
      ->check(CLI::PositiveNumber);
  train_cmd->add_option("--precision", train_args.precision, "float width")->check(CLI::IsMember({"32", "64"}))
      ->capture_default_str();
  train_cmd->add_option("--batch", train_args.batch, "minibatch size in captions")->capture_default_str()
      ->check(CLI::PositiveNumber);
  train_cmd->add_option("--max-epochs", train_args.max_epochs, "epoch cap")->capture_default_str()
      ->check(CLI::PositiveNumber);
  add_config(train_cmd);

  GenerateArgs gen;
  auto* gen_cmd = app.add_subcommand("generate", "beam-search captions for a split");
  gen_cmd->add_option("--checkpoint", gen.checkpoints, "checkpoint file(s)")->required()->check(CLI::ExistingFile);
  gen_cmd->add_option("--dataset", gen.dataset, "processed dataset directory")->required();
  gen_cmd->add_option("--split", gen.split, "train, val or test")->capture_default_str();
  gen_cmd->add_option("--beam", gen.beam, "beam width")->capture_default_str()->check(CLI::PositiveNumber);
  gen_cmd->add_option("--max-len", gen.max_len, "maximum caption length in words")->capture_default_str()
      ->check(CLI::PositiveNumber);
  gen_cmd->add_option("--out", gen.out, "hypothesis file (default: <checkpoint>.hyp.tsv)");
  add_config(gen_cmd);

  EvaluateArgs eval;
  auto* eval_cmd = app.add_subcommand("evaluate", "score hypothesis files against the references");
  eval_cmd->add_option("--hyp", eval.hypotheses, "hypothesis file(s)")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--dataset", eval.dataset, "processed dataset directory")->required();
  eval_cmd->add_option("--split", eval.split, "train, val or test")->capture_default_str();
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "checkpoint whose vocabulary threshold to use");
  eval_cmd->add_option("--min-freq", eval.min_freq, "vocabulary threshold when no checkpoint is found")
      ->capture_default_str();
  eval_cmd->add_option("--out", eval.out, "metrics file (default: <hyp stem>.metrics.tsv)");
  add_config(eval_cmd);

  ReportArgs report;
  auto* report_cmd = app.add_subcommand("report", "aggregate a grid into merge vs inject tables (text and CSV)");
  report_cmd->add_option("--grid", report.grid, "grid directory")->required();
  report_cmd->add_option("--out", report.out, "output prefix (default: <grid>/report)");
  add_config(report_cmd);

  try {
    if (const auto config = config_argument(argc, argv)) apply_config(app, *config, argc, argv);
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*synth_cmd) cmd_synth(synth);
    if (*prep_cmd) cmd_prep(prep);
    if (*train_cmd) cmd_train(train_args);
    if (*gen_cmd) cmd_generate(gen);
    if (*eval_cmd) cmd_evaluate(eval);
    if (*report_cmd) cmd_report(report);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
