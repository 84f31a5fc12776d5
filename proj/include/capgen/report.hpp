#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "capgen/captioner.hpp"
#include "capgen/metrics.hpp"

namespace capgen {

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
  std::size_t n = 0;
};

MeanStd mean_std(std::span<const double> values);

// "0.460 (0.01)": mean to three decimals, std to two.
std::string format_mean_std(const MeanStd& value);

// One trained run found in a grid directory.
struct GridRun {
  Architecture architecture = Architecture::merge;
  std::size_t layer_size = 0;
  std::size_t vocab_size = 0;
  std::uint64_t seed = 0;
  std::filesystem::path checkpoint;
  std::optional<MetricReport> metrics;  // absent until evaluated
};

// Default file names derived from a checkpoint path.
std::filesystem::path hypothesis_path_for(const std::filesystem::path& checkpoint);
std::filesystem::path metrics_path_for(const std::filesystem::path& checkpoint);

// Every run listed in any manifest.tsv below `grid_dir`, with its metrics
// file if present. Cells are keyed by the checkpoint's config.
std::vector<GridRun> scan_grid(const std::filesystem::path& grid_dir);

struct RenderedReport {
  std::string text;
  std::string csv;
};

// Side-by-side layout: one row per (layer, vocab) with merge and inject side by
// side. Table A holds %Vocab, CIDEr, METEOR (not computed) and ROUGE-L;
// table B holds BLEU-1..4. The better mean of each pair is marked '*'.
RenderedReport render_report(const std::vector<GridRun>& runs);

}  // namespace capgen
