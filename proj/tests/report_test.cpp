#include <gtest/gtest.h>

#include <filesystem>

#include "capgen/report.hpp"
#include "capgen/training.hpp"

using namespace capgen;

namespace {

MetricReport with_cider(double cider) {
  MetricReport r{{0.6, 0.4, 0.3, 0.2}, 0.44, cider, 14.0};
  return r;
}

GridRun run(Architecture arch, std::uint64_t seed, std::optional<MetricReport> m) {
  return {arch, 256, 2542, seed, "x.ckpt", m};
}

std::string line_with(const std::string& text, const std::string& needle) {
  const auto at = text.find(needle);
  if (at == std::string::npos) return "";
  const auto begin = text.rfind('\n', at) + 1;
  return text.substr(begin, text.find('\n', at) - begin);
}

}  // namespace

TEST(MeanStd, HandComputation) {
  const std::vector<double> v{0.45, 0.46, 0.47};
  const auto s = mean_std(v);
  EXPECT_NEAR(s.mean, 0.46, 1e-15);
  EXPECT_NEAR(s.std, std::sqrt(2.0 / 3.0) * 0.01, 1e-15);
  EXPECT_EQ(format_mean_std(s), "0.460 (0.01)");
  const std::vector<double> one{0.3};
  EXPECT_EQ(format_mean_std(mean_std(one)), "0.300 (0.00)");
  EXPECT_EQ(mean_std(std::span<const double>{}).n, 0u);
}

TEST(Render, CellsAndBetterMarker) {
  std::vector<GridRun> runs{run(Architecture::merge, 1, with_cider(0.45)), run(Architecture::merge, 2, with_cider(0.46)),
                            run(Architecture::merge, 3, with_cider(0.47)), run(Architecture::inject, 1, with_cider(0.44)),
                            run(Architecture::inject, 2, with_cider(0.45)), run(Architecture::inject, 3, with_cider(0.46))};
  const auto r = render_report(runs);
  const auto row = line_with(r.text, "2542");
  EXPECT_NE(row.find("*0.460 (0.01)"), std::string::npos) << row;
  EXPECT_NE(row.find(" 0.450 (0.01)"), std::string::npos) << row;
  EXPECT_NE(r.csv.find("Table A,256,2542,cider,0.460000,0.008165,3,3,0.450000,0.008165,3,3,merge"), std::string::npos)
      << r.csv;
  // Equal means: neither side is marked.
  EXPECT_NE(r.csv.find("Table A,256,2542,rouge_l,0.440000,0.000000,3,3,0.440000,0.000000,3,3,\n"), std::string::npos);
}

TEST(Render, ColumnOrderFollowsTableOne) {
  const auto r = render_report({run(Architecture::merge, 1, with_cider(0.4))});
  const auto header = line_with(r.text, "%Vocabulary");
  const auto a = header.find("%Vocabulary"), b = header.find("CIDEr"), c = header.find("METEOR"),
             d = header.find("ROUGE-L");
  ASSERT_NE(d, std::string::npos);
  EXPECT_LT(a, b);
  EXPECT_LT(b, c);
  EXPECT_LT(c, d);
  EXPECT_EQ(header.find("BLEU"), std::string::npos);
  const auto bleu = line_with(r.text, "BLEU-1");
  EXPECT_LT(bleu.find("BLEU-1"), bleu.find("BLEU-4"));
  EXPECT_NE(r.csv.find(",meteor,,,0,1,,,0,0,"), std::string::npos);
}

TEST(Render, SingleRunAndIncompleteCellsAreFlagged) {
  const auto single = render_report({run(Architecture::merge, 1, with_cider(0.4))});
  EXPECT_NE(line_with(single.text, "2542").find("0.400 (0.00) [n=1]"), std::string::npos);
  const auto partial = render_report({run(Architecture::merge, 1, with_cider(0.4)), run(Architecture::merge, 2, {}),
                                      run(Architecture::inject, 1, {})});
  const auto row = line_with(partial.text, "2542");
  EXPECT_NE(row.find("0.400 (0.00) [1/2]"), std::string::npos) << row;
  EXPECT_NE(row.find("- [0/1]"), std::string::npos) << row;
}

TEST(ScanGrid, ReadsManifestsCheckpointsAndMetrics) {
  const auto dir = std::filesystem::temp_directory_path() / "capgen_grid";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir / "cell");
  ModelConfig config;
  config.layer_size = 4;
  config.vocab_size = 9;
  config.image_size = 3;
  std::vector<RunRecord> records;
  for (std::uint64_t seed : {1, 2}) {
    const auto ckpt = dir / "cell" / checkpoint_name(config, seed);
    save_checkpoint(ckpt, build_model<float>(config, seed));
    records.push_back({seed, 1.5, 3, ckpt});
  }
  write_manifest(dir / "cell" / "manifest.tsv", records);
  write_report(metrics_path_for(records[0].checkpoint), with_cider(0.5));
  const auto runs = scan_grid(dir);
  ASSERT_EQ(runs.size(), 2u);
  EXPECT_EQ(runs[0].layer_size, 4u);
  EXPECT_EQ(runs[0].vocab_size, 9u);
  EXPECT_TRUE(runs[0].metrics.has_value());
  EXPECT_FALSE(runs[1].metrics.has_value());
  EXPECT_NEAR(runs[0].metrics->cider, 0.5, 1e-9);
  EXPECT_THROW(scan_grid(dir / "missing"), FileError);
}
