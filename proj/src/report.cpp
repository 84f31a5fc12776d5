#include "capgen/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <sstream>

#include "capgen/errors.hpp"
#include "capgen/training.hpp"

namespace capgen {

namespace {

std::string fixed(double value, int decimals) {
  char buffer[64];
  std::snprintf(buffer, sizeof buffer, "%.*f", decimals, value);
  return buffer;
}

struct MetricColumn {
  std::string title;
  std::string key;
  std::function<double(const MetricReport&)> get;  // empty when not computed
};

const std::vector<MetricColumn>& table_a() {
  static const std::vector<MetricColumn> columns{
      {"%Vocabulary", "vocab_usage", [](const MetricReport& r) { return r.vocab_usage_percent; }},
      {"CIDEr", "cider", [](const MetricReport& r) { return r.cider; }},
      {"METEOR", "meteor", {}},
      {"ROUGE-L", "rouge_l", [](const MetricReport& r) { return r.rouge_l; }},
  };
  return columns;
}

const std::vector<MetricColumn>& table_b() {
  static const std::vector<MetricColumn> columns{
      {"BLEU-1", "bleu1", [](const MetricReport& r) { return r.bleu[0]; }},
      {"BLEU-2", "bleu2", [](const MetricReport& r) { return r.bleu[1]; }},
      {"BLEU-3", "bleu3", [](const MetricReport& r) { return r.bleu[2]; }},
      {"BLEU-4", "bleu4", [](const MetricReport& r) { return r.bleu[3]; }},
  };
  return columns;
}

struct Side {
  std::size_t listed = 0;
  std::vector<const MetricReport*> evaluated;
};

using CellKey = std::pair<std::size_t, std::size_t>;  // layer, vocab
struct Cell {
  Side merge;
  Side inject;
};

struct Summary {
  std::optional<MeanStd> value;
  std::size_t listed = 0;
};

Summary summarize(const Side& side, const MetricColumn& column) {
  Summary s;
  s.listed = side.listed;
  if (!column.get || side.evaluated.empty()) return s;
  std::vector<double> values;
  for (const auto* r : side.evaluated) values.push_back(column.get(*r));
  s.value = mean_std(values);
  return s;
}

std::string cell_text(const Summary& s, bool better, bool computed) {
  if (!computed) return "-";
  if (!s.value) return s.listed ? "- [0/" + std::to_string(s.listed) + "]" : "-";
  std::string text = (better ? "*" : "") + format_mean_std(*s.value);
  if (s.value->n < s.listed) {
    text += " [" + std::to_string(s.value->n) + "/" + std::to_string(s.listed) + "]";
  } else if (s.value->n == 1) {
    text += " [n=1]";
  }
  return text;
}

// 1 when merge is better, -1 when inject is, 0 on ties or missing values.
int better_side(const Summary& merge, const Summary& inject) {
  if (!merge.value || !inject.value || merge.value->mean == inject.value->mean) return 0;
  return merge.value->mean > inject.value->mean ? 1 : -1;
}

std::string pad(const std::string& s, std::size_t width) {
  return s.size() >= width ? s : s + std::string(width - s.size(), ' ');
}

void render_table(const std::string& name, const std::string& caption, const std::vector<MetricColumn>& columns,
                  const std::map<CellKey, Cell>& cells, std::ostringstream& text, std::ostringstream& csv) {
  std::vector<std::vector<std::string>> rows;
  rows.push_back({"", ""});
  rows.push_back({"Layer", "Vocab."});
  for (const auto& c : columns) {
    rows[0].insert(rows[0].end(), {c.title, ""});
    rows[1].insert(rows[1].end(), {"Merge", "Inject"});
  }
  for (const auto& [key, cell] : cells) {
    std::vector<std::string> row{std::to_string(key.first), std::to_string(key.second)};
    for (const auto& column : columns) {
      const auto m = summarize(cell.merge, column);
      const auto i = summarize(cell.inject, column);
      const int better = better_side(m, i);
      const bool computed = static_cast<bool>(column.get);
      row.push_back(cell_text(m, better > 0, computed));
      row.push_back(cell_text(i, better < 0, computed));
      csv << name << ',' << key.first << ',' << key.second << ',' << column.key;
      for (const auto* s : {&m, &i}) {
        if (s->value) {
          csv << ',' << fixed(s->value->mean, 6) << ',' << fixed(s->value->std, 6) << ',' << s->value->n;
        } else {
          csv << ",,,0";
        }
        csv << ',' << s->listed;
      }
      csv << ',' << (better > 0 ? "merge" : better < 0 ? "inject" : "") << '\n';
    }
    rows.push_back(std::move(row));
  }

  std::vector<std::size_t> width(rows[1].size(), 0);
  for (std::size_t r = 1; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) width[c] = std::max(width[c], rows[r][c].size());
  }
  // Group titles span their Merge and Inject columns.
  for (std::size_t c = 2; c + 1 < width.size(); c += 2) {
    const std::size_t span = width[c] + 2 + width[c + 1];
    if (rows[0][c].size() > span) width[c + 1] += rows[0][c].size() - span;
  }

  text << name << ": " << caption << '\n';
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::string line;
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      if (r == 0 && c >= 2 && c % 2 == 0) {
        line += pad(rows[r][c], width[c] + 2 + width[c + 1]);
        ++c;
      } else {
        line += pad(rows[r][c], width[c]);
      }
      if (c + 1 < rows[r].size()) line += c % 2 == 1 ? "  |  " : "  ";
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    text << line << '\n';
  }
  text << '\n';
}

}  // namespace

MeanStd mean_std(std::span<const double> values) {
  MeanStd out;
  out.n = values.size();
  if (values.empty()) return out;
  double sum = 0.0;
  for (double v : values) sum += v;
  out.mean = sum / static_cast<double>(values.size());
  double sq = 0.0;
  for (double v : values) sq += (v - out.mean) * (v - out.mean);
  out.std = std::sqrt(sq / static_cast<double>(values.size()));
  return out;
}

std::string format_mean_std(const MeanStd& value) {
  return fixed(value.mean, 3) + " (" + fixed(value.std, 2) + ")";
}

std::filesystem::path hypothesis_path_for(const std::filesystem::path& checkpoint) {
  auto p = checkpoint;
  return p.replace_extension(".hyp.tsv");
}

std::filesystem::path metrics_path_for(const std::filesystem::path& checkpoint) {
  auto p = checkpoint;
  return p.replace_extension(".metrics.tsv");
}

std::vector<GridRun> scan_grid(const std::filesystem::path& grid_dir) {
  if (!std::filesystem::is_directory(grid_dir)) throw FileError("not a directory: " + grid_dir.string());
  std::vector<std::filesystem::path> manifests;
  for (const auto& entry : std::filesystem::recursive_directory_iterator(grid_dir)) {
    if (entry.is_regular_file() && entry.path().filename() == "manifest.tsv") manifests.push_back(entry.path());
  }
  std::sort(manifests.begin(), manifests.end());

  std::vector<GridRun> runs;
  for (const auto& manifest : manifests) {
    for (const auto& record : read_manifest(manifest)) {
      auto checkpoint = record.checkpoint;
      if (!std::filesystem::exists(checkpoint)) checkpoint = manifest.parent_path() / checkpoint.filename();
      if (!std::filesystem::exists(checkpoint)) continue;
      const auto config = read_checkpoint_config(checkpoint);
      GridRun run{config.architecture, config.layer_size, config.vocab_size, record.seed, checkpoint, std::nullopt};
      if (std::filesystem::exists(metrics_path_for(checkpoint))) run.metrics = read_report(metrics_path_for(checkpoint));
      runs.push_back(std::move(run));
    }
  }
  return runs;
}

RenderedReport render_report(const std::vector<GridRun>& runs) {
  std::map<CellKey, Cell> cells;
  for (const auto& run : runs) {
    auto& cell = cells[{run.layer_size, run.vocab_size}];
    auto& side = run.architecture == Architecture::merge ? cell.merge : cell.inject;
    ++side.listed;
    if (run.metrics) side.evaluated.push_back(&*run.metrics);
  }

  std::ostringstream text, csv;
  csv << "table,layer,vocab,metric,merge_mean,merge_std,merge_runs,merge_listed,inject_mean,inject_std,inject_runs,"
         "inject_listed,better\n";
  render_table("Table A", "% of vocabulary used, CIDEr, METEOR and ROUGE-L", table_a(), cells, text, csv);
  render_table("Table B", "BLEU-n", table_b(), cells, text, csv);
  text << "Cells: mean (population std) over runs. * marks the better architecture.\n"
          "[k/m]: only k of m listed runs evaluated. [n=1]: single run, std shown as 0.00.\n"
          "METEOR is not computed.\n";
  return {text.str(), csv.str()};
}

}  // namespace capgen
