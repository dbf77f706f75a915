// SVG line charts: one line per input series with a shaded +-1 std band
// across the replicate groups inside that series.
#pragma once

#include <string>
#include <vector>

namespace offrl::plot {

struct PlotSpec {
  /// CSV paths, optionally written "label=path".
  std::vector<std::string> inputs;
  std::string x_column = "step";
  std::string y_column = "normalized_score";
  /// Rows sharing a value here form one replicate (e.g. one seed).
  std::string group_by = "seed";
  /// Trailing moving-average window applied to each replicate.
  std::size_t smoothing = 1;
  std::string output;
  std::string title;
};

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> mean;
  std::vector<double> std;
  std::size_t replicates = 0;
};

/// Rows with an empty y cell are skipped. Throws ConfigError naming any
/// missing column.
std::vector<Series> compute_series(const PlotSpec& spec);
std::string render_svg(const std::vector<Series>& series, const PlotSpec& spec);
/// compute_series + render_svg, written to spec.output.
void write_plot(const PlotSpec& spec);

}  // namespace offrl::plot
