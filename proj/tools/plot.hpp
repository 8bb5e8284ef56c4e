#pragma once

#include <string>
#include <vector>

namespace fieldctl {

struct Series {
  std::string label;
  std::vector<double> x, y;
  /// Optional symmetric error bars, same length as y.
  std::vector<double> err;
  /// Draw markers only (no connecting line).
  bool points_only = false;
};

struct LineChart {
  std::string title, x_label, y_label;
  double x_min = 0, x_max = 1, y_min = 0, y_max = 1;
  bool log_x = false;
  std::vector<Series> series;
  /// Category names placed at x = 0, 1, ... instead of numeric ticks.
  std::vector<std::string> categories;
};

/// Self-contained SVG. NaN points are skipped.
std::string render_svg(const LineChart& c);

}  // namespace fieldctl
