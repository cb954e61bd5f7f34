#pragma once

#include <string>
#include <vector>

namespace sqz::app {

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

struct Panel {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<Series> series;
  // Fixed axis ranges; when lo == hi the range is taken from the data.
  double x_min = 0.0, x_max = 0.0;
  double y_min = 0.0, y_max = 0.0;
};

// Grid of line charts, `columns` panels per row.
std::string render_svg(const std::string& title, const std::vector<Panel>& panels, int columns = 2);

// Round tick positions covering [lo, hi].
std::vector<double> nice_ticks(double lo, double hi, int target = 5);

}  // namespace sqz::app
