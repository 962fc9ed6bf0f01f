// Minimal hand-rolled SVG output: labeled bar charts and polyline curves,
// enough for the evaluation report and the TTT sweep figure. No styling
// knobs beyond a fixed clean palette.
#pragma once

#include <string>
#include <utility>
#include <vector>

namespace cvcorr::svg {

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;  // (x, y)
};

// Vertical bars with value labels; y axis spans [0, y_max].
std::string bar_chart(const std::string& title, const std::vector<std::pair<std::string, double>>& bars,
                      const std::string& y_label, double y_max = 1.0);

// One polyline per series with axis ticks spanning the data range.
std::string line_chart(const std::string& title, const std::vector<Series>& series,
                       const std::string& x_label, const std::string& y_label);

void write_file(const std::string& path, const std::string& content);

}  // namespace cvcorr::svg
