#pragma once

#include <string>
#include <vector>

namespace mdlab {

// Minimal built-in line-chart renderer: polylines + axes, bit-stable output.
struct SvgSeries {
  std::string label;
  std::vector<std::pair<double, double>> points;
};

std::string render_line_chart(const std::string& title, const std::string& x_label,
                              const std::string& y_label, const std::vector<SvgSeries>& series);

void save_svg(const std::string& path, const std::string& svg);

}  // namespace mdlab
