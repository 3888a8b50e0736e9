#pragma once

#include <string>
#include <vector>

namespace boxmask {

struct Series {
    std::string name;
    std::vector<double> values;
};

/// Grouped bar chart; `categories` label the groups, one bar per series.
std::string svg_bar_chart(const std::string& title, const std::vector<std::string>& categories,
                          const std::vector<Series>& series, const std::string& y_label);

/// Line chart; every series shares `x`.
std::string svg_line_chart(const std::string& title, const std::vector<double>& x, const std::vector<Series>& series,
                           const std::string& x_label, const std::string& y_label);

} // namespace boxmask
