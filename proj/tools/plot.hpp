#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace shike::cli {

struct Series {
  std::string name;
  std::vector<double> values;
};

/// Grouped bar chart, one group per category and one bar per series.
void write_bar_chart(const std::filesystem::path& path, const std::string& title, const std::string& y_label,
                     const std::vector<std::string>& categories, const std::vector<Series>& series);

}  // namespace shike::cli
