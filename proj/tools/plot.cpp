#include "plot.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

#include "shike/errors.hpp"

namespace shike::cli {
namespace {

const char* kPalette[] = {"#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#edc948", "#b07aa1"};

std::string escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      default: out += ch;
    }
  }
  return out;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

}  // namespace

void write_bar_chart(const std::filesystem::path& path, const std::string& title, const std::string& y_label,
                     const std::vector<std::string>& categories, const std::vector<Series>& series) {
  const double left = 70, right = 20, top = 40, bottom = 90, plot_h = 300;
  const double group_w = std::max(40.0, 18.0 * static_cast<double>(series.size()) + 16.0);
  const double plot_w = group_w * static_cast<double>(std::max<std::size_t>(categories.size(), 1));
  const double width = left + plot_w + right + 140, height = top + plot_h + bottom;

  double ymax = 0.0;
  for (const auto& s : series)
    for (double v : s.values) ymax = std::max(ymax, v);
  if (ymax <= 0.0) ymax = 1.0;

  std::ofstream os(path);
  if (!os) throw FormatError("cannot open for writing: " + path.string());
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(width) << "\" height=\"" << num(height)
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << num(left) << "\" y=\"20\" font-size=\"14\">" << escape(title) << "</text>\n";
  os << "<text transform=\"translate(16," << num(top + plot_h / 2) << ") rotate(-90)\" text-anchor=\"middle\">"
     << escape(y_label) << "</text>\n";

  for (int t = 0; t <= 4; ++t) {
    const double v = ymax * t / 4.0, y = top + plot_h - plot_h * t / 4.0;
    os << "<line x1=\"" << num(left) << "\" x2=\"" << num(left + plot_w) << "\" y1=\"" << num(y) << "\" y2=\""
       << num(y) << "\" stroke=\"#ddd\"/>\n";
    os << "<text x=\"" << num(left - 6) << "\" y=\"" << num(y + 4) << "\" text-anchor=\"end\">" << num(v)
       << "</text>\n";
  }

  const double bar_w = (group_w - 16.0) / static_cast<double>(std::max<std::size_t>(series.size(), 1));
  for (std::size_t c = 0; c < categories.size(); ++c) {
    const double gx = left + group_w * static_cast<double>(c) + 8.0;
    for (std::size_t s = 0; s < series.size(); ++s) {
      if (c >= series[s].values.size()) continue;
      const double v = std::max(0.0, series[s].values[c]);
      const double h = plot_h * v / ymax;
      os << "<rect x=\"" << num(gx + bar_w * static_cast<double>(s)) << "\" y=\"" << num(top + plot_h - h)
         << "\" width=\"" << num(bar_w) << "\" height=\"" << num(h) << "\" fill=\"" << kPalette[s % 7] << "\"/>\n";
    }
    const double cx = gx + (group_w - 16.0) / 2.0;
    os << "<text transform=\"translate(" << num(cx) << "," << num(top + plot_h + 12)
       << ") rotate(45)\">" << escape(categories[c]) << "</text>\n";
  }
  os << "<line x1=\"" << num(left) << "\" x2=\"" << num(left + plot_w) << "\" y1=\"" << num(top + plot_h)
     << "\" y2=\"" << num(top + plot_h) << "\" stroke=\"black\"/>\n";

  for (std::size_t s = 0; s < series.size(); ++s) {
    const double y = top + 14.0 * static_cast<double>(s);
    os << "<rect x=\"" << num(left + plot_w + 20) << "\" y=\"" << num(y) << "\" width=\"10\" height=\"10\" fill=\""
       << kPalette[s % 7] << "\"/>\n";
    os << "<text x=\"" << num(left + plot_w + 34) << "\" y=\"" << num(y + 9) << "\">" << escape(series[s].name)
       << "</text>\n";
  }
  os << "</svg>\n";
}

}  // namespace shike::cli
