#include "cvcorr/svg.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "cvcorr/common.hpp"

namespace cvcorr::svg {

namespace {

constexpr int kWidth = 640;
constexpr int kHeight = 400;
constexpr int kMarginLeft = 64;
constexpr int kMarginRight = 24;
constexpr int kMarginTop = 48;
constexpr int kMarginBottom = 56;

const char* kPalette[] = {"#3465a4", "#cc4125", "#6aa84f", "#8e5fb0", "#bf8f00", "#3d8b8b"};

std::string escape(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

void open_doc(std::ostringstream& os, const std::string& title) {
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
     << "\" viewBox=\"0 0 " << kWidth << " " << kHeight << "\" font-family=\"sans-serif\">\n"
     << "<rect width=\"" << kWidth << "\" height=\"" << kHeight << "\" fill=\"white\"/>\n"
     << "<text x=\"" << kWidth / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">"
     << escape(title) << "</text>\n";
}

void axes(std::ostringstream& os, const std::string& x_label, const std::string& y_label) {
  const int x0 = kMarginLeft, y0 = kHeight - kMarginBottom, x1 = kWidth - kMarginRight,
            y1 = kMarginTop;
  os << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x1 << "\" y2=\"" << y0
     << "\" stroke=\"black\"/>\n"
     << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x0 << "\" y2=\"" << y1
     << "\" stroke=\"black\"/>\n";
  if (!x_label.empty())
    os << "<text x=\"" << (x0 + x1) / 2 << "\" y=\"" << kHeight - 12
       << "\" text-anchor=\"middle\" font-size=\"12\">" << escape(x_label) << "</text>\n";
  if (!y_label.empty())
    os << "<text x=\"16\" y=\"" << (y0 + y1) / 2 << "\" font-size=\"12\" text-anchor=\"middle\""
       << " transform=\"rotate(-90 16 " << (y0 + y1) / 2 << ")\">" << escape(y_label)
       << "</text>\n";
}

}  // namespace

std::string bar_chart(const std::string& title,
                      const std::vector<std::pair<std::string, double>>& bars,
                      const std::string& y_label, double y_max) {
  if (bars.empty()) throw UsageError("bar_chart: no bars");
  if (!(y_max > 0)) throw UsageError("bar_chart: y_max must be positive");
  std::ostringstream os;
  open_doc(os, title);
  axes(os, "", y_label);

  const double plot_w = kWidth - kMarginLeft - kMarginRight;
  const double plot_h = kHeight - kMarginTop - kMarginBottom;
  const double y0 = kHeight - kMarginBottom;
  // y ticks at quarters
  for (int i = 0; i <= 4; ++i) {
    const double v = y_max * i / 4.0;
    const double y = y0 - plot_h * i / 4.0;
    os << "<line x1=\"" << kMarginLeft - 4 << "\" y1=\"" << y << "\" x2=\"" << kMarginLeft
       << "\" y2=\"" << y << "\" stroke=\"black\"/>\n"
       << "<text x=\"" << kMarginLeft - 8 << "\" y=\"" << y + 4
       << "\" text-anchor=\"end\" font-size=\"11\">" << fmt(v) << "</text>\n";
  }

  const double slot = plot_w / static_cast<double>(bars.size());
  const double bar_w = slot * 0.6;
  for (size_t i = 0; i < bars.size(); ++i) {
    const double v = std::clamp(bars[i].second, 0.0, y_max);
    const double h = plot_h * v / y_max;
    const double x = kMarginLeft + slot * (static_cast<double>(i) + 0.2);
    os << "<rect x=\"" << x << "\" y=\"" << y0 - h << "\" width=\"" << bar_w << "\" height=\"" << h
       << "\" fill=\"" << kPalette[i % 6] << "\"/>\n"
       << "<text x=\"" << x + bar_w / 2 << "\" y=\"" << y0 - h - 6
       << "\" text-anchor=\"middle\" font-size=\"11\">" << fmt(bars[i].second) << "</text>\n"
       << "<text x=\"" << x + bar_w / 2 << "\" y=\"" << y0 + 16
       << "\" text-anchor=\"middle\" font-size=\"11\">" << escape(bars[i].first) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::string line_chart(const std::string& title, const std::vector<Series>& series,
                       const std::string& x_label, const std::string& y_label) {
  if (series.empty()) throw UsageError("line_chart: no series");
  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  bool first = true;
  for (const Series& s : series)
    for (const auto& [x, y] : s.points) {
      if (first) {
        xmin = xmax = x;
        ymin = ymax = y;
        first = false;
      }
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
  if (first) throw UsageError("line_chart: all series empty");
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;

  std::ostringstream os;
  open_doc(os, title);
  axes(os, x_label, y_label);

  const double plot_w = kWidth - kMarginLeft - kMarginRight;
  const double plot_h = kHeight - kMarginTop - kMarginBottom;
  auto px = [&](double x) { return kMarginLeft + plot_w * (x - xmin) / (xmax - xmin); };
  auto py = [&](double y) {
    return kHeight - kMarginBottom - plot_h * (y - ymin) / (ymax - ymin);
  };

  for (int i = 0; i <= 4; ++i) {
    const double xv = xmin + (xmax - xmin) * i / 4.0;
    const double yv = ymin + (ymax - ymin) * i / 4.0;
    os << "<text x=\"" << px(xv) << "\" y=\"" << kHeight - kMarginBottom + 16
       << "\" text-anchor=\"middle\" font-size=\"11\">" << fmt(xv) << "</text>\n"
       << "<text x=\"" << kMarginLeft - 8 << "\" y=\"" << py(yv) + 4
       << "\" text-anchor=\"end\" font-size=\"11\">" << fmt(yv) << "</text>\n";
  }

  for (size_t si = 0; si < series.size(); ++si) {
    const char* color = kPalette[si % 6];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (const auto& [x, y] : series[si].points) os << px(x) << ',' << py(y) << ' ';
    os << "\"/>\n";
    for (const auto& [x, y] : series[si].points)
      os << "<circle cx=\"" << px(x) << "\" cy=\"" << py(y) << "\" r=\"3\" fill=\"" << color
         << "\"/>\n";
    if (!series[si].name.empty())
      os << "<text x=\"" << kWidth - kMarginRight - 8 << "\" y=\""
         << kMarginTop + 16 + 16 * static_cast<double>(si)
         << "\" text-anchor=\"end\" font-size=\"12\" fill=\"" << color << "\">"
         << escape(series[si].name) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(path + ": cannot open for writing");
  out << content;
}

}  // namespace cvcorr::svg
