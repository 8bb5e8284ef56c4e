#include "plot.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

namespace fieldctl {

namespace {

constexpr double kWidth = 640, kHeight = 420;
constexpr double kLeft = 70, kRight = 170, kTop = 40, kBottom = 60;
const char* const kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

std::string esc(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

}  // namespace

std::string render_svg(const LineChart& c) {
  const double pw = kWidth - kLeft - kRight, ph = kHeight - kTop - kBottom;
  auto tx = [&](double x) {
    double a = c.log_x ? std::log10(x) : x, lo = c.log_x ? std::log10(c.x_min) : c.x_min,
           hi = c.log_x ? std::log10(c.x_max) : c.x_max;
    return kLeft + (hi > lo ? (a - lo) / (hi - lo) : 0.5) * pw;
  };
  auto ty = [&](double y) { return kTop + (1.0 - (y - c.y_min) / (c.y_max - c.y_min)) * ph; };

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << kWidth / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << esc(c.title)
    << "</text>\n";

  // Axes, grid and ticks.
  for (int i = 0; i <= 5; ++i) {
    const double v = c.y_min + (c.y_max - c.y_min) * i / 5.0, y = ty(v);
    s << "<line x1=\"" << kLeft << "\" y1=\"" << num(y) << "\" x2=\"" << kLeft + pw << "\" y2=\"" << num(y)
      << "\" stroke=\"#ddd\"/>\n";
    s << "<text x=\"" << kLeft - 6 << "\" y=\"" << num(y + 4) << "\" text-anchor=\"end\">" << tick(v) << "</text>\n";
  }
  std::vector<std::pair<double, std::string>> xt;
  if (!c.categories.empty()) {
    for (std::size_t i = 0; i < c.categories.size(); ++i) xt.emplace_back(static_cast<double>(i), c.categories[i]);
  } else if (c.log_x && c.x_min > 0 && c.x_max > c.x_min) {
    for (double d = std::pow(10.0, std::floor(std::log10(c.x_min))); d <= c.x_max * 1.0001; d *= 10)
      for (double m : {1.0, 2.0, 5.0})
        if (d * m >= c.x_min * 0.9999 && d * m <= c.x_max * 1.0001) xt.emplace_back(d * m, tick(d * m));
  } else {
    for (int i = 0; i <= 5; ++i) {
      const double v = c.x_min + (c.x_max - c.x_min) * i / 5.0;
      xt.emplace_back(v, tick(v));
    }
  }
  for (const auto& [v, label] : xt) {
    const double x = tx(v);
    s << "<line x1=\"" << num(x) << "\" y1=\"" << kTop + ph << "\" x2=\"" << num(x) << "\" y2=\"" << kTop + ph + 5
      << "\" stroke=\"black\"/>\n";
    s << "<text x=\"" << num(x) << "\" y=\"" << kTop + ph + 18 << "\" text-anchor=\"middle\">" << esc(label)
      << "</text>\n";
  }
  s << "<rect x=\"" << kLeft << "\" y=\"" << kTop << "\" width=\"" << pw << "\" height=\"" << ph
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  s << "<text x=\"" << kLeft + pw / 2 << "\" y=\"" << kHeight - 15 << "\" text-anchor=\"middle\">" << esc(c.x_label)
    << "</text>\n";
  s << "<text transform=\"translate(18," << kTop + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
    << esc(c.y_label) << "</text>\n";

  // Series and legend.
  for (std::size_t k = 0; k < c.series.size(); ++k) {
    const auto& sr = c.series[k];
    const char* color = kColors[k % std::size(kColors)];
    std::string path;
    for (std::size_t i = 0; i < sr.x.size() && i < sr.y.size(); ++i) {
      if (!std::isfinite(sr.x[i]) || !std::isfinite(sr.y[i])) continue;
      const double x = tx(sr.x[i]), y = ty(sr.y[i]);
      path += (path.empty() ? "M" : " L") + num(x) + "," + num(y);
      s << "<circle cx=\"" << num(x) << "\" cy=\"" << num(y) << "\" r=\"3\" fill=\"" << color << "\"/>\n";
      if (i < sr.err.size() && std::isfinite(sr.err[i]) && sr.err[i] > 0) {
        s << "<line x1=\"" << num(x) << "\" y1=\"" << num(ty(sr.y[i] - sr.err[i])) << "\" x2=\"" << num(x)
          << "\" y2=\"" << num(ty(sr.y[i] + sr.err[i])) << "\" stroke=\"" << color << "\"/>\n";
      }
    }
    if (!sr.points_only && !path.empty())
      s << "<path d=\"" << path << "\" fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    const double ly = kTop + 10 + 18.0 * static_cast<double>(k);
    s << "<rect x=\"" << kLeft + pw + 12 << "\" y=\"" << ly - 8 << "\" width=\"12\" height=\"12\" fill=\"" << color
      << "\"/>\n";
    s << "<text x=\"" << kLeft + pw + 30 << "\" y=\"" << ly + 2 << "\">" << esc(sr.label) << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace fieldctl
