#pragma once

// Minimal static SVG charts: line series, bar histograms and scatter plots.
// Output depends only on the data, so reruns produce identical files.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "pose/error.hpp"

namespace pose::plot {

struct Series {
  std::string label;
  std::vector<double> x{};
  std::vector<double> y{};
  std::string color = "#1f77b4";
};

struct Axes {
  std::string title;
  std::string xlabel;
  std::string ylabel;
  double xmin = std::numeric_limits<double>::quiet_NaN();  // NaN: from data
  double xmax = std::numeric_limits<double>::quiet_NaN();
  double ymin = std::numeric_limits<double>::quiet_NaN();
  double ymax = std::numeric_limits<double>::quiet_NaN();
};

inline const std::vector<std::string>& palette() {
  static const std::vector<std::string> p{"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  return p;
}

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

inline std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      default: out += c;
    }
  }
  return out;
}

class Canvas {
 public:
  static constexpr double kWidth = 640, kHeight = 440;
  static constexpr double kLeft = 70, kRight = 20, kTop = 40, kBottom = 60;

  Canvas(const Axes& axes, const std::vector<Series>& data) : axes_(axes) {
    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
    for (const auto& s : data) {
      for (double d : s.x)
        if (std::isfinite(d)) x0 = std::min(x0, d), x1 = std::max(x1, d);
      for (double d : s.y)
        if (std::isfinite(d)) y0 = std::min(y0, d), y1 = std::max(y1, d);
    }
    if (!std::isnan(axes.xmin)) x0 = axes.xmin;
    if (!std::isnan(axes.xmax)) x1 = axes.xmax;
    if (!std::isnan(axes.ymin)) y0 = axes.ymin;
    if (!std::isnan(axes.ymax)) y1 = axes.ymax;
    if (!std::isfinite(x0) || !std::isfinite(x1)) x0 = 0, x1 = 1;
    if (!std::isfinite(y0) || !std::isfinite(y1)) y0 = 0, y1 = 1;
    if (x1 <= x0) x1 = x0 + 1;
    if (y1 <= y0) y1 = y0 + 1;
    x0_ = x0, x1_ = x1, y0_ = y0, y1_ = y1;
    body_ += "<rect x='0' y='0' width='640' height='440' fill='white'/>\n";
    frame();
  }

  double px(double x) const { return kLeft + (x - x0_) / (x1_ - x0_) * (kWidth - kLeft - kRight); }
  double py(double y) const { return kHeight - kBottom - (y - y0_) / (y1_ - y0_) * (kHeight - kTop - kBottom); }
  double y0() const { return y0_; }

  void line(const Series& s) {
    std::string pts;
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      pts += num(px(s.x[i])) + "," + num(py(s.y[i])) + " ";
    }
    body_ += "<polyline fill='none' stroke='" + s.color + "' stroke-width='1.5' points='" + pts + "'/>\n";
  }

  void points(const Series& s, double radius = 2.0) {
    for (std::size_t i = 0; i < s.x.size(); ++i)
      body_ += "<circle cx='" + num(px(s.x[i])) + "' cy='" + num(py(s.y[i])) + "' r='" + num(radius) + "' fill='" +
               s.color + "' fill-opacity='0.6'/>\n";
  }

  void bar(double x_lo, double x_hi, double y, const std::string& color) {
    const double top = py(y), base = py(y0_);
    body_ += "<rect x='" + num(px(x_lo)) + "' y='" + num(top) + "' width='" + num(px(x_hi) - px(x_lo)) +
             "' height='" + num(base - top) + "' fill='" + color + "' fill-opacity='0.7'/>\n";
  }

  void legend(const std::vector<Series>& data) {
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double y = kTop + 14.0 * static_cast<double>(i);
      body_ += "<rect x='" + num(kWidth - 170) + "' y='" + num(y) + "' width='10' height='10' fill='" + data[i].color +
               "'/>\n<text x='" + num(kWidth - 155) + "' y='" + num(y + 9) + "' font-size='11'>" +
               escape(data[i].label) + "</text>\n";
    }
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path.string());
    os << "<svg xmlns='http://www.w3.org/2000/svg' width='640' height='440' font-family='sans-serif'>\n"
       << body_ << "</svg>\n";
    if (!os) throw IoError("cannot write " + path.string());
  }

 private:
  void frame() {
    const double l = kLeft, r = kWidth - kRight, t = kTop, b = kHeight - kBottom;
    body_ += "<rect x='" + num(l) + "' y='" + num(t) + "' width='" + num(r - l) + "' height='" + num(b - t) +
             "' fill='none' stroke='black'/>\n";
    for (int i = 0; i <= 4; ++i) {
      const double fx = x0_ + (x1_ - x0_) * i / 4.0, fy = y0_ + (y1_ - y0_) * i / 4.0;
      body_ += "<text x='" + num(px(fx)) + "' y='" + num(b + 16) + "' font-size='11' text-anchor='middle'>" + num(fx) +
               "</text>\n";
      body_ += "<text x='" + num(l - 6) + "' y='" + num(py(fy) + 4) + "' font-size='11' text-anchor='end'>" + num(fy) +
               "</text>\n";
    }
    body_ += "<text x='320' y='24' font-size='14' text-anchor='middle'>" + escape(axes_.title) + "</text>\n";
    body_ += "<text x='" + num((l + r) / 2) + "' y='" + num(kHeight - 16) + "' font-size='12' text-anchor='middle'>" +
             escape(axes_.xlabel) + "</text>\n";
    body_ += "<text x='16' y='" + num((t + b) / 2) + "' font-size='12' text-anchor='middle' transform='rotate(-90 16 " +
             num((t + b) / 2) + ")'>" + escape(axes_.ylabel) + "</text>\n";
  }

  Axes axes_;
  double x0_ = 0, x1_ = 1, y0_ = 0, y1_ = 1;
  std::string body_;
};

inline void line_chart(const std::filesystem::path& path, const Axes& axes, std::vector<Series> series) {
  for (std::size_t i = 0; i < series.size(); ++i) series[i].color = palette()[i % palette().size()];
  Canvas c(axes, series);
  for (const auto& s : series) c.line(s);
  c.legend(series);
  c.save(path);
}

inline void scatter(const std::filesystem::path& path, const Axes& axes, std::vector<Series> series) {
  for (std::size_t i = 0; i < series.size(); ++i) series[i].color = palette()[i % palette().size()];
  Canvas c(axes, series);
  for (const auto& s : series) c.points(s);
  c.legend(series);
  c.save(path);
}

// Bars over equal-width bins of [lo, hi].
inline void histogram(const std::filesystem::path& path, const Axes& axes, std::span<const std::size_t> counts,
                      double lo, double hi) {
  Series s{"count", {lo, hi}, {0.0}};
  for (std::size_t v : counts) s.y.push_back(static_cast<double>(v));
  Axes a = axes;
  a.xmin = lo, a.xmax = hi, a.ymin = 0;
  Canvas c(a, {s});
  const double w = (hi - lo) / static_cast<double>(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i)
    c.bar(lo + w * static_cast<double>(i), lo + w * static_cast<double>(i + 1), static_cast<double>(counts[i]),
          palette()[0]);
  c.save(path);
}

}  // namespace pose::plot
