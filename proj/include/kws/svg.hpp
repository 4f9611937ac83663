#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "kws/common.hpp"
#include "kws/evalkit.hpp"

namespace kws::svg {

// Minimal standalone SVG renderings of DET curves and score histograms.
// Pure string assembly, no external services.

namespace detail {

constexpr double kSize = 480.0;
constexpr double kMargin = 56.0;
constexpr double kPlot = kSize - 2 * kMargin;

inline double px(double v) { return kMargin + v * kPlot; }
inline double py(double v) { return kSize - kMargin - v * kPlot; }

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

inline void axes(std::string& s, const std::string& xlabel, const std::string& ylabel) {
  s += "<rect x='" + num(kMargin) + "' y='" + num(kMargin) + "' width='" + num(kPlot) +
       "' height='" + num(kPlot) + "' fill='none' stroke='#444'/>\n";
  for (int i = 0; i <= 5; ++i) {
    double v = 0.2 * i;
    s += "<text x='" + num(px(v)) + "' y='" + num(kSize - kMargin + 18) +
         "' font-size='11' text-anchor='middle'>" + num(v) + "</text>\n";
    s += "<text x='" + num(kMargin - 8) + "' y='" + num(py(v) + 4) +
         "' font-size='11' text-anchor='end'>" + num(v) + "</text>\n";
    if (i > 0 && i < 5) {
      s += "<line x1='" + num(px(v)) + "' y1='" + num(kMargin) + "' x2='" + num(px(v)) + "' y2='" +
           num(kSize - kMargin) + "' stroke='#ddd'/>\n";
      s += "<line x1='" + num(kMargin) + "' y1='" + num(py(v)) + "' x2='" + num(kSize - kMargin) +
           "' y2='" + num(py(v)) + "' stroke='#ddd'/>\n";
    }
  }
  s += "<text x='" + num(kSize / 2) + "' y='" + num(kSize - 12) +
       "' font-size='13' text-anchor='middle'>" + xlabel + "</text>\n";
  s += "<text x='16' y='" + num(kSize / 2) + "' font-size='13' text-anchor='middle' transform='rotate(-90 16 " +
       num(kSize / 2) + ")'>" + ylabel + "</text>\n";
}

}  // namespace detail

inline std::string det_svg(const evalkit::ThresholdSweep& sweep, const std::string& title) {
  using namespace detail;
  std::string s = "<svg xmlns='http://www.w3.org/2000/svg' width='480' height='480' viewBox='0 0 480 480'>\n";
  s += "<text x='" + num(kSize / 2) + "' y='28' font-size='15' text-anchor='middle'>" + title + "</text>\n";
  axes(s, "false accept rate", "false reject rate");
  s += "<polyline fill='none' stroke='#c0392b' stroke-width='1.5' points='";
  for (size_t k = sweep.thresholds.size(); k-- > 0;)
    s += num(px(sweep.far[k])) + "," + num(py(sweep.frr[k])) + " ";
  s += "'/>\n</svg>\n";
  return s;
}

inline std::string histogram_svg(const evalkit::Histogram& h, const std::string& title) {
  using namespace detail;
  double peak = 1e-12;
  for (double v : h.pos) peak = std::max(peak, v);
  for (double v : h.neg) peak = std::max(peak, v);
  std::string s = "<svg xmlns='http://www.w3.org/2000/svg' width='480' height='480' viewBox='0 0 480 480'>\n";
  s += "<text x='" + num(kSize / 2) + "' y='28' font-size='15' text-anchor='middle'>" + title + "</text>\n";
  axes(s, "cosine similarity", "probability / bin peak");
  double w = kPlot / 100.0;
  for (size_t b = 0; b < 100; ++b) {
    double x = px(0.01 * static_cast<double>(b));
    if (h.neg[b] > 0.0) {
      double hh = h.neg[b] / peak * kPlot;
      s += "<rect x='" + num(x) + "' y='" + num(kSize - kMargin - hh) + "' width='" + num(w) +
           "' height='" + num(hh) + "' fill='#2e6da4' fill-opacity='0.55'/>\n";
    }
    if (h.pos[b] > 0.0) {
      double hh = h.pos[b] / peak * kPlot;
      s += "<rect x='" + num(x) + "' y='" + num(kSize - kMargin - hh) + "' width='" + num(w) +
           "' height='" + num(hh) + "' fill='#c0392b' fill-opacity='0.55'/>\n";
    }
  }
  s += "</svg>\n";
  return s;
}

inline void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) throw Error("evalkit", "cannot write: " + path);
  out << content;
}

}  // namespace kws::svg
