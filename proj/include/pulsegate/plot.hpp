// Copyright 2026 The PulseGate Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Minimal static SVG line plots for reports.

#pragma once

#include <algorithm>
#include <cstdio>
#include <string>
#include <vector>

#include "pulsegate/tensor.hpp"

namespace pulsegate {

struct PlotSeries {
  std::string name;
  std::vector<double> x, y;
};

struct PlotSpec {
  std::string title, x_label, y_label;
  double x_min = 0, x_max = 1, y_min = 0, y_max = 1;
  bool auto_y = false;  // fit y range to the data
};

namespace plot_detail {
inline std::string esc(const std::string& s) {
  std::string o;
  for (char c : s) {
    switch (c) {
      case '<': o += "&lt;"; break;
      case '>': o += "&gt;"; break;
      case '&': o += "&amp;"; break;
      case '"': o += "&quot;"; break;
      default: o += c;
    }
  }
  return o;
}

inline std::string num(double v) {
  char b[32];
  std::snprintf(b, sizeof b, "%.4g", v);
  return b;
}
}  // namespace plot_detail

inline std::string svg_line_plot(const PlotSpec& spec_in, const std::vector<PlotSeries>& series) {
  using plot_detail::esc;
  using plot_detail::num;
  PlotSpec spec = spec_in;
  for (const auto& s : series)
    if (s.x.size() != s.y.size()) throw Error("plot: series '" + s.name + "' has mismatched x and y");
  if (spec.auto_y) {
    bool any = false;
    for (const auto& s : series)
      for (double v : s.y) {
        spec.y_min = any ? std::min(spec.y_min, v) : v;
        spec.y_max = any ? std::max(spec.y_max, v) : v;
        any = true;
      }
    if (!any || spec.y_max == spec.y_min) {
      spec.y_min -= 0.5;
      spec.y_max += 0.5;
    }
    const double pad = 0.05 * (spec.y_max - spec.y_min);
    spec.y_min -= pad;
    spec.y_max += pad;
  }
  if (!(spec.x_max > spec.x_min) || !(spec.y_max > spec.y_min)) throw Error("plot: empty axis range");

  constexpr double W = 640, H = 420, L = 70, R = 150, T = 40, B = 55;
  const double pw = W - L - R, ph = H - T - B;
  auto px = [&](double x) { return L + (x - spec.x_min) / (spec.x_max - spec.x_min) * pw; };
  auto py = [&](double y) { return T + ph - (y - spec.y_min) / (spec.y_max - spec.y_min) * ph; };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

  std::string o = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"420\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o += "<text x=\"" + num(L + pw / 2) + "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">" + esc(spec.title) + "</text>\n";
  o += "<rect x=\"" + num(L) + "\" y=\"" + num(T) + "\" width=\"" + num(pw) + "\" height=\"" + num(ph) +
       "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    const double fx = spec.x_min + (spec.x_max - spec.x_min) * i / 5.0;
    const double fy = spec.y_min + (spec.y_max - spec.y_min) * i / 5.0;
    o += "<line x1=\"" + num(px(fx)) + "\" y1=\"" + num(T) + "\" x2=\"" + num(px(fx)) + "\" y2=\"" + num(T + ph) +
         "\" stroke=\"#ddd\"/>\n";
    o += "<line x1=\"" + num(L) + "\" y1=\"" + num(py(fy)) + "\" x2=\"" + num(L + pw) + "\" y2=\"" + num(py(fy)) +
         "\" stroke=\"#ddd\"/>\n";
    o += "<text x=\"" + num(px(fx)) + "\" y=\"" + num(T + ph + 16) + "\" text-anchor=\"middle\">" + num(fx) + "</text>\n";
    o += "<text x=\"" + num(L - 6) + "\" y=\"" + num(py(fy) + 4) + "\" text-anchor=\"end\">" + num(fy) + "</text>\n";
  }
  o += "<text x=\"" + num(L + pw / 2) + "\" y=\"" + num(H - 14) + "\" text-anchor=\"middle\">" + esc(spec.x_label) + "</text>\n";
  o += "<text transform=\"translate(18," + num(T + ph / 2) + ") rotate(-90)\" text-anchor=\"middle\">" +
       esc(spec.y_label) + "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* c = colors[k % 6];
    std::string pts;
    for (std::size_t i = 0; i < s.x.size(); ++i) pts += num(px(s.x[i])) + "," + num(py(s.y[i])) + " ";
    o += "<polyline fill=\"none\" stroke=\"" + std::string(c) + "\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
    const double ly = T + 14 + 18.0 * static_cast<double>(k);
    o += "<line x1=\"" + num(L + pw + 12) + "\" y1=\"" + num(ly) + "\" x2=\"" + num(L + pw + 34) + "\" y2=\"" + num(ly) +
         "\" stroke=\"" + c + "\" stroke-width=\"2\"/>\n";
    o += "<text x=\"" + num(L + pw + 40) + "\" y=\"" + num(ly + 4) + "\">" + esc(s.name) + "</text>\n";
  }
  o += "</svg>\n";
  return o;
}

}  // namespace pulsegate
