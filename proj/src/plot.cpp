#include "offrl/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "offrl/core.hpp"

namespace offrl::plot {

namespace {

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"};

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string o;
  for (char c : s) {
    if (c == '<') o += "&lt;";
    else if (c == '>') o += "&gt;";
    else if (c == '&') o += "&amp;";
    else o += c;
  }
  return o;
}

Series read_series(const std::string& input, const PlotSpec& spec) {
  std::string label = input, path = input;
  if (const auto eq = input.find('='); eq != std::string::npos) {
    label = input.substr(0, eq);
    path = input.substr(eq + 1);
  }
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read " + path);
  std::string line;
  if (!std::getline(is, line)) throw ConfigError(path + " is empty");
  const auto header = split(line);
  auto col = [&](const std::string& name) -> std::ptrdiff_t {
    const auto it = std::find(header.begin(), header.end(), name);
    return it == header.end() ? -1 : it - header.begin();
  };
  std::vector<std::string> missing;
  for (const auto* name : {&spec.x_column, &spec.y_column, &spec.group_by}) {
    if (col(*name) < 0) missing.push_back(*name);
  }
  if (!missing.empty()) {
    std::string msg = path + " has no column";
    for (const auto& m : missing) msg += " '" + m + "'";
    throw ConfigError(msg);
  }
  const auto xi = static_cast<std::size_t>(col(spec.x_column));
  const auto yi = static_cast<std::size_t>(col(spec.y_column));
  const auto gi = static_cast<std::size_t>(col(spec.group_by));

  std::map<std::string, std::vector<std::pair<double, double>>> groups;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto cells = split(line);
    if (cells.size() <= std::max({xi, yi, gi}) || cells[yi].empty()) continue;
    groups[cells[gi]].emplace_back(std::stod(cells[xi]), std::stod(cells[yi]));
  }

  // smoothed replicates, then mean/std at every x present in all of them
  std::map<double, std::vector<double>> by_x;
  for (auto& [g, pts] : groups) {
    std::sort(pts.begin(), pts.end());
    const std::size_t w = std::max<std::size_t>(spec.smoothing, 1);
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const std::size_t lo = i + 1 >= w ? i + 1 - w : 0;
      double s = 0.0;
      for (std::size_t k = lo; k <= i; ++k) s += pts[k].second;
      by_x[pts[i].first].push_back(s / static_cast<double>(i - lo + 1));
    }
  }
  Series out;
  out.label = label;
  out.replicates = groups.size();
  for (const auto& [x, ys] : by_x) {
    if (ys.size() != groups.size()) continue;
    double m = 0.0;
    for (double y : ys) m += y;
    m /= static_cast<double>(ys.size());
    double v = 0.0;
    for (double y : ys) v += (y - m) * (y - m);
    out.x.push_back(x);
    out.mean.push_back(m);
    out.std.push_back(std::sqrt(v / static_cast<double>(ys.size())));
  }
  return out;
}

}  // namespace

std::vector<Series> compute_series(const PlotSpec& spec) {
  if (spec.inputs.empty()) throw ConfigError("plot needs at least one input");
  std::vector<Series> out;
  for (const auto& in : spec.inputs) out.push_back(read_series(in, spec));
  return out;
}

std::string render_svg(const std::vector<Series>& series, const PlotSpec& spec) {
  const double W = 640, H = 400, left = 60, right = 150, top = 30, bottom = 45;
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.mean[i] - s.std[i]);
      y1 = std::max(y1, s.mean[i] + s.std[i]);
    }
  }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y0 -= 0.5, y1 += 0.5;
  const double pw = W - left - right, ph = H - top - bottom;
  auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return top + (1.0 - (y - y0) / (y1 - y0)) * ph; };

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
    << "\" viewBox=\"0 0 " << W << ' ' << H << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!spec.title.empty()) {
    o << "<text x=\"" << fmt(left + pw / 2) << "\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">"
      << escape(spec.title) << "</text>\n";
  }
  o << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
    << "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double xv = x0 + (x1 - x0) * k / 4.0, yv = y0 + (y1 - y0) * k / 4.0;
    o << "<text x=\"" << fmt(px(xv)) << "\" y=\"" << fmt(top + ph + 15)
      << "\" text-anchor=\"middle\">" << tick(xv) << "</text>\n";
    o << "<text x=\"" << fmt(left - 5) << "\" y=\"" << fmt(py(yv) + 4) << "\" text-anchor=\"end\">"
      << tick(yv) << "</text>\n";
    o << "<line x1=\"" << left << "\" x2=\"" << left + pw << "\" y1=\"" << fmt(py(yv)) << "\" y2=\""
      << fmt(py(yv)) << "\" stroke=\"#ddd\"/>\n";
  }
  o << "<text x=\"" << fmt(left + pw / 2) << "\" y=\"" << H - 8 << "\" text-anchor=\"middle\">"
    << escape(spec.x_column) << "</text>\n";
  o << "<text transform=\"translate(14 " << fmt(top + ph / 2) << ") rotate(-90)\" text-anchor=\"middle\">"
    << escape(spec.y_column) << "</text>\n";

  for (std::size_t s = 0; s < series.size(); ++s) {
    const Series& sr = series[s];
    const char* color = kPalette[s % (sizeof kPalette / sizeof *kPalette)];
    if (sr.x.empty()) continue;
    o << "<g class=\"series\" data-label=\"" << escape(sr.label) << "\">\n";
    o << "<polygon class=\"band\" fill=\"" << color << "\" fill-opacity=\"0.2\" stroke=\"none\" points=\"";
    for (std::size_t i = 0; i < sr.x.size(); ++i) {
      o << fmt(px(sr.x[i])) << ',' << fmt(py(sr.mean[i] + sr.std[i])) << ' ';
    }
    for (std::size_t i = sr.x.size(); i-- > 0;) {
      o << fmt(px(sr.x[i])) << ',' << fmt(py(sr.mean[i] - sr.std[i])) << ' ';
    }
    o << "\"/>\n<polyline class=\"mean\" fill=\"none\" stroke=\"" << color
      << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < sr.x.size(); ++i) {
      o << fmt(px(sr.x[i])) << ',' << fmt(py(sr.mean[i])) << (i + 1 < sr.x.size() ? " " : "");
    }
    o << "\"/>\n";
    const double ly = top + 14 + 16 * static_cast<double>(s);
    o << "<line x1=\"" << left + pw + 10 << "\" x2=\"" << left + pw + 30 << "\" y1=\"" << ly
      << "\" y2=\"" << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    o << "<text x=\"" << left + pw + 35 << "\" y=\"" << ly + 4 << "\">" << escape(sr.label)
      << "</text>\n</g>\n";
  }
  o << "</svg>\n";
  return o.str();
}

void write_plot(const PlotSpec& spec) {
  if (spec.output.empty()) throw ConfigError("plot needs an output path");
  const std::string svg = render_svg(compute_series(spec), spec);
  std::ofstream os(spec.output);
  if (!os) throw ConfigError("cannot write " + spec.output);
  os << svg;
}

}  // namespace offrl::plot
