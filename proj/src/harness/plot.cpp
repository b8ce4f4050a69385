#include "harness/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "util/io.hpp"

namespace se3ctrl::harness {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

int column_index(const std::vector<std::string>& header, const std::string& name) {
  for (size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return static_cast<int>(i);
  throw std::invalid_argument("plot: traces CSV lacks column '" + name + "'");
}

std::string fmt(double v, const char* spec = "%g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

}  // namespace

void plot_traces(const std::string& traces_csv, const std::string& out_svg) {
  std::istringstream in(util::read_text_file(traces_csv));
  std::string line;
  if (!std::getline(in, line)) throw std::invalid_argument("plot: empty traces file");
  const std::vector<std::string> header = split_csv_line(line);
  const int c_it = column_index(header, "iteration");
  const int c_err = column_index(header, "mean_abs_err");
  const int c_method = column_index(header, "method");
  const int c_task = column_index(header, "task_id");

  // method -> task -> per-iteration error (rows are consecutive from 0).
  std::map<std::string, std::map<std::string, std::vector<double>>> series;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::vector<std::string> f = split_csv_line(line);
    if (static_cast<int>(f.size()) <= std::max({c_it, c_err, c_method, c_task}))
      throw std::invalid_argument("plot: malformed traces row");
    const int it = std::stoi(f[static_cast<size_t>(c_it)]);
    const double err = std::stod(f[static_cast<size_t>(c_err)]);
    if (!std::isfinite(err)) throw std::invalid_argument("plot: non-finite error value");
    auto& vec = series[f[static_cast<size_t>(c_method)]][f[static_cast<size_t>(c_task)]];
    if (it != static_cast<int>(vec.size()))
      throw std::invalid_argument("plot: non-consecutive iterations for a task");
    vec.push_back(err);
  }
  if (series.empty()) throw std::invalid_argument("plot: traces file has no data rows");

  // Mean across tasks; terminated tasks hold their final value.
  std::map<std::string, std::vector<double>> curves;
  int max_len = 0;
  for (const auto& [method, tasks] : series) {
    int len = 0;
    for (const auto& [task, vec] : tasks) len = std::max(len, static_cast<int>(vec.size()));
    std::vector<double> curve(static_cast<size_t>(len), 0.0);
    for (int it = 0; it < len; ++it) {
      double acc = 0.0;
      for (const auto& [task, vec] : tasks)
        acc += it < static_cast<int>(vec.size()) ? vec[static_cast<size_t>(it)] : vec.back();
      curve[static_cast<size_t>(it)] = acc / static_cast<double>(tasks.size());
    }
    curves[method] = std::move(curve);
    max_len = std::max(max_len, len);
  }

  double y_max = 0.0;
  for (const auto& [method, curve] : curves)
    for (double v : curve) y_max = std::max(y_max, v);
  if (y_max <= 0.0) y_max = 1.0;
  y_max *= 1.05;
  const double x_max = std::max(1, max_len - 1);

  const double width = 720, height = 480;
  const double ml = 80, mr = 24, mt = 24, mb = 56;
  const double pw = width - ml - mr, ph = height - mt - mb;
  const auto px = [&](double it) { return ml + pw * (it / x_max); };
  const auto py = [&](double v) { return mt + ph * (1.0 - v / y_max); };

  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                  "#9467bd", "#8c564b"};
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  svg << "<rect width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n";

  const int n_ticks = 5;
  svg << "<g font-family=\"sans-serif\" font-size=\"12\" fill=\"#333\">\n";
  for (int i = 0; i <= n_ticks; ++i) {
    const double xv = x_max * i / n_ticks;
    const double yv = y_max * i / n_ticks;
    svg << "<line x1=\"" << fmt(px(xv), "%.2f") << "\" y1=\"" << fmt(mt, "%.2f") << "\" x2=\""
        << fmt(px(xv), "%.2f") << "\" y2=\"" << fmt(mt + ph, "%.2f")
        << "\" stroke=\"#ddd\" stroke-width=\"1\"/>\n";
    svg << "<line x1=\"" << fmt(ml, "%.2f") << "\" y1=\"" << fmt(py(yv), "%.2f") << "\" x2=\""
        << fmt(ml + pw, "%.2f") << "\" y2=\"" << fmt(py(yv), "%.2f")
        << "\" stroke=\"#ddd\" stroke-width=\"1\"/>\n";
    svg << "<text x=\"" << fmt(px(xv), "%.2f") << "\" y=\"" << fmt(mt + ph + 18, "%.2f")
        << "\" text-anchor=\"middle\">" << fmt(xv) << "</text>\n";
    svg << "<text x=\"" << fmt(ml - 8, "%.2f") << "\" y=\"" << fmt(py(yv) + 4, "%.2f")
        << "\" text-anchor=\"end\">" << fmt(yv, "%.3g") << "</text>\n";
  }
  svg << "<text x=\"" << fmt(ml + pw / 2, "%.2f") << "\" y=\"" << fmt(height - 12, "%.2f")
      << "\" text-anchor=\"middle\" font-size=\"14\">iteration</text>\n";
  svg << "<text x=\"18\" y=\"" << fmt(mt + ph / 2, "%.2f")
      << "\" text-anchor=\"middle\" font-size=\"14\" transform=\"rotate(-90 18 "
      << fmt(mt + ph / 2, "%.2f") << ")\">mean abs joint error (rad)</text>\n";
  svg << "</g>\n";

  svg << "<rect x=\"" << ml << "\" y=\"" << mt << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"#333\" stroke-width=\"1\"/>\n";

  int ci = 0;
  for (const auto& [method, curve] : curves) {
    const char* color = palette[ci % 6];
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.8\" points=\"";
    for (size_t i = 0; i < curve.size(); ++i) {
      if (i) svg << " ";
      svg << fmt(px(static_cast<double>(i)), "%.2f") << "," << fmt(py(curve[i]), "%.2f");
    }
    if (curve.size() == 1)
      svg << " " << fmt(px(1.0), "%.2f") << "," << fmt(py(curve[0]), "%.2f");
    svg << "\"/>\n";
    ++ci;
  }

  // Legend, top right.
  const double lx = ml + pw - 190, ly = mt + 12;
  svg << "<g font-family=\"sans-serif\" font-size=\"12\" fill=\"#333\">\n";
  svg << "<rect x=\"" << fmt(lx - 8, "%.2f") << "\" y=\"" << fmt(ly - 12, "%.2f")
      << "\" width=\"190\" height=\"" << fmt(8.0 + 18.0 * static_cast<double>(curves.size()), "%.2f")
      << "\" fill=\"white\" stroke=\"#999\"/>\n";
  ci = 0;
  for (const auto& [method, curve] : curves) {
    const double y = ly + 18.0 * ci;
    svg << "<line x1=\"" << fmt(lx, "%.2f") << "\" y1=\"" << fmt(y - 4, "%.2f") << "\" x2=\""
        << fmt(lx + 24, "%.2f") << "\" y2=\"" << fmt(y - 4, "%.2f") << "\" stroke=\""
        << palette[ci % 6] << "\" stroke-width=\"1.8\"/>\n";
    svg << "<text x=\"" << fmt(lx + 30, "%.2f") << "\" y=\"" << fmt(y, "%.2f") << "\">" << method
        << "</text>\n";
    ++ci;
  }
  svg << "</g>\n</svg>\n";

  util::write_text_file(out_svg, svg.str());
}

}  // namespace se3ctrl::harness
