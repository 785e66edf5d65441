#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "dipolegrid/cli.hpp"
#include "dipolegrid/errors.hpp"

namespace dipolegrid::cli {

namespace {

// Fixed two-decimal coordinates keep the output byte-stable.
std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string label(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '&':
        out += "&amp;";
        break;
      case '<':
        out += "&lt;";
        break;
      case '>':
        out += "&gt;";
        break;
      case '"':
        out += "&quot;";
        break;
      default:
        out += ch;
    }
  }
  return out;
}

struct Range {
  double lo, hi;
};

Range padded(double lo, double hi) {
  if (!(hi > lo)) {
    const double pad = std::max(std::abs(lo) * 0.05, 0.5);
    return {lo - pad, hi + pad};
  }
  const double pad = 0.05 * (hi - lo);
  return {lo - pad, hi + pad};
}

// Plot area inside a frame of given size with room for tick labels.
struct Frame {
  double left, top, width, height;
  Range x, y;

  double px(double v) const { return left + (v - x.lo) / (x.hi - x.lo) * width; }
  double py(double v) const { return top + height - (v - y.lo) / (y.hi - y.lo) * height; }
};

void header(std::ostringstream& s, int width, int height) {
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
    << "\" viewBox=\"0 0 " << width << ' ' << height << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s << "<rect x=\"0\" y=\"0\" width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n";
}

void axes(std::ostringstream& s, const Frame& f, const std::string& x_label, const std::string& y_label) {
  s << "<rect x=\"" << num(f.left) << "\" y=\"" << num(f.top) << "\" width=\"" << num(f.width) << "\" height=\""
    << num(f.height) << "\" fill=\"none\" stroke=\"black\"/>\n";
  constexpr int kTicks = 5;
  for (int i = 0; i <= kTicks; ++i) {
    const double xv = f.x.lo + (f.x.hi - f.x.lo) * i / kTicks;
    const double yv = f.y.lo + (f.y.hi - f.y.lo) * i / kTicks;
    const double px = f.px(xv), py = f.py(yv);
    s << "<line x1=\"" << num(px) << "\" y1=\"" << num(f.top + f.height) << "\" x2=\"" << num(px) << "\" y2=\""
      << num(f.top + f.height + 4) << "\" stroke=\"black\"/>\n";
    s << "<text x=\"" << num(px) << "\" y=\"" << num(f.top + f.height + 16) << "\" text-anchor=\"middle\">"
      << label(xv) << "</text>\n";
    s << "<line x1=\"" << num(f.left - 4) << "\" y1=\"" << num(py) << "\" x2=\"" << num(f.left) << "\" y2=\""
      << num(py) << "\" stroke=\"black\"/>\n";
    s << "<text x=\"" << num(f.left - 6) << "\" y=\"" << num(py + 4) << "\" text-anchor=\"end\">" << label(yv)
      << "</text>\n";
  }
  s << "<text x=\"" << num(f.left + f.width / 2) << "\" y=\"" << num(f.top + f.height + 32)
    << "\" text-anchor=\"middle\">" << escape(x_label) << "</text>\n";
  s << "<text x=\"" << num(f.left - 40) << "\" y=\"" << num(f.top + f.height / 2) << "\" text-anchor=\"middle\" "
    << "transform=\"rotate(-90 " << num(f.left - 40) << ' ' << num(f.top + f.height / 2) << ")\">"
    << escape(y_label) << "</text>\n";
}

void polyline(std::ostringstream& s, const Frame& f, const std::vector<double>& xs, const std::vector<double>& ys,
              const char* style) {
  s << "<polyline fill=\"none\" " << style << " points=\"";
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) s << ' ';
    s << num(f.px(xs[i])) << ',' << num(f.py(ys[i]));
  }
  s << "\"/>\n";
}

}  // namespace

std::string line_plot_svg(const std::string& title, const std::string& y_label, const std::vector<double>& times,
                          const std::vector<double>& values, const std::vector<double>* truth, int width,
                          int height) {
  if (times.empty() || times.size() != values.size()) throw ValidationError("line plot needs matching series");
  if (truth && truth->size() != values.size()) throw ValidationError("truth series length differs");
  double lo = *std::min_element(values.begin(), values.end());
  double hi = *std::max_element(values.begin(), values.end());
  if (truth) {
    lo = std::min(lo, *std::min_element(truth->begin(), truth->end()));
    hi = std::max(hi, *std::max_element(truth->begin(), truth->end()));
  }
  const Frame f{60.0, 30.0, width - 80.0, height - 75.0, padded(times.front(), times.back()), padded(lo, hi)};

  std::ostringstream s;
  header(s, width, height);
  s << "<text x=\"" << num(width / 2.0) << "\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">" << escape(title)
    << "</text>\n";
  axes(s, f, "t", y_label);
  if (truth) polyline(s, f, times, *truth, "stroke=\"black\" stroke-dasharray=\"4 3\"");
  polyline(s, f, times, values, "stroke=\"steelblue\" stroke-width=\"1.5\"");
  const double lx = f.left + f.width - 110;
  s << "<line x1=\"" << num(lx) << "\" y1=\"" << num(f.top + 12) << "\" x2=\"" << num(lx + 20) << "\" y2=\""
    << num(f.top + 12) << "\" stroke=\"steelblue\" stroke-width=\"1.5\"/>\n";
  s << "<text x=\"" << num(lx + 25) << "\" y=\"" << num(f.top + 16) << "\">posterior mean</text>\n";
  if (truth) {
    s << "<line x1=\"" << num(lx) << "\" y1=\"" << num(f.top + 28) << "\" x2=\"" << num(lx + 20) << "\" y2=\""
      << num(f.top + 28) << "\" stroke=\"black\" stroke-dasharray=\"4 3\"/>\n";
    s << "<text x=\"" << num(lx + 25) << "\" y=\"" << num(f.top + 32) << "\">truth</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

std::string bar_chart_svg(const std::string& title, const std::vector<BarPanel>& panels, int width, int height) {
  if (panels.empty()) throw ValidationError("bar chart needs at least one panel");
  std::ostringstream s;
  header(s, width, height);
  s << "<text x=\"" << num(width / 2.0) << "\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">" << escape(title)
    << "</text>\n";
  const double slot = static_cast<double>(width) / static_cast<double>(panels.size());
  for (std::size_t p = 0; p < panels.size(); ++p) {
    const BarPanel& panel = panels[p];
    if (panel.positions.empty() || panel.positions.size() != panel.weights.size()) {
      throw ValidationError("bar panel needs matching positions and weights");
    }
    const double wmax = *std::max_element(panel.weights.begin(), panel.weights.end());
    const double pmin = panel.positions.front(), pmax = panel.positions.back();
    // Bars are one grid step wide; a single position gets a unit-wide range.
    double step = 1.0;
    if (panel.positions.size() > 1) step = (pmax - pmin) / static_cast<double>(panel.positions.size() - 1);
    const Frame f{slot * p + 55.0, 30.0, slot - 70.0, height - 75.0,
                  Range{pmin - 0.6 * step, pmax + 0.6 * step}, Range{0.0, wmax > 0.0 ? 1.05 * wmax : 1.0}};
    axes(s, f, panel.label, p == 0 ? "posterior mass" : "");
    const double bar = std::max(0.8 * step / (f.x.hi - f.x.lo) * f.width, 1.0);
    for (std::size_t i = 0; i < panel.positions.size(); ++i) {
      const double x = f.px(panel.positions[i]) - bar / 2;
      const double y = f.py(panel.weights[i]);
      s << "<rect x=\"" << num(x) << "\" y=\"" << num(y) << "\" width=\"" << num(bar) << "\" height=\""
        << num(f.top + f.height - y) << "\" fill=\"steelblue\"/>\n";
    }
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace dipolegrid::cli
