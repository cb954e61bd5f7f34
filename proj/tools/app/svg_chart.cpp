#include "svg_chart.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

namespace sqz::app {
namespace {

constexpr double kPanelW = 420, kPanelH = 300;
constexpr double kLeft = 70, kRight = 20, kTop = 40, kBottom = 50;
constexpr double kHeader = 40;

const char* const kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

std::string esc(const std::string& s) {
  std::string out;
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

std::string num(double v) {
  std::ostringstream o;
  o << std::fixed << std::setprecision(2) << v;
  return o.str();
}

std::string tick_label(double v) {
  std::ostringstream o;
  const double a = std::fabs(v);
  if (a != 0.0 && (a >= 1e6 || a < 1e-3)) {
    o << std::setprecision(3) << v;
  } else {
    o << std::setprecision(6) << v;
  }
  return o.str();
}

struct Range {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();

  void add(double v) {
    if (!std::isfinite(v)) return;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  void settle() {
    if (!std::isfinite(lo)) lo = 0.0, hi = 1.0;
    if (lo == hi) {
      const double pad = lo == 0.0 ? 1.0 : std::fabs(lo) * 0.1;
      lo -= pad;
      hi += pad;
    }
  }
};

void draw_panel(std::ostringstream& out, const Panel& p, double ox, double oy) {
  Range xr, yr;
  if (p.x_min != p.x_max) {
    xr.add(p.x_min), xr.add(p.x_max);
  } else {
    for (const auto& s : p.series) for (double v : s.x) xr.add(v);
  }
  if (p.y_min != p.y_max) {
    yr.add(p.y_min), yr.add(p.y_max);
  } else {
    for (const auto& s : p.series) for (double v : s.y) yr.add(v);
  }
  xr.settle();
  yr.settle();
  const auto xt = nice_ticks(xr.lo, xr.hi);
  const auto yt = nice_ticks(yr.lo, yr.hi);
  if (p.x_min == p.x_max) xr.lo = std::min(xr.lo, xt.front()), xr.hi = std::max(xr.hi, xt.back());
  if (p.y_min == p.y_max) yr.lo = std::min(yr.lo, yt.front()), yr.hi = std::max(yr.hi, yt.back());

  const double pw = kPanelW - kLeft - kRight, ph = kPanelH - kTop - kBottom;
  const double x0 = ox + kLeft, y0 = oy + kTop;
  auto sx = [&](double v) { return x0 + (v - xr.lo) / (xr.hi - xr.lo) * pw; };
  auto sy = [&](double v) { return y0 + ph - (v - yr.lo) / (yr.hi - yr.lo) * ph; };

  out << "<g class=\"panel\">\n";
  out << "<text x=\"" << num(ox + kPanelW / 2) << "\" y=\"" << num(oy + 24)
      << "\" text-anchor=\"middle\" font-size=\"14\" font-weight=\"bold\">" << esc(p.title) << "</text>\n";
  out << "<rect x=\"" << num(x0) << "\" y=\"" << num(y0) << "\" width=\"" << num(pw) << "\" height=\"" << num(ph)
      << "\" fill=\"none\" stroke=\"#333\"/>\n";
  for (double t : xt) {
    if (t < xr.lo - 1e-12 || t > xr.hi + 1e-12) continue;
    out << "<line x1=\"" << num(sx(t)) << "\" y1=\"" << num(y0) << "\" x2=\"" << num(sx(t)) << "\" y2=\""
        << num(y0 + ph) << "\" stroke=\"#ddd\"/>\n";
    out << "<text x=\"" << num(sx(t)) << "\" y=\"" << num(y0 + ph + 16)
        << "\" text-anchor=\"middle\" font-size=\"11\">" << tick_label(t) << "</text>\n";
  }
  for (double t : yt) {
    if (t < yr.lo - 1e-12 || t > yr.hi + 1e-12) continue;
    out << "<line x1=\"" << num(x0) << "\" y1=\"" << num(sy(t)) << "\" x2=\"" << num(x0 + pw) << "\" y2=\""
        << num(sy(t)) << "\" stroke=\"#ddd\"/>\n";
    out << "<text x=\"" << num(x0 - 6) << "\" y=\"" << num(sy(t) + 4)
        << "\" text-anchor=\"end\" font-size=\"11\">" << tick_label(t) << "</text>\n";
  }
  out << "<text x=\"" << num(x0 + pw / 2) << "\" y=\"" << num(oy + kPanelH - 12)
      << "\" text-anchor=\"middle\" font-size=\"12\">" << esc(p.x_label) << "</text>\n";
  const double ly = y0 + ph / 2;
  out << "<text x=\"" << num(ox + 16) << "\" y=\"" << num(ly) << "\" text-anchor=\"middle\" font-size=\"12\""
      << " transform=\"rotate(-90 " << num(ox + 16) << ' ' << num(ly) << ")\">" << esc(p.y_label) << "</text>\n";

  for (std::size_t si = 0; si < p.series.size(); ++si) {
    const auto& s = p.series[si];
    const char* color = kPalette[si % std::size(kPalette)];
    std::ostringstream pts;
    int n = 0;
    for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      pts << (n++ ? " " : "") << num(sx(s.x[i])) << ',' << num(sy(s.y[i]));
    }
    if (n > 1) {
      out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.8\" points=\"" << pts.str()
          << "\"/>\n";
    }
    for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      out << "<circle cx=\"" << num(sx(s.x[i])) << "\" cy=\"" << num(sy(s.y[i])) << "\" r=\"2.2\" fill=\"" << color
          << "\"/>\n";
    }
    const double lx = x0 + 8, lyy = y0 + 14 + 14 * static_cast<double>(si);
    out << "<line x1=\"" << num(lx) << "\" y1=\"" << num(lyy - 4) << "\" x2=\"" << num(lx + 16) << "\" y2=\""
        << num(lyy - 4) << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    out << "<text x=\"" << num(lx + 20) << "\" y=\"" << num(lyy) << "\" font-size=\"11\">" << esc(s.label)
        << "</text>\n";
  }
  out << "</g>\n";
}

}  // namespace

std::vector<double> nice_ticks(double lo, double hi, int target) {
  if (!(hi > lo)) return {lo};
  const double raw = (hi - lo) / std::max(1, target);
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  double step = mag;
  for (double m : {1.0, 2.0, 2.5, 5.0, 10.0}) {
    step = m * mag;
    if (step >= raw) break;
  }
  std::vector<double> ticks;
  const auto first = static_cast<long long>(std::floor(lo / step + 1e-9));
  const auto last = static_cast<long long>(std::ceil(hi / step - 1e-9));
  for (long long k = first; k <= last; ++k) ticks.push_back(static_cast<double>(k) * step);
  return ticks;
}

std::string render_svg(const std::string& title, const std::vector<Panel>& panels, int columns) {
  columns = std::max(1, std::min<int>(columns, static_cast<int>(std::max<std::size_t>(1, panels.size()))));
  const int rows = static_cast<int>((panels.size() + static_cast<std::size_t>(columns) - 1) / columns);
  const double w = kPanelW * columns, h = kHeader + kPanelH * std::max(1, rows);
  std::ostringstream out;
  out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(w) << "\" height=\"" << num(h)
      << "\" viewBox=\"0 0 " << num(w) << ' ' << num(h) << "\" font-family=\"sans-serif\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << num(w / 2) << "\" y=\"26\" text-anchor=\"middle\" font-size=\"16\">" << esc(title)
      << "</text>\n";
  for (std::size_t i = 0; i < panels.size(); ++i) {
    const double ox = kPanelW * static_cast<double>(i % static_cast<std::size_t>(columns));
    const double oy = kHeader + kPanelH * static_cast<double>(i / static_cast<std::size_t>(columns));
    draw_panel(out, panels[i], ox, oy);
  }
  out << "</svg>\n";
  return out.str();
}

}  // namespace sqz::app
