#include "popmeta/report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "popmeta/hash.hpp"

namespace popmeta {

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

std::string CsvTable::to_string(std::uint64_t config_hash) const {
  const std::string h = hex64(config_hash);
  std::string out = "config_hash";
  for (const auto& c : columns) out += "," + csv_field(c);
  out += "\r\n";
  for (const auto& row : rows) {
    if (row.size() != columns.size()) throw std::logic_error("csv row width does not match header");
    out += h;
    for (const auto& v : row) out += "," + csv_field(v);
    out += "\r\n";
  }
  return out;
}

CsvTable metrics_csv(const MetricsTable& t) {
  CsvTable csv;
  csv.columns = t.columns;
  for (const auto& r : t.rows) {
    std::vector<std::string> row;
    for (double v : r) row.push_back(format_number(v));
    csv.rows.push_back(std::move(row));
  }
  return csv;
}

void write_file_atomic(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << content;
    if (!out) throw std::runtime_error("failed writing " + path);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw std::runtime_error("cannot move into place: " + path);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// SVG

namespace {

std::string xml_escape(std::string_view s) {
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

std::string fixed(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string svg_open(int w, int h) {
  return "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" +
         std::to_string(w) + "\" height=\"" + std::to_string(h) + "\" font-family=\"sans-serif\" font-size=\"12\">\n";
}

std::string text(double x, double y, std::string_view s, std::string_view extra = "") {
  return "<text x=\"" + fixed(x) + "\" y=\"" + fixed(y) + "\" " + std::string(extra) + ">" + xml_escape(s) +
         "</text>\n";
}

// White to dark blue.
std::string blues(double t) {
  t = std::clamp(t, 0.0, 1.0);
  const int r = static_cast<int>(std::lround(247 - t * (247 - 8)));
  const int g = static_cast<int>(std::lround(251 - t * (251 - 48)));
  const int b = static_cast<int>(std::lround(255 - t * (255 - 107)));
  char buf[16];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
  return buf;
}

struct Axis {
  double lo, hi;
  double map(double v, double p0, double p1) const { return hi == lo ? p0 : p0 + (v - lo) / (hi - lo) * (p1 - p0); }
};

}  // namespace

std::string svg_heatmap(const std::vector<std::vector<double>>& cells, const std::string& title,
                        const std::string& row_label, const std::string& col_label) {
  const std::size_t n = cells.size();
  const int cell = 56, left = 70, top = 50;
  const int w = left + static_cast<int>(n) * cell + 30, h = top + static_cast<int>(n) * cell + 50;
  std::string s = svg_open(w, h);
  s += text(w / 2.0, 24, title, "text-anchor=\"middle\" font-size=\"14\"");
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < cells[i].size(); ++j) {
      const double v = cells[i][j];
      const double x = left + static_cast<double>(j) * cell, y = top + static_cast<double>(i) * cell;
      s += "<rect x=\"" + fixed(x) + "\" y=\"" + fixed(y) + "\" width=\"" + std::to_string(cell) + "\" height=\"" +
           std::to_string(cell) + "\" fill=\"" + blues(v) + "\" stroke=\"#ffffff\"/>\n";
      s += text(x + cell / 2.0, y + cell / 2.0 + 4, fixed(v, 3),
                std::string("text-anchor=\"middle\" fill=\"") + (v > 0.6 ? "#ffffff" : "#000000") + "\"");
    }
    s += text(left - 8, top + (static_cast<double>(i) + 0.5) * cell + 4, std::to_string(i), "text-anchor=\"end\"");
    s += text(left + (static_cast<double>(i) + 0.5) * cell, top + static_cast<double>(n) * cell + 16,
              std::to_string(i), "text-anchor=\"middle\"");
  }
  s += text(left + n * cell / 2.0, h - 10.0, col_label, "text-anchor=\"middle\"");
  s += text(16, top + n * cell / 2.0, row_label,
            "text-anchor=\"middle\" transform=\"rotate(-90 16 " + fixed(top + n * cell / 2.0) + ")\"");
  return s + "</svg>\n";
}

std::string svg_band_chart(const std::vector<DiversityPoint>& points, const std::string& title,
                           const std::string& y_label) {
  const int w = 560, h = 340, left = 60, right = 20, top = 40, bottom = 50;
  std::string s = svg_open(w, h);
  s += text(w / 2.0, 22, title, "text-anchor=\"middle\" font-size=\"14\"");
  const double x0 = left, x1 = w - right, y0 = h - bottom, y1 = top;
  s += "<line x1=\"" + fixed(x0) + "\" y1=\"" + fixed(y0) + "\" x2=\"" + fixed(x1) + "\" y2=\"" + fixed(y0) +
       "\" stroke=\"#000000\"/>\n";
  s += "<line x1=\"" + fixed(x0) + "\" y1=\"" + fixed(y0) + "\" x2=\"" + fixed(x0) + "\" y2=\"" + fixed(y1) +
       "\" stroke=\"#000000\"/>\n";
  const Axis ya{0.0, 1.0};
  for (int k = 0; k <= 4; ++k) {
    const double v = k / 4.0, y = ya.map(v, y0, y1);
    s += text(x0 - 6, y + 4, fixed(v), "text-anchor=\"end\"");
  }
  s += text(16, (y0 + y1) / 2, y_label,
            "text-anchor=\"middle\" transform=\"rotate(-90 16 " + fixed((y0 + y1) / 2) + ")\"");
  s += text((x0 + x1) / 2, h - 12.0, "outer iteration", "text-anchor=\"middle\"");
  if (!points.empty()) {
    const Axis xa{static_cast<double>(points.front().iteration), static_cast<double>(points.back().iteration)};
    std::string band, line;
    for (const auto& p : points) band += fixed(xa.map(static_cast<double>(p.iteration), x0, x1)) + "," +
                                         fixed(ya.map(p.max, y0, y1)) + " ";
    for (auto it = points.rbegin(); it != points.rend(); ++it) {
      band += fixed(xa.map(static_cast<double>(it->iteration), x0, x1)) + "," + fixed(ya.map(it->min, y0, y1)) + " ";
    }
    for (const auto& p : points) line += fixed(xa.map(static_cast<double>(p.iteration), x0, x1)) + "," +
                                         fixed(ya.map(p.mean, y0, y1)) + " ";
    s += "<polygon points=\"" + band + "\" fill=\"#9ecae1\" fill-opacity=\"0.5\" stroke=\"none\"/>\n";
    s += "<polyline points=\"" + line + "\" fill=\"none\" stroke=\"#08306b\" stroke-width=\"2\"/>\n";
    s += text(xa.map(xa.lo, x0, x1), y0 + 16, std::to_string(points.front().iteration), "text-anchor=\"middle\"");
    if (points.size() > 1) {
      s += text(x1, y0 + 16, std::to_string(points.back().iteration), "text-anchor=\"middle\"");
    }
  }
  return s + "</svg>\n";
}

std::string svg_bar_chart(const std::vector<BarSpec>& bars, const std::string& title, const std::string& y_label) {
  const int bw = 60, gap = 24, left = 60, top = 40, bottom = 60, plot_h = 240;
  const int w = left + static_cast<int>(bars.size()) * (bw + gap) + gap, h = top + plot_h + bottom;
  std::string s = svg_open(std::max(w, 240), h);
  s += text(std::max(w, 240) / 2.0, 22, title, "text-anchor=\"middle\" font-size=\"14\"");
  const double y0 = top + plot_h, y1 = top;
  const Axis ya{0.0, 1.0};
  for (int k = 0; k <= 4; ++k) {
    const double v = k / 4.0, y = ya.map(v, y0, y1);
    s += text(left - 6.0, y + 4, fixed(v), "text-anchor=\"end\"");
    s += "<line x1=\"" + std::to_string(left) + "\" y1=\"" + fixed(y) + "\" x2=\"" + std::to_string(w) + "\" y2=\"" +
         fixed(y) + "\" stroke=\"#dddddd\"/>\n";
  }
  s += text(16, (y0 + y1) / 2, y_label,
            "text-anchor=\"middle\" transform=\"rotate(-90 16 " + fixed((y0 + y1) / 2) + ")\"");
  for (std::size_t i = 0; i < bars.size(); ++i) {
    const double x = left + gap + static_cast<double>(i) * (bw + gap);
    const double top_y = ya.map(std::clamp(bars[i].mean, 0.0, 1.0), y0, y1);
    s += "<rect x=\"" + fixed(x) + "\" y=\"" + fixed(top_y) + "\" width=\"" + std::to_string(bw) + "\" height=\"" +
         fixed(y0 - top_y) + "\" fill=\"#3182bd\"/>\n";
    const double cx = x + bw / 2.0;
    const double lo = ya.map(std::clamp(bars[i].mean - bars[i].std, 0.0, 1.0), y0, y1);
    const double hi = ya.map(std::clamp(bars[i].mean + bars[i].std, 0.0, 1.0), y0, y1);
    s += "<line x1=\"" + fixed(cx) + "\" y1=\"" + fixed(lo) + "\" x2=\"" + fixed(cx) + "\" y2=\"" + fixed(hi) +
         "\" stroke=\"#000000\"/>\n";
    s += text(cx, y0 + 16, bars[i].label, "text-anchor=\"middle\"");
    s += text(cx, top_y - 6, fixed(bars[i].mean, 3), "text-anchor=\"middle\" font-size=\"10\"");
  }
  return s + "</svg>\n";
}

nlohmann::json to_json(const CrossPlay& cp) {
  nlohmann::json j = {{"accuracy", cp.accuracy},
                      {"episodes_per_cell", cp.episodes_per_cell},
                      {"diag_mean", cp.diag_mean}};
  j["offdiag_mean"] = cp.offdiag_mean ? nlohmann::json(*cp.offdiag_mean) : nlohmann::json(nullptr);
  j["offdiag_std"] = cp.offdiag_std ? nlohmann::json(*cp.offdiag_std) : nlohmann::json(nullptr);
  return j;
}

nlohmann::json to_json(const DiversityPoint& d) {
  return {{"iteration", d.iteration}, {"members", d.members}, {"mean", d.mean},
          {"std", d.std},             {"min", d.min},         {"max", d.max}};
}

}  // namespace popmeta
