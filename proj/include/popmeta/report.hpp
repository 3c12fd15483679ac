#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "popmeta/eval.hpp"
#include "popmeta/train.hpp"

namespace popmeta {

/// Shortest text that parses back to the same double.
std::string format_number(double v);

/// RFC-4180 field quoting.
std::string csv_field(std::string_view s);

/// CSV table whose first column is the config hash, so every row carries it.
struct CsvTable {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  std::string to_string(std::uint64_t config_hash) const;
};

CsvTable metrics_csv(const MetricsTable& t);

/// Writes through a temporary file and rename.
void write_file_atomic(const std::string& path, const std::string& content);
std::string read_file(const std::string& path);

// SVG 1.1 charts.
std::string svg_heatmap(const std::vector<std::vector<double>>& cells, const std::string& title,
                        const std::string& row_label, const std::string& col_label);
std::string svg_band_chart(const std::vector<DiversityPoint>& points, const std::string& title,
                           const std::string& y_label);

struct BarSpec {
  std::string label;
  double mean = 0.0;
  double std = 0.0;
};
std::string svg_bar_chart(const std::vector<BarSpec>& bars, const std::string& title, const std::string& y_label);

nlohmann::json to_json(const CrossPlay& cp);
nlohmann::json to_json(const DiversityPoint& d);

}  // namespace popmeta
