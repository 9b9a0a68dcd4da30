#pragma once

// Result tables: "mean±std" cells rounded half away from zero to 3 decimals.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "pheme/experiment.hpp"

namespace pheme {

// Decimal rounding of x to `digits` places, half away from zero. The value
// is first snapped to 1e-9 so binary representation error (0.9655 is stored
// as 0.96549999...) does not decide the tie.
inline std::string format_fixed(double x, int digits = 3) {
  const long long snapped = std::llround(x * 1e9);
  long long scale = 1;
  for (int i = 0; i < 9 - digits; ++i) scale *= 10;
  const long long mag = std::llabs(snapped);
  const long long rounded = (mag + scale / 2) / scale;
  long long unit = 1;
  for (int i = 0; i < digits; ++i) unit *= 10;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s%lld.%0*lld", (snapped < 0 && rounded != 0) ? "-" : "", rounded / unit, digits,
                rounded % unit);
  return buf;
}

inline std::string format_mean_std(double mean, double std) { return format_fixed(mean) + "±" + format_fixed(std); }

inline std::string exact(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline constexpr const char* kReportCsvHeader = "disease,method,metric,mean,std,formatted,folds,seed,config_hash";
inline constexpr const char* kFoldsCsvHeader = "disease,method,metric,fold,value";

inline std::string render_csv(const std::vector<MetricsReport>& reports) {
  std::ostringstream os;
  os << kReportCsvHeader << '\n';
  for (const auto& r : reports)
    for (std::size_t i = 0; i < 4; ++i)
      os << r.disease << ',' << r.method << ',' << kMetricNames[i] << ',' << exact(metric_value(r.mean, i)) << ','
         << exact(metric_value(r.std, i)) << ',' << format_mean_std(metric_value(r.mean, i), metric_value(r.std, i))
         << ',' << r.folds.size() << ',' << r.seed << ',' << r.config_hash << '\n';
  return os.str();
}

inline std::string render_folds_csv(const std::vector<MetricsReport>& reports) {
  std::ostringstream os;
  os << kFoldsCsvHeader << '\n';
  for (const auto& r : reports)
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t f = 0; f < r.folds.size(); ++f)
        os << r.disease << ',' << r.method << ',' << kMetricNames[i] << ',' << f << ','
           << exact(metric_value(r.folds[f], i)) << '\n';
  return os.str();
}

// Grid layout: one row per (disease, metric), one column per method.
inline std::string render_table_text(const std::vector<MetricsReport>& reports) {
  std::vector<std::string> diseases, methods;
  auto add = [](std::vector<std::string>& v, const std::string& s) {
    if (std::find(v.begin(), v.end(), s) == v.end()) v.push_back(s);
  };
  for (const auto& r : reports) add(diseases, r.disease), add(methods, r.method);

  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> header = {"disease", "metric"};
  header.insert(header.end(), methods.begin(), methods.end());
  rows.push_back(header);
  for (const auto& d : diseases)
    for (std::size_t i = 0; i < 4; ++i) {
      std::vector<std::string> row = {d, kMetricNames[i]};
      for (const auto& m : methods) {
        std::string cell = "-";
        for (const auto& r : reports)
          if (r.disease == d && r.method == m) cell = format_mean_std(metric_value(r.mean, i), metric_value(r.std, i));
        row.push_back(cell);
      }
      rows.push_back(std::move(row));
    }

  // "±" is two bytes but one column.
  auto width = [](const std::string& s) {
    std::size_t w = 0;
    for (unsigned char c : s) w += (c & 0xC0) != 0x80;
    return w;
  };
  std::vector<std::size_t> widths(header.size(), 0);
  for (const auto& row : rows)
    for (std::size_t c = 0; c < row.size(); ++c) widths[c] = std::max(widths[c], width(row[c]));
  std::ostringstream os;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      os << (c ? " | " : "") << rows[r][c];
      if (c + 1 < rows[r].size()) os << std::string(widths[c] - width(rows[r][c]), ' ');
    }
    os << '\n';
    if (r == 0) {
      for (std::size_t c = 0; c < widths.size(); ++c) os << (c ? "-+-" : "") << std::string(widths[c], '-');
      os << '\n';
    }
  }
  return os.str();
}

// Rebuilds reports (and their aggregates) from a folds CSV.
inline std::vector<MetricsReport> parse_folds_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != kFoldsCsvHeader) throw ValidationError("folds csv: unexpected header");
  std::vector<MetricsReport> reports;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 5) throw ValidationError("folds csv: line " + std::to_string(lineno) + " needs 5 fields");
    std::size_t metric = 4;
    for (std::size_t i = 0; i < 4; ++i)
      if (cells[2] == kMetricNames[i]) metric = i;
    if (metric == 4) throw ValidationError("folds csv: unknown metric " + cells[2]);
    MetricsReport* r = nullptr;
    for (auto& x : reports)
      if (x.disease == cells[0] && x.method == cells[1]) r = &x;
    if (!r) {
      reports.push_back({});
      r = &reports.back();
      r->disease = cells[0];
      r->method = cells[1];
    }
    std::size_t fold = 0;
    double value = 0.0;
    try {
      fold = std::stoul(cells[3]);
      value = std::stod(cells[4]);
    } catch (const std::exception&) {
      throw ValidationError("folds csv: line " + std::to_string(lineno) + " has a non-numeric cell");
    }
    if (r->folds.size() <= fold) r->folds.resize(fold + 1);
    set_metric(r->folds[fold], metric, value);
  }
  for (auto& r : reports) r.aggregate();
  return reports;
}

struct ReportFiles {
  std::filesystem::path csv, folds, text;
};

inline ReportFiles write_reports(const std::vector<MetricsReport>& reports, const std::filesystem::path& dir) {
  if (reports.empty()) throw ValidationError("no reports to render");
  std::filesystem::create_directories(dir);
  ReportFiles files{dir / "report.csv", dir / "folds.csv", dir / "report.txt"};
  auto put = [](const std::filesystem::path& p, const std::string& s) {
    std::ofstream os(p, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + p.string());
    os << s;
  };
  put(files.csv, render_csv(reports));
  put(files.folds, render_folds_csv(reports));
  put(files.text, render_table_text(reports));
  return files;
}

}  // namespace pheme
