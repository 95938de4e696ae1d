#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "met/errors.hpp"

namespace met {

struct MetricsRow {
  int epoch = 0;
  std::string split;  // "train" or "val"
  std::string exit;   // "1".."E" or "all"
  double ce = 0.0;
  double acc = 0.0;
  double graph_term = 0.0;
  double total_loss = 0.0;
  double lr = 0.0;

  bool operator==(const MetricsRow&) const = default;
};

inline constexpr const char* kMetricsHeader = "epoch,split,exit,ce,acc,graph_term,total_loss,lr";

inline void emit_metrics(const std::vector<MetricsRow>& history, const std::filesystem::path& path) {
  if (history.empty()) throw DataError("no metrics to write");
  std::ofstream out(path);
  if (!out) throw IoError("cannot write metrics to " + path.string());
  out << kMetricsHeader << '\n' << std::setprecision(17);
  for (const auto& r : history)
    out << r.epoch << ',' << r.split << ',' << r.exit << ',' << r.ce << ',' << r.acc << ','
        << r.graph_term << ',' << r.total_loss << ',' << r.lr << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

inline std::vector<MetricsRow> parse_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != kMetricsHeader) throw DataError("unexpected metrics header: " + line);
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string f[8];
    for (auto& s : f)
      if (!std::getline(ss, s, ',')) throw DataError("short metrics row: " + line);
    rows.push_back({std::stoi(f[0]), f[1], f[2], std::stod(f[3]), std::stod(f[4]), std::stod(f[5]),
                    std::stod(f[6]), std::stod(f[7])});
  }
  return rows;
}

}  // namespace met
