#pragma once

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "funmatch/common.hpp"

namespace funmatch {

/// One logged scalar. Splits: train/val/test. Metrics: distill_loss,
/// label_loss, top1, lr.
struct MetricsRow {
  int64_t step = 0;
  int64_t epoch = 0;
  std::string split;
  std::string metric;
  double value = 0;
};

inline std::string metrics_csv_header() { return "step,epoch,split,metric,value"; }

inline std::string format_metrics_row(const MetricsRow& row) {
  char value[64];
  std::snprintf(value, sizeof(value), "%.9g", row.value);
  std::ostringstream os;
  os << row.step << ',' << row.epoch << ',' << row.split << ',' << row.metric << ',' << value;
  return os.str();
}

class MetricsWriter {
 public:
  MetricsWriter() = default;
  explicit MetricsWriter(const std::string& path) : path_(path) {
    out_.open(path, std::ios::trunc);
    if (!out_) throw_error(ErrorKind::input, "cannot open " + path + " for writing");
    out_ << metrics_csv_header() << '\n';
  }

  void log(const MetricsRow& row) {
    rows_.push_back(row);
    if (out_.is_open()) {
      out_ << format_metrics_row(row) << '\n';
      out_.flush();
    }
  }

  const std::vector<MetricsRow>& rows() const { return rows_; }
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::ofstream out_;
  std::vector<MetricsRow> rows_;
};

inline std::vector<MetricsRow> read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw_error(ErrorKind::input, "cannot open " + path);
  std::vector<MetricsRow> rows;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    MetricsRow row;
    std::stringstream ss(line);
    std::string field;
    std::getline(ss, field, ',');
    row.step = std::stoll(field);
    std::getline(ss, field, ',');
    row.epoch = std::stoll(field);
    std::getline(ss, row.split, ',');
    std::getline(ss, row.metric, ',');
    std::getline(ss, field, ',');
    row.value = std::stod(field);
    rows.push_back(row);
  }
  return rows;
}

/// Last value of a metric on a split, e.g. the final train distill_loss.
inline double final_metric(const std::vector<MetricsRow>& rows, const std::string& split,
                           const std::string& metric) {
  for (size_t i = rows.size(); i-- > 0;)
    if (rows[i].split == split && rows[i].metric == metric) return rows[i].value;
  throw_error(ErrorKind::data, "no " + metric + " rows for split " + split);
}

}  // namespace funmatch
