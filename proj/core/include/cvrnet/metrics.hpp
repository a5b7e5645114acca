#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cvrnet/errors.hpp"

namespace cvrnet {

/// K×K integer counts, rows = predicted class, columns = actual class.
struct ConfusionMatrix {
  int k = 0;
  std::vector<std::string> class_names;
  std::vector<std::int64_t> counts;  // row-major, counts[pred * k + actual]

  ConfusionMatrix() = default;
  ConfusionMatrix(int k_, std::vector<std::string> names);

  std::int64_t& at(int pred, int actual) { return counts[static_cast<std::size_t>(pred) * k + actual]; }
  std::int64_t at(int pred, int actual) const { return counts[static_cast<std::size_t>(pred) * k + actual]; }
  std::int64_t total() const;
  std::int64_t diagonal() const;
  std::int64_t col_sum(int actual) const;   // class support
  std::int64_t row_sum(int pred) const;     // predicted positives
};

ConfusionMatrix confusion(const std::vector<int>& predicted, const std::vector<int>& actual, int k,
                          std::vector<std::string> class_names = {});

/// One-vs-rest counts and derived metrics per class. Precision with zero
/// predicted positives is defined as 0 and flagged, never thrown.
struct PerClassMetrics {
  std::string name;
  std::int64_t tp = 0, fn = 0, fp = 0, tn = 0;
  std::int64_t support = 0;
  double recall = 0;
  double precision = 0;
  double f1 = 0;
  bool zero_prediction_warning = false;
};

enum class AverageMode { weighted, macro };

struct Aggregates {
  double accuracy = 0;
  double recall_weighted = 0, precision_weighted = 0, f1_weighted = 0;
  double recall_macro = 0, precision_macro = 0, f1_macro = 0;
};

struct MetricsReport {
  int version = 1;
  ConfusionMatrix cm;
  std::vector<PerClassMetrics> per_class;
  Aggregates aggregate;
  std::vector<std::string> warnings;
};

std::vector<PerClassMetrics> per_class_metrics(const ConfusionMatrix& cm);
Aggregates aggregate_metrics(const ConfusionMatrix& cm, const std::vector<PerClassMetrics>& pc);
MetricsReport compute_metrics(const ConfusionMatrix& cm);

/// Cross-fold mean and population standard deviation per aggregate metric.
struct FoldAverage {
  struct Stat {
    double mean = 0;
    double stddev = 0;
  };
  int n = 0;
  Stat accuracy, recall_weighted, precision_weighted, f1_weighted;
  Stat recall_macro, precision_macro, f1_macro;
};

FoldAverage fold_average(const std::vector<MetricsReport>& reports);

// --- serialization ---------------------------------------------------------

/// CSV grid: header row of actual-class names, then one row per predicted
/// class (name + counts). This is also the `metrics` command input format.
std::string confusion_to_csv(const ConfusionMatrix& cm);
ConfusionMatrix confusion_from_csv(const std::string& csv_text);
ConfusionMatrix load_confusion_csv(const std::string& path);

/// Canonical JSON: parsing and re-emitting reproduces the bytes.
std::string report_to_json(const MetricsReport& report);
MetricsReport report_from_json(const std::string& json_text);

/// Human-readable table; confusion cells show count and the percentage of
/// their actual-class column.
std::string report_to_text(const MetricsReport& report);

std::string fold_average_to_json(const FoldAverage& avg);
std::string fold_average_to_text(const FoldAverage& avg);

enum class ReportFormat { json, csv, text };
ReportFormat report_format_from_string(const std::string& name);
void emit_report(const MetricsReport& report, ReportFormat format, const std::string& path);

}  // namespace cvrnet
