#include "cvrnet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "json.hpp"

using nlohmann::json;

namespace cvrnet {

ConfusionMatrix::ConfusionMatrix(int k_, std::vector<std::string> names)
    : k(k_), class_names(std::move(names)), counts(static_cast<std::size_t>(k_) * k_, 0) {
  if (k < 2) throw ValueError("confusion matrix needs K >= 2");
  if (class_names.empty()) {
    for (int i = 0; i < k; ++i) class_names.push_back("class" + std::to_string(i));
  }
  if (static_cast<int>(class_names.size()) != k) {
    throw ValueError("confusion matrix has " + std::to_string(class_names.size()) +
                     " names for K=" + std::to_string(k));
  }
}

std::int64_t ConfusionMatrix::total() const {
  std::int64_t t = 0;
  for (const std::int64_t c : counts) t += c;
  return t;
}

std::int64_t ConfusionMatrix::diagonal() const {
  std::int64_t t = 0;
  for (int i = 0; i < k; ++i) t += at(i, i);
  return t;
}

std::int64_t ConfusionMatrix::col_sum(int actual) const {
  std::int64_t t = 0;
  for (int p = 0; p < k; ++p) t += at(p, actual);
  return t;
}

std::int64_t ConfusionMatrix::row_sum(int pred) const {
  std::int64_t t = 0;
  for (int a = 0; a < k; ++a) t += at(pred, a);
  return t;
}

ConfusionMatrix confusion(const std::vector<int>& predicted, const std::vector<int>& actual, int k,
                          std::vector<std::string> class_names) {
  if (predicted.size() != actual.size()) {
    throw ValueError("predicted/actual label lists differ in length");
  }
  ConfusionMatrix cm(k, std::move(class_names));
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const int p = predicted[i], a = actual[i];
    if (p < 0 || p >= k || a < 0 || a >= k) {
      throw ValueError("label out of range [0, K): predicted " + std::to_string(p) + ", actual " +
                       std::to_string(a));
    }
    cm.at(p, a) += 1;
  }
  return cm;
}

std::vector<PerClassMetrics> per_class_metrics(const ConfusionMatrix& cm) {
  const std::int64_t n = cm.total();
  std::vector<PerClassMetrics> out;
  for (int c = 0; c < cm.k; ++c) {
    PerClassMetrics m;
    m.name = cm.class_names[static_cast<std::size_t>(c)];
    m.tp = cm.at(c, c);
    m.fn = cm.col_sum(c) - m.tp;  // actual c, predicted elsewhere
    m.fp = cm.row_sum(c) - m.tp;  // predicted c, actually elsewhere
    m.tn = n - m.tp - m.fn - m.fp;
    m.support = m.tp + m.fn;
    m.recall = m.support > 0 ? static_cast<double>(m.tp) / static_cast<double>(m.support) : 0.0;
    if (m.tp + m.fp > 0) {
      m.precision = static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fp);
    } else {
      m.precision = 0.0;
      m.zero_prediction_warning = true;
    }
    const std::int64_t f1_den = 2 * m.tp + m.fn + m.fp;
    m.f1 = f1_den > 0 ? 2.0 * static_cast<double>(m.tp) / static_cast<double>(f1_den) : 0.0;
    out.push_back(std::move(m));
  }
  return out;
}

Aggregates aggregate_metrics(const ConfusionMatrix& cm, const std::vector<PerClassMetrics>& pc) {
  const std::int64_t n = cm.total();
  Aggregates agg;
  if (n == 0) throw ValueError("cannot aggregate an empty confusion matrix");
  agg.accuracy = static_cast<double>(cm.diagonal()) / static_cast<double>(n);
  for (const auto& m : pc) {
    const double w = static_cast<double>(m.support) / static_cast<double>(n);
    agg.recall_weighted += w * m.recall;
    agg.precision_weighted += w * m.precision;
    agg.f1_weighted += w * m.f1;
    agg.recall_macro += m.recall;
    agg.precision_macro += m.precision;
    agg.f1_macro += m.f1;
  }
  const double k = static_cast<double>(pc.size());
  agg.recall_macro /= k;
  agg.precision_macro /= k;
  agg.f1_macro /= k;
  return agg;
}

MetricsReport compute_metrics(const ConfusionMatrix& cm) {
  MetricsReport report;
  report.cm = cm;
  report.per_class = per_class_metrics(cm);
  report.aggregate = aggregate_metrics(cm, report.per_class);
  for (const auto& m : report.per_class) {
    if (m.zero_prediction_warning) {
      report.warnings.push_back("class '" + m.name +
                                "' was never predicted; precision defined as 0");
    }
    if (m.support == 0) {
      report.warnings.push_back("class '" + m.name + "' has zero support");
    }
  }
  return report;
}

FoldAverage fold_average(const std::vector<MetricsReport>& reports) {
  if (reports.empty()) throw ValueError("fold average over zero reports");
  const int k = reports.front().cm.k;
  for (const auto& r : reports) {
    if (r.cm.k != k) throw ValueError("fold average over reports with mixed K");
  }

  FoldAverage avg;
  avg.n = static_cast<int>(reports.size());
  const auto stat = [&](const std::function<double(const MetricsReport&)>& pick) {
    FoldAverage::Stat s;
    for (const auto& r : reports) s.mean += pick(r);
    s.mean /= static_cast<double>(reports.size());
    double var = 0;
    for (const auto& r : reports) {
      const double d = pick(r) - s.mean;
      var += d * d;
    }
    s.stddev = std::sqrt(var / static_cast<double>(reports.size()));
    return s;
  };
  avg.accuracy = stat([](const MetricsReport& r) { return r.aggregate.accuracy; });
  avg.recall_weighted = stat([](const MetricsReport& r) { return r.aggregate.recall_weighted; });
  avg.precision_weighted =
      stat([](const MetricsReport& r) { return r.aggregate.precision_weighted; });
  avg.f1_weighted = stat([](const MetricsReport& r) { return r.aggregate.f1_weighted; });
  avg.recall_macro = stat([](const MetricsReport& r) { return r.aggregate.recall_macro; });
  avg.precision_macro = stat([](const MetricsReport& r) { return r.aggregate.precision_macro; });
  avg.f1_macro = stat([](const MetricsReport& r) { return r.aggregate.f1_macro; });
  return avg;
}

// --- serialization ---------------------------------------------------------

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) {
    // trim surrounding whitespace
    const auto b = cell.find_first_not_of(" \t\r");
    const auto e = cell.find_last_not_of(" \t\r");
    cells.push_back(b == std::string::npos ? "" : cell.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') cells.push_back("");
  return cells;
}

}  // namespace

std::string confusion_to_csv(const ConfusionMatrix& cm) {
  std::ostringstream out;
  for (int a = 0; a < cm.k; ++a) out << "," << cm.class_names[static_cast<std::size_t>(a)];
  out << "\n";
  for (int p = 0; p < cm.k; ++p) {
    out << cm.class_names[static_cast<std::size_t>(p)];
    for (int a = 0; a < cm.k; ++a) out << "," << cm.at(p, a);
    out << "\n";
  }
  return out.str();
}

ConfusionMatrix confusion_from_csv(const std::string& csv_text) {
  std::istringstream in(csv_text);
  std::string line;
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    rows.push_back(split_csv_line(line));
  }
  if (rows.size() < 3) throw FormatError("confusion CSV needs a header and K >= 2 rows");
  const int k = static_cast<int>(rows.size()) - 1;
  for (const auto& r : rows) {
    if (static_cast<int>(r.size()) != k + 1) {
      throw FormatError("confusion CSV grid is not square: expected " + std::to_string(k + 1) +
                        " columns, got " + std::to_string(r.size()));
    }
  }

  std::vector<std::string> names(rows[0].begin() + 1, rows[0].end());
  ConfusionMatrix cm(k, names);
  for (int p = 0; p < k; ++p) {
    const auto& row = rows[static_cast<std::size_t>(p) + 1];
    if (row[0] != names[static_cast<std::size_t>(p)]) {
      throw FormatError("confusion CSV row label '" + row[0] + "' does not match column order");
    }
    for (int a = 0; a < k; ++a) {
      const std::string& cell = row[static_cast<std::size_t>(a) + 1];
      try {
        std::size_t pos = 0;
        const long long v = std::stoll(cell, &pos);
        if (pos != cell.size() || v < 0) throw std::invalid_argument(cell);
        cm.at(p, a) = v;
      } catch (const std::logic_error&) {
        throw FormatError("confusion CSV cell is not a count: '" + cell + "'");
      }
    }
  }
  return cm;
}

ConfusionMatrix load_confusion_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open confusion CSV: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return confusion_from_csv(buf.str());
}

namespace {

json report_to_json_obj(const MetricsReport& report) {
  json per_class = json::array();
  for (const auto& m : report.per_class) {
    per_class.push_back({{"name", m.name},
                         {"tp", m.tp},
                         {"fn", m.fn},
                         {"fp", m.fp},
                         {"tn", m.tn},
                         {"support", m.support},
                         {"recall", m.recall},
                         {"precision", m.precision},
                         {"f1", m.f1},
                         {"zero_prediction_warning", m.zero_prediction_warning}});
  }
  json rows = json::array();
  for (int p = 0; p < report.cm.k; ++p) {
    json row = json::array();
    for (int a = 0; a < report.cm.k; ++a) row.push_back(report.cm.at(p, a));
    rows.push_back(row);
  }
  return json{{"version", report.version},
              {"class_names", report.cm.class_names},
              {"confusion_rows_predicted", rows},
              {"per_class", per_class},
              {"aggregate",
               {{"accuracy", report.aggregate.accuracy},
                {"weighted",
                 {{"recall", report.aggregate.recall_weighted},
                  {"precision", report.aggregate.precision_weighted},
                  {"f1", report.aggregate.f1_weighted}}},
                {"macro",
                 {{"recall", report.aggregate.recall_macro},
                  {"precision", report.aggregate.precision_macro},
                  {"f1", report.aggregate.f1_macro}}}}},
              {"warnings", report.warnings}};
}

}  // namespace

std::string report_to_json(const MetricsReport& report) {
  return report_to_json_obj(report).dump(2) + "\n";
}

MetricsReport report_from_json(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("metrics report is not valid JSON: ") + e.what());
  }
  try {
    MetricsReport report;
    report.version = j.at("version").get<int>();
    const auto names = j.at("class_names").get<std::vector<std::string>>();
    const auto rows = j.at("confusion_rows_predicted");
    ConfusionMatrix cm(static_cast<int>(names.size()), names);
    for (int p = 0; p < cm.k; ++p) {
      for (int a = 0; a < cm.k; ++a) {
        cm.at(p, a) = rows.at(static_cast<std::size_t>(p)).at(static_cast<std::size_t>(a)).get<std::int64_t>();
      }
    }
    report = compute_metrics(cm);
    return report;
  } catch (const json::exception& e) {
    throw FormatError(std::string("metrics report JSON missing fields: ") + e.what());
  }
}

std::string report_to_text(const MetricsReport& report) {
  std::ostringstream out;
  const ConfusionMatrix& cm = report.cm;
  std::vector<std::int64_t> col_totals(static_cast<std::size_t>(cm.k), 0);
  for (int a = 0; a < cm.k; ++a) col_totals[static_cast<std::size_t>(a)] = cm.col_sum(a);

  out << "Confusion matrix (rows = predicted, columns = actual):\n";
  char buf[64];
  out << "            ";
  for (int a = 0; a < cm.k; ++a) {
    std::snprintf(buf, sizeof(buf), "%18s", cm.class_names[static_cast<std::size_t>(a)].c_str());
    out << buf;
  }
  out << "\n";
  for (int p = 0; p < cm.k; ++p) {
    std::snprintf(buf, sizeof(buf), "%12s", cm.class_names[static_cast<std::size_t>(p)].c_str());
    out << buf;
    for (int a = 0; a < cm.k; ++a) {
      const std::int64_t ct = col_totals[static_cast<std::size_t>(a)];
      const double pct = ct > 0 ? 100.0 * static_cast<double>(cm.at(p, a)) / static_cast<double>(ct) : 0.0;
      std::snprintf(buf, sizeof(buf), "%9lld / %5.2f%%", static_cast<long long>(cm.at(p, a)), pct);
      out << buf;
    }
    out << "\n";
  }

  out << "\nPer-class metrics:\n";
  std::snprintf(buf, sizeof(buf), "%12s %8s %8s %10s %8s\n", "class", "support", "recall",
                "precision", "f1");
  out << buf;
  for (const auto& m : report.per_class) {
    std::snprintf(buf, sizeof(buf), "%12s %8lld %8.4f %10.4f %8.4f\n", m.name.c_str(),
                  static_cast<long long>(m.support), m.recall, m.precision, m.f1);
    out << buf;
  }

  const Aggregates& a = report.aggregate;
  std::snprintf(buf, sizeof(buf), "\naccuracy  %8.4f\n", a.accuracy);
  out << buf;
  std::snprintf(buf, sizeof(buf), "weighted  recall %8.4f  precision %8.4f  f1 %8.4f\n",
                a.recall_weighted, a.precision_weighted, a.f1_weighted);
  out << buf;
  std::snprintf(buf, sizeof(buf), "macro     recall %8.4f  precision %8.4f  f1 %8.4f\n",
                a.recall_macro, a.precision_macro, a.f1_macro);
  out << buf;
  for (const auto& w : report.warnings) out << "warning: " << w << "\n";
  return out.str();
}

std::string fold_average_to_json(const FoldAverage& avg) {
  const auto stat = [](const FoldAverage::Stat& s) {
    return json{{"mean", s.mean}, {"std", s.stddev}};
  };
  json j{{"n", avg.n},
         {"accuracy", stat(avg.accuracy)},
         {"weighted",
          {{"recall", stat(avg.recall_weighted)},
           {"precision", stat(avg.precision_weighted)},
           {"f1", stat(avg.f1_weighted)}}},
         {"macro",
          {{"recall", stat(avg.recall_macro)},
           {"precision", stat(avg.precision_macro)},
           {"f1", stat(avg.f1_macro)}}}};
  return j.dump(2) + "\n";
}

std::string fold_average_to_text(const FoldAverage& avg) {
  char buf[128];
  std::ostringstream out;
  out << "Average over " << avg.n << " folds (mean +/- std):\n";
  const auto line = [&](const char* name, const FoldAverage::Stat& s) {
    std::snprintf(buf, sizeof(buf), "%-20s %.4f +/- %.4f\n", name, s.mean, s.stddev);
    out << buf;
  };
  line("accuracy", avg.accuracy);
  line("recall (weighted)", avg.recall_weighted);
  line("precision (weighted)", avg.precision_weighted);
  line("f1 (weighted)", avg.f1_weighted);
  line("recall (macro)", avg.recall_macro);
  line("precision (macro)", avg.precision_macro);
  line("f1 (macro)", avg.f1_macro);
  return out.str();
}

ReportFormat report_format_from_string(const std::string& name) {
  if (name == "json") return ReportFormat::json;
  if (name == "csv") return ReportFormat::csv;
  if (name == "text") return ReportFormat::text;
  throw ValueError("unknown report format: " + name + " (expected json, csv or text)");
}

void emit_report(const MetricsReport& report, ReportFormat format, const std::string& path) {
  std::string payload;
  switch (format) {
    case ReportFormat::json:
      payload = report_to_json(report);
      break;
    case ReportFormat::csv:
      payload = confusion_to_csv(report.cm);
      break;
    case ReportFormat::text:
      payload = report_to_text(report);
      break;
  }
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw IoError("cannot write report: " + path);
  out << payload;
  if (!out) throw IoError("failed writing report: " + path);
}

}  // namespace cvrnet
