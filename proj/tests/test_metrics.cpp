#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "cvrnet/metrics.hpp"
#include "cvrnet/rng.hpp"
#include "doctest.h"
#include "test_helpers.hpp"

using namespace cvrnet;

#ifndef CVRNET_FIXTURE_DIR
#error "CVRNET_FIXTURE_DIR must point at the bundled confusion CSVs"
#endif

namespace {

ConfusionMatrix fixture(const std::string& name) {
  return load_confusion_csv(std::string(CVRNET_FIXTURE_DIR) + "/" + name);
}

/// Exhaustive per-sample counting oracle: recomputes every metric from the
/// raw (predicted, actual) pairs without touching the library's counts.
struct BruteForce {
  double accuracy = 0;
  std::vector<double> recall, precision, f1;

  BruteForce(const std::vector<int>& pred, const std::vector<int>& act, int k) {
    const double n = static_cast<double>(pred.size());
    int correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == act[i];
    accuracy = correct / n;
    for (int c = 0; c < k; ++c) {
      int tp = 0, fn = 0, fp = 0;
      for (std::size_t i = 0; i < pred.size(); ++i) {
        tp += pred[i] == c && act[i] == c;
        fn += pred[i] != c && act[i] == c;
        fp += pred[i] == c && act[i] != c;
      }
      recall.push_back(tp + fn > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0);
      precision.push_back(tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0);
      f1.push_back(2 * tp + fn + fp > 0 ? 2.0 * tp / (2.0 * tp + fn + fp) : 0.0);
    }
  }
};

}  // namespace

TEST_CASE("perfect predictions produce a diagonal matrix") {
  const ConfusionMatrix cm = confusion({0, 1, 2, 1}, {0, 1, 2, 1}, 3);
  CHECK(cm.diagonal() == 4);
  CHECK(cm.total() == 4);
  CHECK(cm.at(0, 1) == 0);
}

TEST_CASE("swapped predictions fill the anti-diagonal") {
  const ConfusionMatrix cm = confusion({0, 1}, {1, 0}, 2);
  CHECK(cm.at(0, 1) == 1);
  CHECK(cm.at(1, 0) == 1);
  CHECK(cm.diagonal() == 0);
}

TEST_CASE("labels outside [0, K) are rejected") {
  CHECK_THROWS_AS(confusion({0, 2}, {0, 1}, 2), ValueError);
  CHECK_THROWS_AS(confusion({0, -1}, {0, 1}, 2), ValueError);
}

TEST_CASE("binary task fixture reproduces the published per-class values") {
  const ConfusionMatrix cm = fixture("task1.csv");
  CHECK(cm.total() == 6356);
  CHECK(cm.at(0, 0) == 5848);
  const auto pc = per_class_metrics(cm);
  // NCP: 493 of 500 recalled; 493 of 501 predicted positives correct
  CHECK(pc[1].recall == doctest::Approx(0.986));
  CHECK(pc[1].precision == doctest::Approx(493.0 / 501.0));
  CHECK(pc[1].support == 500);
  const auto agg = aggregate_metrics(cm, pc);
  CHECK(agg.accuracy == doctest::Approx(6341.0 / 6356.0));
}

TEST_CASE("three-class fixture matches the printed class percentages") {
  const ConfusionMatrix cm = fixture("task4.csv");
  const auto pc = per_class_metrics(cm);
  CHECK(pc[0].recall == doctest::Approx(1522.0 / 1648.0));  // 92.35%
  CHECK(pc[0].support == 1648);
  const auto agg = aggregate_metrics(cm, pc);
  CHECK(agg.accuracy == doctest::Approx(6265.0 / 6519.0));  // 0.9610
}

TEST_CASE("small CT fixture accuracy") {
  const ConfusionMatrix cm = fixture("task5.csv");
  const auto agg = aggregate_metrics(cm, per_class_metrics(cm));
  CHECK(agg.accuracy == doctest::Approx(159.0 / 203.0));  // 0.7833
}

TEST_CASE("balanced one-of-each counts give one half everywhere") {
  ConfusionMatrix cm(2, {"a", "b"});
  cm.at(0, 0) = cm.at(0, 1) = cm.at(1, 0) = cm.at(1, 1) = 1;
  const auto pc = per_class_metrics(cm);
  for (const auto& m : pc) {
    CHECK(m.recall == doctest::Approx(0.5));
    CHECK(m.precision == doctest::Approx(0.5));
    CHECK(m.f1 == doctest::Approx(0.5));
  }
}

TEST_CASE("never-predicted classes warn instead of throwing") {
  ConfusionMatrix cm(2, {"a", "b"});
  cm.at(0, 0) = 3;
  cm.at(0, 1) = 2;  // class b never predicted
  const MetricsReport report = compute_metrics(cm);
  CHECK(report.per_class[1].precision == 0.0);
  CHECK(report.per_class[1].zero_prediction_warning);
  REQUIRE(report.warnings.size() == 1);
  CHECK(report.warnings[0].find("'b'") != std::string::npos);
}

TEST_CASE("weighted recall equals accuracy on random matrices") {
  Rng rng(99);
  for (int trial = 0; trial < 200; ++trial) {
    const int k = 2 + static_cast<int>(rng.below(3));
    ConfusionMatrix cm(k, {});
    for (int p = 0; p < k; ++p)
      for (int a = 0; a < k; ++a) cm.at(p, a) = static_cast<std::int64_t>(rng.below(40));
    bool ok = true;
    for (int a = 0; a < k; ++a) ok = ok && cm.col_sum(a) > 0;
    if (!ok || cm.total() == 0) continue;
    const auto agg = aggregate_metrics(cm, per_class_metrics(cm));
    CHECK(std::abs(agg.recall_weighted - agg.accuracy) < 1e-12);
  }
}

TEST_CASE("metrics lie in [0,1] and F1 sits between precision and recall") {
  Rng rng(123);
  for (int trial = 0; trial < 100; ++trial) {
    const int k = 2 + static_cast<int>(rng.below(3));
    ConfusionMatrix cm(k, {});
    for (int p = 0; p < k; ++p)
      for (int a = 0; a < k; ++a) cm.at(p, a) = static_cast<std::int64_t>(rng.below(30));
    if (cm.total() == 0) continue;
    for (const auto& m : per_class_metrics(cm)) {
      for (const double v : {m.recall, m.precision, m.f1}) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
      }
      if (m.precision > 0 && m.recall > 0) {
        CHECK(m.f1 >= std::min(m.precision, m.recall) - 1e-12);
        CHECK(m.f1 <= std::max(m.precision, m.recall) + 1e-12);
      }
    }
  }
}

TEST_CASE("metrics are invariant under sample permutation") {
  std::vector<int> pred{0, 1, 2, 0, 1, 2, 2, 0}, act{0, 1, 1, 0, 2, 2, 2, 1};
  const auto r1 = compute_metrics(confusion(pred, act, 3));
  // reverse both in lockstep
  std::reverse(pred.begin(), pred.end());
  std::reverse(act.begin(), act.end());
  const auto r2 = compute_metrics(confusion(pred, act, 3));
  CHECK(r1.aggregate.accuracy == r2.aggregate.accuracy);
  CHECK(r1.aggregate.f1_weighted == r2.aggregate.f1_weighted);
}

TEST_CASE("library metrics match the exhaustive counting oracle") {
  // every (pred, act) assignment for K <= 3, B <= 6, enumerated in base K^2;
  // mismatches REQUIRE with the offending code so a failure pinpoints itself
  std::int64_t checked = 0;
  for (const int k : {2, 3}) {
    for (int b = 1; b <= 6; ++b) {
      const int pairs = k * k;
      std::int64_t total = 1;
      for (int i = 0; i < b; ++i) total *= pairs;
      for (std::int64_t code = 0; code < total; ++code) {
        std::vector<int> pred(static_cast<std::size_t>(b)), act(static_cast<std::size_t>(b));
        std::int64_t c = code;
        for (int i = 0; i < b; ++i) {
          pred[static_cast<std::size_t>(i)] = static_cast<int>(c % k);
          act[static_cast<std::size_t>(i)] = static_cast<int>((c / k) % k);
          c /= pairs;
        }
        const auto report = compute_metrics(confusion(pred, act, k));
        const BruteForce oracle(pred, act, k);
        bool ok = std::abs(report.aggregate.accuracy - oracle.accuracy) < 1e-12;
        for (int cls = 0; cls < k && ok; ++cls) {
          const auto& m = report.per_class[static_cast<std::size_t>(cls)];
          ok = std::abs(m.recall - oracle.recall[static_cast<std::size_t>(cls)]) < 1e-12 &&
               std::abs(m.precision - oracle.precision[static_cast<std::size_t>(cls)]) < 1e-12 &&
               std::abs(m.f1 - oracle.f1[static_cast<std::size_t>(cls)]) < 1e-12;
        }
        if (!ok) {
          CAPTURE(k);
          CAPTURE(b);
          CAPTURE(code);
          REQUIRE(ok);
        }
        ++checked;
      }
    }
  }
  CHECK(checked == 5460 + 597870);  // sum of (K^2)^B for both K
}

TEST_CASE("fold averages") {
  const auto report_with_accuracy = [](std::int64_t correct, std::int64_t wrong) {
    ConfusionMatrix cm(2, {});
    cm.at(0, 0) = correct;
    cm.at(0, 1) = wrong;
    cm.at(1, 1) = 1000 - correct - wrong;
    return compute_metrics(cm);
  };

  SUBCASE("identical reports have zero spread") {
    const std::vector<MetricsReport> reports(5, report_with_accuracy(990, 10));
    const FoldAverage avg = fold_average(reports);
    CHECK(avg.accuracy.stddev == 0.0);
    CHECK(avg.accuracy.mean == doctest::Approx(0.99));
  }

  SUBCASE("a single report averages to itself") {
    const FoldAverage avg = fold_average({report_with_accuracy(900, 100)});
    CHECK(avg.n == 1);
    CHECK(avg.accuracy.mean == doctest::Approx(0.9));
    CHECK(avg.accuracy.stddev == 0.0);
  }

  SUBCASE("published per-fold accuracies average to 0.9976 +/- 0.0008") {
    std::vector<MetricsReport> reports;
    for (const std::int64_t correct : {998, 998, 996, 998, 998}) {
      reports.push_back(report_with_accuracy(correct, 1000 - correct));
    }
    const FoldAverage avg = fold_average(reports);
    CHECK(avg.accuracy.mean == doctest::Approx(0.9976).epsilon(1e-9));
    CHECK(avg.accuracy.stddev == doctest::Approx(0.0008).epsilon(1e-6));
  }

  SUBCASE("mixed class counts are rejected") {
    ConfusionMatrix cm3(3, {});
    cm3.at(0, 0) = 1;
    cm3.at(1, 1) = 1;
    cm3.at(2, 2) = 1;
    CHECK_THROWS_AS(fold_average({report_with_accuracy(1, 0), compute_metrics(cm3)}), ValueError);
  }
}

TEST_CASE("confusion CSV round trips exactly") {
  const ConfusionMatrix cm = fixture("task2.csv");
  const std::string csv = confusion_to_csv(cm);
  const ConfusionMatrix back = confusion_from_csv(csv);
  CHECK(back.counts == cm.counts);
  CHECK(back.class_names == cm.class_names);
  CHECK(confusion_to_csv(back) == csv);
}

TEST_CASE("non-square confusion CSVs are rejected") {
  CHECK_THROWS_AS(confusion_from_csv(",a,b\na,1,2\n"), FormatError);
  CHECK_THROWS_AS(confusion_from_csv(",a,b\na,1,2\nb,3\n"), FormatError);
  CHECK_THROWS_AS(confusion_from_csv(",a,b\na,1,x\nb,3,4\n"), FormatError);
}

TEST_CASE("report JSON parses back and re-emits byte-identically") {
  const MetricsReport report = compute_metrics(fixture("task3.csv"));
  const std::string json = report_to_json(report);
  const MetricsReport back = report_from_json(json);
  CHECK(report_to_json(back) == json);
  CHECK(back.aggregate.accuracy == doctest::Approx(report.aggregate.accuracy).epsilon(1e-15));
}

TEST_CASE("text report mirrors the published cell style") {
  const MetricsReport report = compute_metrics(fixture("task1.csv"));
  const std::string text = report_to_text(report);
  CHECK(text.find("5848 / 99.86%") != std::string::npos);
  CHECK(text.find("493 / 98.60%") != std::string::npos);
  CHECK(text.find("rows = predicted") != std::string::npos);
}

TEST_CASE("emit_report writes each format") {
  testutil::TempDir tmp("emit");
  const MetricsReport report = compute_metrics(fixture("task5.csv"));
  emit_report(report, ReportFormat::json, tmp.str("r.json"));
  emit_report(report, ReportFormat::csv, tmp.str("r.csv"));
  emit_report(report, ReportFormat::text, tmp.str("r.txt"));
  std::ifstream csv_in(tmp.str("r.csv"));
  std::string first;
  std::getline(csv_in, first);
  CHECK(first == ",NOR,NCP");
  CHECK_THROWS_AS(report_format_from_string("xml"), ValueError);
  CHECK_THROWS_AS(emit_report(report, ReportFormat::json, "/nonexistent_dir_xyz/r.json"), IoError);
}
