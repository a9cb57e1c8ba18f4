#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "csamoe/metrics.hpp"

using namespace csamoe;

namespace {

double pair_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double credit = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[i] != 1 || y[j] != 0) continue;
      pairs += 1;
      if (s[i] > s[j]) credit += 1;
      else if (s[i] == s[j]) credit += 0.5;
    }
  return credit / pairs;
}

MetricsReport report(double acc, double prec, double rec, double f1, double auc) {
  MetricsReport r;
  r.accuracy = acc;
  r.precision = prec;
  r.recall = rec;
  r.f1 = f1;
  r.auc = auc;
  return r;
}

}  // namespace

TEST(Confusion, Examples) {
  const std::vector<double> s{0.9, 0.8, 0.3, 0.1};
  const std::vector<int> y{1, 1, 0, 0};
  const auto c = confusion(s, y);
  EXPECT_EQ(c.tp, 2u);
  EXPECT_EQ(c.tn, 2u);
  EXPECT_EQ(c.fp, 0u);
  EXPECT_EQ(c.fn, 0u);

  const std::vector<double> half(4, 0.5);
  const auto h = confusion(half, y);
  EXPECT_EQ(h.tp + h.fp, 4u);

  const std::vector<double> s2{0.6, 0.4};
  const std::vector<int> y2{0, 1};
  const auto c2 = confusion(s2, y2);
  EXPECT_EQ(c2.fp, 1u);
  EXPECT_EQ(c2.fn, 1u);
}

TEST(Confusion, Errors) {
  const std::vector<double> none;
  const std::vector<int> no_labels;
  EXPECT_THROW(confusion(none, no_labels), UsageError);
  const std::vector<double> s{0.1};
  const std::vector<int> bad{2};
  EXPECT_THROW(confusion(s, bad), UsageError);
  const std::vector<int> two{0, 1};
  EXPECT_THROW(confusion(s, two), DimensionError);
}

TEST(BasicMetrics, Examples) {
  const auto perfect = basic_metrics({5, 0, 5, 0});
  EXPECT_EQ(perfect.accuracy, 1.0);
  EXPECT_EQ(perfect.precision, 1.0);
  EXPECT_EQ(perfect.recall, 1.0);
  EXPECT_EQ(perfect.f1, 1.0);

  const auto m = basic_metrics({3, 1, 4, 2});
  EXPECT_DOUBLE_EQ(m.precision, 0.75);
  EXPECT_DOUBLE_EQ(m.recall, 0.6);
  EXPECT_DOUBLE_EQ(m.f1, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(m.accuracy, 0.7);

  const auto d = basic_metrics({0, 0, 4, 3});
  EXPECT_EQ(d.precision, 0.0);
  EXPECT_TRUE(d.precision_undefined);
  EXPECT_FALSE(d.recall_undefined);
  EXPECT_TRUE(d.f1_undefined);
}

TEST(BasicMetrics, MajorityConstantPredictor) {
  std::vector<int> y(70, 0);
  std::fill(y.begin(), y.begin() + 25, 1);
  const std::vector<double> s(70, 0.0);
  EXPECT_DOUBLE_EQ(basic_metrics(confusion(s, y)).accuracy, 45.0 / 70.0);
}

TEST(RocAuc, Examples) {
  const std::vector<int> y{1, 0, 1, 0};
  const std::vector<double> s{0.9, 0.8, 0.3, 0.1};
  EXPECT_DOUBLE_EQ(roc_auc(s, y).auc, 0.75);
  const std::vector<double> sep{0.9, 0.1, 0.8, 0.2};
  EXPECT_DOUBLE_EQ(roc_auc(sep, y).auc, 1.0);
  const std::vector<double> flat(4, 0.3);
  EXPECT_DOUBLE_EQ(roc_auc(flat, y).auc, 0.5);
  const std::vector<int> one_class{1, 1, 1, 1};
  EXPECT_THROW(roc_auc(s, one_class), UsageError);
}

TEST(RocAuc, PointsAtEveryDistinctThreshold) {
  const std::vector<int> y{1, 0, 1, 0, 1};
  const std::vector<double> s{0.9, 0.8, 0.8, 0.1, 0.05};
  const auto r = roc_auc(s, y);
  ASSERT_EQ(r.points.size(), 5u);
  EXPECT_TRUE(std::isinf(r.points[0].threshold));
  EXPECT_EQ(r.points[0].fpr, 0.0);
  EXPECT_EQ(r.points.back().fpr, 1.0);
  EXPECT_EQ(r.points.back().tpr, 1.0);
  for (std::size_t i = 1; i < r.points.size(); ++i) {
    EXPECT_GE(r.points[i].fpr, r.points[i - 1].fpr);
    EXPECT_GE(r.points[i].tpr, r.points[i - 1].tpr);
    EXPECT_LT(r.points[i].threshold, r.points[i - 1].threshold);
  }
  double trapezoid = 0;
  for (std::size_t i = 1; i < r.points.size(); ++i)
    trapezoid += (r.points[i].fpr - r.points[i - 1].fpr) * (r.points[i].tpr + r.points[i - 1].tpr) / 2;
  EXPECT_NEAR(trapezoid, r.auc, 1e-12);
}

TEST(RocAuc, MatchesPairEnumerationOnRandomInstancesWithTies) {
  std::mt19937_64 g(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + g() % 199;
    std::vector<double> s(n);
    std::vector<int> y(n);
    const int levels = 1 + static_cast<int>(g() % 12);  // few levels force ties
    const bool coarse = trial % 2 == 0;
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = static_cast<int>(g() % 2);
      s[i] = coarse ? static_cast<double>(g() % levels) / levels : std::uniform_real_distribution<>(0, 1)(g);
    }
    y[0] = 0;
    y[1] = 1;
    EXPECT_EQ(roc_auc(s, y).auc, pair_auc(s, y)) << "trial " << trial;
  }
}

TEST(RocAuc, MonotoneTransformAndComplement) {
  std::mt19937_64 g(7);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 10 + g() % 100;
    std::vector<double> s(n), t(n);
    std::vector<int> y(n), yc(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = std::uniform_real_distribution<>(-3, 3)(g);
      t[i] = std::exp(2 * s[i]) + 5;
      y[i] = static_cast<int>(g() % 2);
    }
    y[0] = 0;
    y[1] = 1;
    for (std::size_t i = 0; i < n; ++i) yc[i] = 1 - y[i];
    const double a = roc_auc(s, y).auc;
    EXPECT_NEAR(a, roc_auc(t, y).auc, 1e-12);
    EXPECT_NEAR(a + roc_auc(s, yc).auc, 1.0, 1e-12);
  }
}

TEST(Aggregate, MeanAndSampleSd) {
  const auto same = aggregate_runs({report(0.8, 0.7, 0.6, 0.5, 0.9), report(0.8, 0.7, 0.6, 0.5, 0.9)});
  ASSERT_TRUE(same.sd);
  EXPECT_EQ(same.sd->accuracy, 0.0);
  EXPECT_EQ(same.sd->auc, 0.0);

  const auto two = aggregate_runs({report(0.9, 0, 0, 0, 0), report(1.0, 0, 0, 0, 0)});
  EXPECT_DOUBLE_EQ(two.mean.accuracy, 0.95);
  EXPECT_NEAR(two.sd->accuracy, std::sqrt(0.005), 1e-15);
  EXPECT_NEAR(two.sd->accuracy, 0.0707, 1e-4);

  const auto one = aggregate_runs({report(0.5, 0.4, 0.3, 0.2, 0.1)});
  EXPECT_FALSE(one.sd);
  EXPECT_EQ(one.mean.recall, 0.3);
  EXPECT_THROW(aggregate_runs({}), UsageError);
}

TEST(Golden, MetricsCsv) {
  EXPECT_EQ(metrics_csv({report(0.95, 0.9, 1, 0.9473684211, 0.99), report(1, 1, 1, 1, 1)}, {"run_0", "run_1"}),
            "run_id,accuracy,precision,recall,f1,auc\n"
            "run_0,0.95,0.9,1,0.9473684211,0.99\n"
            "run_1,1,1,1,1,1\n");
}

TEST(Golden, SummaryCsv) {
  const auto a = aggregate_runs({report(0.9, 0.8, 1.0, 0.5, 0.75), report(1.0, 1.0, 1.0, 0.5, 1.0)});
  EXPECT_EQ(metrics_summary_csv(a),
            "stat,accuracy,precision,recall,f1,auc\n"
            "mean,0.95,0.9,1,0.5,0.875\n"
            "sd,0.07071067812,0.1414213562,0,0,0.1767766953\n");
  EXPECT_EQ(metrics_summary_csv(aggregate_runs({report(1, 1, 1, 1, 1)})),
            "stat,accuracy,precision,recall,f1,auc\n"
            "mean,1,1,1,1,1\n"
            "sd,,,,,\n");
}

TEST(Golden, RocCsv) {
  const std::vector<int> y{1, 0, 1, 0};
  const std::vector<double> s{0.9, 0.8, 0.3, 0.1};
  EXPECT_EQ(roc_csv(roc_auc(s, y)),
            "fpr,tpr,threshold\n"
            "0,0,inf\n"
            "0,0.5,0.9\n"
            "0.5,0.5,0.8\n"
            "0.5,1,0.3\n"
            "1,1,0.1\n");
}

TEST(Golden, SummaryTable) {
  const auto a = aggregate_runs({report(0.9, 0.8, 1.0, 0.5, 0.75), report(1.0, 1.0, 1.0, 0.5, 1.0)});
  const std::string t = format_summary_table({{"csa_moe", a}});
  EXPECT_NE(t.find("Accuracy(%)"), std::string::npos);
  EXPECT_NE(t.find("95.00 ± 7.07"), std::string::npos) << t;
  EXPECT_NE(t.find("87.50 ± 17.68"), std::string::npos) << t;
}

TEST(Evaluate, ThresholdIsRecorded) {
  const std::vector<int> y{1, 0, 1, 0};
  const std::vector<double> s{0.9, 0.8, 0.3, 0.1};
  const auto r = evaluate_scores(s, y);
  EXPECT_EQ(r.threshold, 0.5);
  EXPECT_EQ(r.n, 4u);
  EXPECT_DOUBLE_EQ(r.accuracy, 0.5);
  EXPECT_DOUBLE_EQ(r.auc, 0.75);
}
