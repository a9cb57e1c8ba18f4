#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "csamoe/errors.hpp"

namespace csamoe {

struct Confusion {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::size_t n() const { return tp + fp + tn + fn; }
};

/// Predicts positive iff score >= threshold.
inline Confusion confusion(std::span<const double> scores, std::span<const int> labels,
                           double threshold = 0.5) {
  if (scores.size() != labels.size())
    throw DimensionError("confusion: " + std::to_string(scores.size()) + " scores vs " +
                         std::to_string(labels.size()) + " labels");
  if (scores.empty()) throw UsageError("confusion of zero samples");
  Confusion c;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw UsageError("labels must be 0 or 1");
    const bool pos = scores[i] >= threshold;
    if (labels[i] == 1) (pos ? c.tp : c.fn)++;
    else (pos ? c.fp : c.tn)++;
  }
  return c;
}

struct BasicMetrics {
  double accuracy = 0, precision = 0, recall = 0, f1 = 0;
  bool precision_undefined = false, recall_undefined = false, f1_undefined = false;
};

/// Zero denominators give 0 and set the matching flag.
inline BasicMetrics basic_metrics(const Confusion& c) {
  BasicMetrics m;
  const double n = static_cast<double>(c.n());
  m.accuracy = n > 0 ? static_cast<double>(c.tp + c.tn) / n : 0.0;
  if (c.tp + c.fp == 0) m.precision_undefined = true;
  else m.precision = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
  if (c.tp + c.fn == 0) m.recall_undefined = true;
  else m.recall = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  if (m.precision + m.recall == 0) m.f1_undefined = true;
  else m.f1 = 2 * m.precision * m.recall / (m.precision + m.recall);
  return m;
}

struct RocPoint {
  double fpr, tpr, threshold;
};

struct RocResult {
  double auc = 0;
  std::vector<RocPoint> points;  // starts at (0,0,+inf), ends at (1,1,min score)
};

/// AUC as the Mann-Whitney statistic with half credit for ties, computed by
/// sorting; ROC points at every distinct score threshold.
inline RocResult roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size())
    throw DimensionError("roc_auc: " + std::to_string(scores.size()) + " scores vs " +
                         std::to_string(labels.size()) + " labels");
  std::size_t npos = 0, nneg = 0;
  for (int l : labels) (l == 1 ? npos : nneg)++;
  if (npos == 0 || nneg == 0) throw UsageError("roc_auc needs both classes present");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  RocResult r;
  r.points.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
  double credit = 0;  // concordant + 0.5·tied, scaled later
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i, gp = 0, gn = 0;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      (labels[idx[j]] == 1 ? gp : gn)++;
      ++j;
    }
    // positives in this group beat every negative seen later; ties within the group get half
    credit += static_cast<double>(gp) * static_cast<double>(nneg - fp - gn) + 0.5 * gp * gn;
    tp += gp;
    fp += gn;
    r.points.push_back({static_cast<double>(fp) / nneg, static_cast<double>(tp) / npos, scores[idx[i]]});
    i = j;
  }
  r.auc = credit / (static_cast<double>(npos) * static_cast<double>(nneg));
  return r;
}

struct MetricsReport {
  double accuracy = 0, precision = 0, recall = 0, f1 = 0, auc = 0;
  double threshold = 0.5;
  std::size_t n = 0;
  bool precision_undefined = false, recall_undefined = false;
};

inline MetricsReport evaluate_scores(std::span<const double> scores, std::span<const int> labels,
                                     double threshold = 0.5) {
  const auto c = confusion(scores, labels, threshold);
  const auto m = basic_metrics(c);
  MetricsReport r;
  r.accuracy = m.accuracy;
  r.precision = m.precision;
  r.recall = m.recall;
  r.f1 = m.f1;
  r.precision_undefined = m.precision_undefined;
  r.recall_undefined = m.recall_undefined;
  r.threshold = threshold;
  r.n = c.n();
  r.auc = roc_auc(scores, labels).auc;
  return r;
}

struct RunAggregate {
  std::size_t runs = 0;
  MetricsReport mean;
  std::optional<MetricsReport> sd;  // sample SD; absent for a single run
};

inline RunAggregate aggregate_runs(const std::vector<MetricsReport>& reports) {
  if (reports.empty()) throw UsageError("aggregate_runs needs at least one report");
  RunAggregate a;
  a.runs = reports.size();
  const double n = static_cast<double>(reports.size());
  auto fields = [](MetricsReport& r) {
    return std::array<double*, 5>{&r.accuracy, &r.precision, &r.recall, &r.f1, &r.auc};
  };
  auto mean_f = fields(a.mean);
  for (auto r : reports) {
    auto f = fields(r);
    for (std::size_t k = 0; k < 5; ++k) *mean_f[k] += *f[k] / n;
  }
  a.mean.n = reports[0].n;
  if (reports.size() >= 2) {
    MetricsReport sd;
    auto sd_f = fields(sd);
    for (auto r : reports) {
      auto f = fields(r);
      for (std::size_t k = 0; k < 5; ++k) *sd_f[k] += (*f[k] - *mean_f[k]) * (*f[k] - *mean_f[k]);
    }
    for (std::size_t k = 0; k < 5; ++k) *sd_f[k] = std::sqrt(*sd_f[k] / (n - 1));
    a.sd = sd;
  }
  return a;
}

// ---------------------------------------------------------------------------
// CSV output

namespace detail {

inline std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

}  // namespace detail

/// run_id,accuracy,precision,recall,f1,auc
inline std::string metrics_csv(const std::vector<MetricsReport>& runs,
                               const std::vector<std::string>& run_ids) {
  std::ostringstream os;
  os << "run_id,accuracy,precision,recall,f1,auc\n";
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& r = runs[i];
    os << run_ids.at(i) << ',' << detail::fmt(r.accuracy) << ',' << detail::fmt(r.precision) << ','
       << detail::fmt(r.recall) << ',' << detail::fmt(r.f1) << ',' << detail::fmt(r.auc) << '\n';
  }
  return os.str();
}

/// stat,accuracy,precision,recall,f1,auc with a mean row and an sd row (empty
/// cells when only one run exists).
inline std::string metrics_summary_csv(const RunAggregate& a) {
  std::ostringstream os;
  os << "stat,accuracy,precision,recall,f1,auc\n";
  const auto& m = a.mean;
  os << "mean," << detail::fmt(m.accuracy) << ',' << detail::fmt(m.precision) << ','
     << detail::fmt(m.recall) << ',' << detail::fmt(m.f1) << ',' << detail::fmt(m.auc) << '\n';
  if (a.sd) {
    const auto& s = *a.sd;
    os << "sd," << detail::fmt(s.accuracy) << ',' << detail::fmt(s.precision) << ','
       << detail::fmt(s.recall) << ',' << detail::fmt(s.f1) << ',' << detail::fmt(s.auc) << '\n';
  } else {
    os << "sd,,,,,\n";
  }
  return os.str();
}

/// fpr,tpr,threshold
inline std::string roc_csv(const RocResult& r) {
  std::ostringstream os;
  os << "fpr,tpr,threshold\n";
  for (const auto& p : r.points)
    os << detail::fmt(p.fpr) << ',' << detail::fmt(p.tpr) << ','
       << (std::isinf(p.threshold) ? std::string("inf") : detail::fmt(p.threshold)) << '\n';
  return os.str();
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UsageError("cannot write " + path);
  out << text;
  if (!out) throw UsageError("failed writing " + path);
}

/// Table-style console summary, values in percent as mean ± sd.
inline std::string format_summary_table(const std::vector<std::pair<std::string, RunAggregate>>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(14) << "Model";
  for (const char* h : {"Accuracy(%)", "Precision(%)", "Recall(%)", "F1(%)", "AUC(%)"})
    os << std::setw(18) << h;
  os << '\n';
  for (const auto& [name, a] : rows) {
    os << std::setw(14) << name;
    const double mv[] = {a.mean.accuracy, a.mean.precision, a.mean.recall, a.mean.f1, a.mean.auc};
    const double sv[] = {a.sd ? a.sd->accuracy : 0, a.sd ? a.sd->precision : 0,
                         a.sd ? a.sd->recall : 0, a.sd ? a.sd->f1 : 0, a.sd ? a.sd->auc : 0};
    for (int k = 0; k < 5; ++k) {
      std::ostringstream cell;
      cell << std::fixed << std::setprecision(2) << 100 * mv[k];
      if (a.sd) cell << " ± " << 100 * sv[k];
      os << std::setw(18) << cell.str();
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace csamoe
