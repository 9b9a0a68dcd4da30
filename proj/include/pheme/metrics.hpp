#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "pheme/core.hpp"

namespace pheme {

// Mann-Whitney statistic: fraction of (positive, negative) pairs ranked
// correctly, ties counting one half. Counted in half-pair units so the result
// is exact, then divided once.
inline double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ValidationError("roc_auc: length mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::uint64_t pos = 0, neg = 0, half_units = 0;
  std::uint64_t neg_below = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    std::uint64_t p = 0, n = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] == 1 ? p : n) += 1;
      ++j;
    }
    half_units += 2 * p * neg_below + p * n;
    neg_below += n;
    pos += p;
    neg += n;
    i = j;
  }
  if (pos == 0 || neg == 0) throw ValidationError("roc_auc: labels contain a single class");
  return static_cast<double>(half_units) / static_cast<double>(2 * pos * neg);
}

inline double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  return roc_auc(std::span<const double>(scores), std::span<const int>(labels));
}

struct PrecisionRecallF1 {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

inline PrecisionRecallF1 precision_recall_f1(std::span<const int> preds, std::span<const int> labels) {
  if (preds.size() != labels.size()) throw ValidationError("precision_recall_f1: length mismatch");
  std::uint64_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] == 1 && labels[i] == 1) ++tp;
    else if (preds[i] == 1) ++fp;
    else if (labels[i] == 1) ++fn;
  }
  PrecisionRecallF1 r;
  r.precision = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  r.recall = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  r.f1 = r.precision + r.recall > 0 ? 2.0 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
  return r;
}

inline PrecisionRecallF1 precision_recall_f1(const std::vector<int>& preds, const std::vector<int>& labels) {
  return precision_recall_f1(std::span<const int>(preds), std::span<const int>(labels));
}

inline double mean_of(std::span<const double> xs) {
  if (xs.empty()) return 0.0;
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

// Sample (n - 1) standard deviation; 0 for fewer than two values.
inline double sample_std(std::span<const double> xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean_of(xs);
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(xs.size() - 1));
}

}  // namespace pheme
