#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "mmode/errors.hpp"

namespace mmode::metrics {

/// EF below this fraction counts as cardiomyopathy.
inline constexpr double kCardiomyopathyThreshold = 0.5;

/// Area under the ROC curve via the Mann-Whitney U statistic with midranks,
/// i.e. P(score_pos > score_neg) + P(tie) / 2. Empty when only one class is present.
inline std::optional<double> auroc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ShapeError("auroc: size mismatch");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Twice the midrank keeps the ranks integral.
  std::vector<double> rank2(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    for (std::size_t k = i; k < j; ++k) rank2[order[k]] = static_cast<double>(i + j + 1);
    i = j;
  }
  double pos = 0, sum_rank2 = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (labels[i]) {
      ++pos;
      sum_rank2 += rank2[i];
    }
  const double neg = static_cast<double>(n) - pos;
  if (pos == 0 || neg == 0) return std::nullopt;
  const double u = sum_rank2 / 2.0 - pos * (pos + 1.0) / 2.0;
  return u / (pos * neg);
}

/// Area under the precision-recall curve by step integration (average
/// precision): sum over distinct thresholds of (R_k - R_{k-1}) * P_k, with tied
/// scores entering as one threshold.
inline std::optional<double> auprc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ShapeError("auprc: size mismatch");
  const std::size_t n = scores.size();
  const auto pos = static_cast<double>(std::count_if(labels.begin(), labels.end(),
                                                     [](int l) { return l != 0; }));
  if (pos == 0 || pos == static_cast<double>(n)) return std::nullopt;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double tp = 0, fp = 0, prev_recall = 0, ap = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] ? tp : fp) += 1;
      ++j;
    }
    const double recall = tp / pos, precision = tp / (tp + fp);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return ap;
}

struct Regression {
  double mae = 0, rmse = 0, r2 = 0;
};

/// R^2 = 1 - SS_res / SS_tot; NaN when the targets are constant.
inline Regression regression(std::span<const double> pred, std::span<const double> truth) {
  if (pred.size() != truth.size() || pred.empty()) throw ShapeError("regression metrics: bad sizes");
  const double n = static_cast<double>(pred.size());
  const double mean = std::accumulate(truth.begin(), truth.end(), 0.0) / n;
  double abs_sum = 0, ss_res = 0, ss_tot = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = pred[i] - truth[i];
    abs_sum += std::abs(e);
    ss_res += e * e;
    ss_tot += (truth[i] - mean) * (truth[i] - mean);
  }
  Regression r;
  r.mae = abs_sum / n;
  r.rmse = std::sqrt(ss_res / n);
  r.r2 = ss_tot > 0 ? 1.0 - ss_res / ss_tot : std::nan("");
  return r;
}

/// label 1 = cardiomyopathic (EF < 0.5); score = -predicted EF.
struct Classification {
  std::vector<int> labels;
  std::vector<double> scores;
};

inline Classification cardiomyopathy(std::span<const double> pred_ef,
                                     std::span<const double> true_ef) {
  Classification c;
  for (std::size_t i = 0; i < pred_ef.size(); ++i) {
    c.labels.push_back(true_ef[i] < kCardiomyopathyThreshold ? 1 : 0);
    c.scores.push_back(-pred_ef[i]);
  }
  return c;
}

struct MeanStd {
  double mean = 0, std = 0;
  std::size_t n = 0;
};

/// Sample standard deviation (n - 1); skips NaN entries.
inline MeanStd mean_std(std::span<const double> v) {
  MeanStd r;
  double s = 0;
  for (double x : v)
    if (!std::isnan(x)) {
      s += x;
      ++r.n;
    }
  if (r.n == 0) return {std::nan(""), std::nan(""), 0};
  r.mean = s / static_cast<double>(r.n);
  double ss = 0;
  for (double x : v)
    if (!std::isnan(x)) ss += (x - r.mean) * (x - r.mean);
  r.std = r.n > 1 ? std::sqrt(ss / static_cast<double>(r.n - 1)) : 0.0;
  return r;
}

}  // namespace mmode::metrics
