#pragma once

// Classification metrics for imbalanced clinical prediction.
//
// Ranking metrics treat equal scores as a single threshold and accumulate
// integer counts, so any strictly monotone transform of the scores gives the
// same result bit for bit.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "nlohmann/json.hpp"

namespace smart {

class MetricError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

struct ClassCounts {
  std::size_t positives = 0;
  std::size_t negatives = 0;
};

inline ClassCounts count_classes(std::span<const int> labels, const char* metric) {
  ClassCounts c;
  for (int y : labels) (y ? c.positives : c.negatives)++;
  if (c.positives == 0 || c.negatives == 0) {
    throw MetricError(std::string(metric) + ": labels must contain both classes");
  }
  return c;
}

inline void check_sizes(std::span<const int> labels, std::span<const double> scores, const char* metric) {
  if (labels.size() != scores.size()) throw MetricError(std::string(metric) + ": label/score length mismatch");
}

// Indices sorted by descending score.
inline std::vector<std::size_t> rank_descending(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
  return order;
}

// Calls f(tp, fp, group_positives) after each group of tied scores, walking
// from the highest score down.
template <typename F>
void for_each_threshold(std::span<const int> labels, std::span<const double> scores, F&& f) {
  const auto order = rank_descending(scores);
  std::size_t tp = 0, fp = 0, i = 0;
  while (i < order.size()) {
    std::size_t group_pos = 0;
    const double s = scores[order[i]];
    while (i < order.size() && scores[order[i]] == s) {
      if (labels[order[i]]) ++group_pos;
      else ++fp;
      ++i;
    }
    tp += group_pos;
    f(tp, fp, group_pos);
  }
}

}  // namespace detail

/// Average precision: sum over score thresholds of precision times the recall gained.
inline double auprc(std::span<const int> labels, std::span<const double> scores) {
  detail::check_sizes(labels, scores, "auprc");
  const auto counts = detail::count_classes(labels, "auprc");
  double acc = 0.0;
  detail::for_each_threshold(labels, scores, [&](std::size_t tp, std::size_t fp, std::size_t gained) {
    if (gained) acc += static_cast<double>(tp) / static_cast<double>(tp + fp) * static_cast<double>(gained);
  });
  return acc / static_cast<double>(counts.positives);
}

/// Mann-Whitney AUROC: P(score_pos > score_neg) + 0.5 P(tie).
inline double auroc(std::span<const int> labels, std::span<const double> scores) {
  detail::check_sizes(labels, scores, "auroc");
  const auto counts = detail::count_classes(labels, "auroc");
  // Walk ascending so each positive group counts negatives strictly below it.
  double wins = 0.0;
  std::size_t neg_above = 0;
  detail::for_each_threshold(labels, scores, [&](std::size_t tp, std::size_t fp, std::size_t gained) {
    (void)tp;
    const std::size_t group_neg = fp - neg_above;
    const std::size_t neg_below = counts.negatives - fp;
    wins += static_cast<double>(gained) * (static_cast<double>(neg_below) + 0.5 * static_cast<double>(group_neg));
    neg_above = fp;
  });
  return wins / (static_cast<double>(counts.positives) * static_cast<double>(counts.negatives));
}

/// F1 of the positive class at a fixed threshold (score >= threshold predicts positive).
/// Returns 0 when there are no predicted positives.
inline double f1_score(std::span<const int> labels, std::span<const double> scores, double threshold = 0.5) {
  detail::check_sizes(labels, scores, "f1");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    if (pred && labels[i]) ++tp;
    else if (pred) ++fp;
    else if (labels[i]) ++fn;
  }
  if (tp == 0) return 0.0;
  return 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
}

/// max over thresholds of min(sensitivity, positive predictive value).
inline double min_se_pplus(std::span<const int> labels, std::span<const double> scores) {
  detail::check_sizes(labels, scores, "min_se_pplus");
  const auto counts = detail::count_classes(labels, "min_se_pplus");
  double best = 0.0;
  detail::for_each_threshold(labels, scores, [&](std::size_t tp, std::size_t fp, std::size_t) {
    const double se = static_cast<double>(tp) / static_cast<double>(counts.positives);
    const double pp = static_cast<double>(tp) / static_cast<double>(tp + fp);
    best = std::max(best, std::min(se, pp));
  });
  return best;
}

struct RocSummary {
  double macro = 0.0;
  double micro = 0.0;
  std::vector<std::size_t> skipped_columns;
};

/// labels and scores are n x K row-major. Columns with a single class are
/// left out of the macro average; micro pools all n*K pairs.
inline RocSummary macro_micro_roc(std::span<const int> labels, std::span<const double> scores, std::size_t K) {
  if (K == 0 || labels.size() != scores.size() || labels.size() % K != 0) {
    throw MetricError("macro_micro_roc: expected n x K labels and scores");
  }
  const std::size_t n = labels.size() / K;
  RocSummary out;
  double total = 0.0;
  std::size_t used = 0;
  std::vector<int> col_y(n);
  std::vector<double> col_s(n);
  for (std::size_t k = 0; k < K; ++k) {
    std::size_t pos = 0;
    for (std::size_t i = 0; i < n; ++i) {
      col_y[i] = labels[i * K + k];
      col_s[i] = scores[i * K + k];
      pos += col_y[i] ? 1 : 0;
    }
    if (pos == 0 || pos == n) {
      out.skipped_columns.push_back(k);
      continue;
    }
    total += auroc(col_y, col_s);
    ++used;
  }
  if (used == 0) throw MetricError("macro_micro_roc: every label column is degenerate");
  out.macro = total / static_cast<double>(used);
  out.micro = auroc(labels, scores);
  return out;
}

/// Per-task scores; metrics that do not apply to the task stay empty and
/// serialize as null.
struct MetricsReport {
  std::string task;
  std::optional<double> auprc;
  std::optional<double> auroc;
  std::optional<double> f1;
  std::optional<double> min_se_pplus;
  std::optional<double> ma_roc;
  std::optional<double> mi_roc;
  std::size_t n = 0;
  double f1_threshold = 0.5;

  bool operator==(const MetricsReport&) const = default;
};

inline nlohmann::json to_json(const MetricsReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return nlohmann::json{{"task", r.task},         {"auprc", opt(r.auprc)},
                        {"auroc", opt(r.auroc)},   {"f1", opt(r.f1)},
                        {"min_se_pplus", opt(r.min_se_pplus)},
                        {"ma_roc", opt(r.ma_roc)}, {"mi_roc", opt(r.mi_roc)},
                        {"n", r.n},                {"f1_threshold", r.f1_threshold}};
}

/// Binary report from labels in {0,1} and positive-class probabilities.
inline MetricsReport binary_report(std::span<const int> labels, std::span<const double> scores,
                                   double f1_threshold = 0.5) {
  MetricsReport r;
  r.task = "binary";
  r.n = labels.size();
  r.f1_threshold = f1_threshold;
  r.f1 = f1_score(labels, scores, f1_threshold);
  std::size_t pos = 0;
  for (int y : labels) pos += y ? 1 : 0;
  if (pos > 0 && pos < labels.size()) {
    r.auprc = auprc(labels, scores);
    r.auroc = auroc(labels, scores);
    r.min_se_pplus = min_se_pplus(labels, scores);
  }
  return r;
}

/// Multi-label (or one-hot multiclass) report from n x K labels and scores.
inline MetricsReport multi_report(std::string task, std::span<const int> labels, std::span<const double> scores,
                                  std::size_t K) {
  MetricsReport r;
  r.task = std::move(task);
  r.n = K ? labels.size() / K : 0;
  const auto roc = macro_micro_roc(labels, scores, K);
  r.ma_roc = roc.macro;
  r.mi_roc = roc.micro;
  return r;
}

}  // namespace smart
