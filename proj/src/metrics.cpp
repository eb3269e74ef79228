#include "dmckn/metrics.hpp"

#include <algorithm>
#include <numeric>

#include "dmckn/error.hpp"

namespace dmckn {

double f1_score(double precision, double recall) {
  const double d = precision + recall;
  return d > 0.0 ? 2.0 * precision * recall / d : 0.0;
}

Tensor predict(const Tensor& scores, const EvalProtocol& protocol) {
  Tensor out(scores.rows(), scores.cols());
  if (protocol.kind == EvalProtocol::Kind::Threshold) {
    for (std::size_t i = 0; i < scores.size(); ++i) out[i] = scores[i] > protocol.threshold ? 1.0 : 0.0;
    return out;
  }
  if (protocol.top_k == 0) throw ArgumentError("predict: top_k must be >= 1");
  std::vector<std::size_t> order(scores.cols());
  for (std::size_t r = 0; r < scores.rows(); ++r) {
    std::iota(order.begin(), order.end(), 0);
    const auto row = scores.row(r);
    const std::size_t k = std::min(protocol.top_k, order.size());
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) { return row[a] > row[b] || (row[a] == row[b] && a < b); });
    for (std::size_t j = 0; j < k; ++j) out(r, order[j]) = 1.0;
  }
  return out;
}

double average_precision(std::span<const double> scores, std::span<const double> signs) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::size_t hits = 0;
  double sum = 0.0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    if (signs[order[rank]] > 0.0) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(rank + 1);
    }
  }
  return hits ? sum / static_cast<double>(hits) : 0.0;
}

MetricsReport compute_metrics(const Tensor& scores, const Tensor& labels, const EvalProtocol& protocol,
                              std::span<const std::size_t> classes) {
  require_same_shape(scores, labels, "compute_metrics");
  std::vector<std::size_t> all;
  if (classes.empty()) {
    all.resize(labels.cols());
    std::iota(all.begin(), all.end(), 0);
    classes = all;
  }
  const Tensor pred = predict(scores, protocol);
  MetricsReport report;
  report.per_class.resize(labels.cols());
  std::size_t tp = 0, fp = 0, fn = 0;
  double sum_p = 0.0, sum_r = 0.0, sum_ap = 0.0;
  std::vector<double> col_scores(labels.rows()), col_signs(labels.rows());
  for (std::size_t k : classes) {
    if (k >= labels.cols()) throw ArgumentError("compute_metrics: class index out of range");
    ClassMetrics& m = report.per_class[k];
    for (std::size_t i = 0; i < labels.rows(); ++i) {
      const bool positive = labels(i, k) > 0.0;
      const bool predicted = pred(i, k) > 0.0;
      m.tp += positive && predicted;
      m.fp += !positive && predicted;
      m.fn += positive && !predicted;
      col_scores[i] = scores(i, k);
      col_signs[i] = labels(i, k);
    }
    m.precision = m.tp + m.fp ? static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fp) : 0.0;
    m.recall = m.tp + m.fn ? static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn) : 0.0;
    m.f1 = f1_score(m.precision, m.recall);
    m.contributes = m.tp + m.fp + m.fn > 0;
    m.has_positives = m.tp + m.fn > 0;
    if (m.contributes) {
      ++report.contributing_classes;
      sum_p += m.precision;
      sum_r += m.recall;
    }
    if (m.has_positives) {
      m.average_precision = average_precision(col_scores, col_signs);
      ++report.ranked_classes;
      sum_ap += m.average_precision;
    }
    tp += m.tp;
    fp += m.fp;
    fn += m.fn;
  }
  if (report.contributing_classes) {
    report.precision = sum_p / static_cast<double>(report.contributing_classes);
    report.recall = sum_r / static_cast<double>(report.contributing_classes);
  }
  report.macro_f1 = f1_score(report.precision, report.recall);
  const double micro_p = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  const double micro_r = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  report.micro_f1 = f1_score(micro_p, micro_r);
  report.map = report.ranked_classes ? sum_ap / static_cast<double>(report.ranked_classes) : 0.0;
  return report;
}

}  // namespace dmckn
