#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dmckn/tensor.hpp"

namespace dmckn {

/// How label scores become a predicted label set.
struct EvalProtocol {
  enum class Kind { TopK, Threshold };
  Kind kind = Kind::TopK;
  std::size_t top_k = 5;
  double threshold = 0.0;  // on logits, i.e. probability 0.5

  static EvalProtocol top(std::size_t k) { return {Kind::TopK, k, 0.0}; }
  static EvalProtocol above(double t) { return {Kind::Threshold, 5, t}; }
  friend bool operator==(const EvalProtocol&, const EvalProtocol&) = default;
};

struct ClassMetrics {
  std::size_t tp = 0, fp = 0, fn = 0;
  double precision = 0.0, recall = 0.0, f1 = 0.0;
  double average_precision = 0.0;
  bool contributes = false;  // predicted or present at least once
  bool has_positives = false;
};

struct MetricsReport {
  double precision = 0.0;  // macro over contributing classes
  double recall = 0.0;
  double macro_f1 = 0.0;   // CF1 = 2PR/(P+R) of the macro averages
  double micro_f1 = 0.0;   // OF1
  double map = 0.0;        // mean AP over classes with at least one positive
  std::size_t contributing_classes = 0;
  std::size_t ranked_classes = 0;
  std::vector<ClassMetrics> per_class;
};

/// 2PR/(P+R), zero when P+R = 0.
double f1_score(double precision, double recall);

/// Binary predictions (images × labels, 0/1) from scores.
Tensor predict(const Tensor& scores, const EvalProtocol& protocol);

/// Average precision of one ranked list: mean precision at each positive.
double average_precision(std::span<const double> scores, std::span<const double> signs);

/// Metrics of `scores` against ±1 `labels`, optionally restricted to `classes`.
MetricsReport compute_metrics(const Tensor& scores, const Tensor& labels, const EvalProtocol& protocol,
                              std::span<const std::size_t> classes = {});

}  // namespace dmckn
