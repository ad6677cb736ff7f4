#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "mil/matrix.hpp"

namespace mil::metrics {

struct MetricsReport {
  double bag_auc = 0.0;
  double instance_auc = 0.0;
  double instance_auprc = 0.0;
  double instance_max_f1 = 0.0;
  double dice = 0.0;
  double iou = 0.0;
  double inter_class_distance = 0.0;
  double intra_class_deviation_pos = 0.0;
  double intra_class_deviation_neg = 0.0;
  double pseudo_label_precision = 0.0;
  double pseudo_label_recall = 0.0;
};

// Mann-Whitney AUC; tied scores contribute 1/2. UndefinedMetricError unless
// both classes are present.
double roc_auc(std::span<const std::uint8_t> labels, std::span<const double> scores);

// Area under precision-recall by step interpolation over the observed score
// thresholds. UndefinedMetricError without a positive.
double aupr(std::span<const std::uint8_t> labels, std::span<const double> scores);

struct MaxF1 {
  double f1 = 0.0;
  double threshold = 0.0;  // lowest threshold achieving the maximum
};
// Maximum F1 over thresholds at observed score values (predict positive when
// score >= threshold). UndefinedMetricError without a positive.
MaxF1 max_f1(std::span<const std::uint8_t> labels, std::span<const double> scores);

// Soft Dice: 2 sum(y*p) / (sum(y) + sum(p)); 1 when both sums are zero.
double dice_score(std::span<const std::uint8_t> labels, std::span<const double> probs);

struct DiceCalibration {
  double a = 0.0;  // in [-5, 5]
  double b = 0.1;  // in [0.1, 10]
};
// Grid-search (a, b) maximizing Dice of sigmoid(a*s + b) on the validation
// split; returns the test Dice at the argmax. ConfigError when the validation
// split is empty or has no positive.
std::pair<double, DiceCalibration> dice_calibrated(std::span<const std::uint8_t> labels,
                                                   std::span<const double> scores,
                                                   std::span<const std::uint8_t> val_labels,
                                                   std::span<const double> val_scores);

// Intersection over union of binary masks; an empty union counts as 1.
double iou(std::span<const std::uint8_t> labels, std::span<const std::uint8_t> preds);

struct ClassStats {
  double inter_class_distance = 0.0;
  double dev_pos = 0.0;  // sqrt of the largest covariance eigenvalue, positives
  double dev_neg = 0.0;
};
// Inter-class mean distance and per-class intra-class deviation
// (population-normalized covariance, largest eigenvalue by power iteration).
ClassStats class_stats(const num::Matrix& features, std::span<const std::uint8_t> labels);

struct PseudoQuality {
  double precision = 1.0;
  double recall = 1.0;
};
// Precision/recall of positive pseudo labels over the selected instances.
// No positive predictions -> precision 1; no true positives -> recall 1.
PseudoQuality pseudo_quality(std::span<const std::uint8_t> true_labels,
                             std::span<const std::uint8_t> pseudo_labels,
                             std::span<const std::uint32_t> selected_ids);

}  // namespace mil::metrics
