#include "mil/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mil/errors.hpp"

namespace mil::metrics {

namespace {

void require_same_size(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw ShapeError(std::string(what) + ": labels and scores differ in length");
}

std::pair<std::size_t, std::size_t> class_counts(std::span<const std::uint8_t> labels) {
  std::size_t pos = 0;
  for (auto y : labels) pos += y ? 1 : 0;
  return {pos, labels.size() - pos};
}

// Indices sorted by descending score (ascending index on ties).
std::vector<std::size_t> order_by_score_desc(std::span<const double> scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return idx;
}

}  // namespace

double roc_auc(std::span<const std::uint8_t> labels, std::span<const double> scores) {
  require_same_size(labels.size(), scores.size(), "roc_auc");
  const auto [n_pos, n_neg] = class_counts(labels);
  if (n_pos == 0 || n_neg == 0) throw UndefinedMetricError("roc_auc: needs both classes");

  // Rank-sum with average ranks for ties.
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j + 1 < idx.size() && scores[idx[j + 1]] == scores[idx[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j + 1);
    for (std::size_t k = i; k <= j; ++k)
      if (labels[idx[k]]) rank_sum_pos += avg_rank;
    i = j + 1;
  }
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

double aupr(std::span<const std::uint8_t> labels, std::span<const double> scores) {
  require_same_size(labels.size(), scores.size(), "aupr");
  const auto [n_pos, n_neg] = class_counts(labels);
  (void)n_neg;
  if (n_pos == 0) throw UndefinedMetricError("aupr: needs at least one positive");

  const auto idx = order_by_score_desc(scores);
  double ap = 0.0;
  double prev_recall = 0.0;
  std::size_t tp = 0, fp = 0;
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j + 1 < idx.size() && scores[idx[j + 1]] == scores[idx[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) (labels[idx[k]] ? tp : fp) += 1;
    const double recall = static_cast<double>(tp) / static_cast<double>(n_pos);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j + 1;
  }
  return ap;
}

MaxF1 max_f1(std::span<const std::uint8_t> labels, std::span<const double> scores) {
  require_same_size(labels.size(), scores.size(), "max_f1");
  const auto [n_pos, n_neg] = class_counts(labels);
  (void)n_neg;
  if (n_pos == 0) throw UndefinedMetricError("max_f1: needs at least one positive");

  const auto idx = order_by_score_desc(scores);
  // Thresholds descend; F1 at threshold s counts everything with score >= s.
  MaxF1 best{-1.0, 0.0};
  std::size_t tp = 0, fp = 0;
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j + 1 < idx.size() && scores[idx[j + 1]] == scores[idx[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) (labels[idx[k]] ? tp : fp) += 1;
    const std::size_t fn = n_pos - tp;
    const double f1 = 2.0 * static_cast<double>(tp) /
                      static_cast<double>(2 * tp + fp + fn);
    const double threshold = scores[idx[i]];
    // >= keeps the lowest threshold on ties (thresholds are visited descending).
    if (f1 >= best.f1) best = MaxF1{f1, threshold};
    i = j + 1;
  }
  return best;
}

double dice_score(std::span<const std::uint8_t> labels, std::span<const double> probs) {
  require_same_size(labels.size(), probs.size(), "dice_score");
  double inter = 0.0, sum_y = 0.0, sum_p = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    inter += labels[i] ? probs[i] : 0.0;
    sum_y += labels[i] ? 1.0 : 0.0;
    sum_p += probs[i];
  }
  const double denom = sum_y + sum_p;
  return denom == 0.0 ? 1.0 : 2.0 * inter / denom;
}

std::pair<double, DiceCalibration> dice_calibrated(std::span<const std::uint8_t> labels,
                                                   std::span<const double> scores,
                                                   std::span<const std::uint8_t> val_labels,
                                                   std::span<const double> val_scores) {
  require_same_size(labels.size(), scores.size(), "dice_calibrated");
  require_same_size(val_labels.size(), val_scores.size(), "dice_calibrated");
  if (val_labels.empty()) throw ConfigError("dice_calibrated: empty validation split");
  if (class_counts(val_labels).first == 0) {
    throw ConfigError("dice_calibrated: validation split has no positive");
  }

  auto calibrated = [](std::span<const double> s, double a, double b) {
    std::vector<double> p(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
      const double z = a * s[i] + b;
      p[i] = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    }
    return p;
  };

  // a on a 0.1-step grid over [-5, 5]; b log-spaced over [0.1, 10].
  DiceCalibration best_cal;
  double best_val = -1.0;
  for (int ai = 0; ai <= 100; ++ai) {
    const double a = -5.0 + 0.1 * ai;
    for (int bi = 0; bi < 100; ++bi) {
      const double b = 0.1 * std::pow(100.0, static_cast<double>(bi) / 99.0);
      const double v = dice_score(val_labels, calibrated(val_scores, a, b));
      if (v > best_val) {
        best_val = v;
        best_cal = DiceCalibration{a, b};
      }
    }
  }
  return {dice_score(labels, calibrated(scores, best_cal.a, best_cal.b)), best_cal};
}

double iou(std::span<const std::uint8_t> labels, std::span<const std::uint8_t> preds) {
  require_same_size(labels.size(), preds.size(), "iou");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    inter += (labels[i] && preds[i]) ? 1 : 0;
    uni += (labels[i] || preds[i]) ? 1 : 0;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

namespace {

// Largest eigenvalue of the symmetric PSD matrix C by power iteration.
double top_eigenvalue(const num::Matrix& c) {
  const std::size_t d = c.rows();
  bool all_zero = true;
  for (double x : c.data())
    if (x != 0.0) all_zero = false;
  if (all_zero) return 0.0;

  std::vector<double> v(d);
  for (std::size_t i = 0; i < d; ++i) v[i] = 1.0 + 0.5 * std::sin(3.0 * static_cast<double>(i + 1));
  double norm = num::l2_norm(v);
  for (auto& x : v) x /= norm;

  double lambda = 0.0;
  std::vector<double> w(d);
  for (int iter = 0; iter < 100000; ++iter) {
    for (std::size_t i = 0; i < d; ++i) w[i] = num::dot(c.row_span(i), v);
    const double next = num::dot(std::span<const double>(w), std::span<const double>(v));
    const double wn = num::l2_norm(w);
    if (wn == 0.0) return 0.0;
    for (std::size_t i = 0; i < d; ++i) v[i] = w[i] / wn;
    if (iter > 0 && std::abs(next - lambda) <= 1e-15 * std::max(std::abs(next), 1e-300)) {
      return next;
    }
    lambda = next;
  }
  return lambda;
}

}  // namespace

ClassStats class_stats(const num::Matrix& features, std::span<const std::uint8_t> labels) {
  if (features.rows() != labels.size()) throw ShapeError("class_stats: label count mismatch");
  const auto [n_pos, n_neg] = class_counts(labels);
  if (n_pos == 0 || n_neg == 0) throw UndefinedMetricError("class_stats: needs both classes");

  const std::size_t d = features.cols();
  auto mean_of = [&](std::uint8_t cls) {
    std::vector<double> mu(d, 0.0);
    std::size_t n = 0;
    for (std::size_t i = 0; i < features.rows(); ++i) {
      if ((labels[i] != 0) != (cls != 0)) continue;
      for (std::size_t j = 0; j < d; ++j) mu[j] += features(i, j);
      ++n;
    }
    for (auto& x : mu) x /= static_cast<double>(n);
    return mu;
  };
  const std::vector<double> mu_pos = mean_of(1), mu_neg = mean_of(0);

  double inter = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    const double diff = mu_pos[j] - mu_neg[j];
    inter += diff * diff;
  }
  inter = std::sqrt(inter);

  auto deviation = [&](std::uint8_t cls, const std::vector<double>& mu, std::size_t n) {
    num::Matrix cov(d, d);
    for (std::size_t i = 0; i < features.rows(); ++i) {
      if ((labels[i] != 0) != (cls != 0)) continue;
      for (std::size_t a = 0; a < d; ++a) {
        const double xa = features(i, a) - mu[a];
        for (std::size_t b = 0; b < d; ++b) cov(a, b) += xa * (features(i, b) - mu[b]);
      }
    }
    for (auto& x : cov.data()) x /= static_cast<double>(n);  // population normalization
    return std::sqrt(std::max(0.0, top_eigenvalue(cov)));
  };

  return ClassStats{inter, deviation(1, mu_pos, n_pos), deviation(0, mu_neg, n_neg)};
}

PseudoQuality pseudo_quality(std::span<const std::uint8_t> true_labels,
                             std::span<const std::uint8_t> pseudo_labels,
                             std::span<const std::uint32_t> selected_ids) {
  require_same_size(true_labels.size(), pseudo_labels.size(), "pseudo_quality");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::uint32_t id : selected_ids) {
    if (id >= true_labels.size()) throw ShapeError("pseudo_quality: selected id out of range");
    const bool t = true_labels[id] != 0, p = pseudo_labels[id] != 0;
    tp += (t && p) ? 1 : 0;
    fp += (!t && p) ? 1 : 0;
    fn += (t && !p) ? 1 : 0;
  }
  PseudoQuality q;
  q.precision = (tp + fp) == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
  q.recall = (tp + fn) == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
  return q;
}

}  // namespace mil::metrics
