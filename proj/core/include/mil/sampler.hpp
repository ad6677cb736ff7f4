#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mil/rng.hpp"

namespace mil::sampler {

// Instance pools for self-paced supervised contrastive sampling.
// neg_bag holds every instance of a negative bag (clean negatives by the MIL
// definition); positive-bag instances split by pseudo label into pos_pseudo /
// neg_pseudo, with pos_confident / neg_confident their top-r% subsets.
struct InstancePools {
  std::vector<std::uint32_t> neg_bag;        // X-_neg
  std::vector<std::uint32_t> pos_pseudo;     // X+_pos
  std::vector<std::uint32_t> neg_pseudo;     // X-_pos
  std::vector<std::uint32_t> pos_confident;  // X+_pos(r)
  std::vector<std::uint32_t> neg_confident;  // X-_pos(r)
};

struct SpsSchedule {
  double r0 = 0.2;
  double rT = 0.8;
  std::size_t warmup_epochs = 5;   // T_warm-up
  std::size_t total_epochs = 50;   // T
  double positive_anchor_ratio = 0.2;  // p+

  void validate() const;
};

struct BatchSpec {
  std::size_t n_anchors = 128;
  std::size_t same_per_anchor = 8;  // |S_x|
  std::size_t diff_per_anchor = 8;  // |D_x|
};

struct ContrastiveBatch {
  std::vector<std::uint32_t> anchors;
  std::vector<std::uint8_t> anchor_is_positive;        // per anchor
  std::vector<std::vector<std::uint32_t>> same_sets;   // S_x per anchor
  std::vector<std::vector<std::uint32_t>> diff_sets;   // D_x per anchor
  std::size_t replacement_fallbacks = 0;  // draws that fell back to replacement
};

// Split instances into pools. `pseudo_labels` may be -1 (missing) for
// negative-bag instances only; StateError otherwise.
InstancePools partition_instances(std::span<const std::uint8_t> instance_bag_labels,
                                  std::span<const std::int8_t> pseudo_labels);

// r(t) = r0 + (rT - r0) * (t - Tw) / (T - Tw) for Tw < t <= T; exact at t = T.
double rate_schedule(double t, const SpsSchedule& sched);

// Fill pos_confident (ceil(r*|X+_pos|) highest scores) and neg_confident
// (ceil(r*|X-_pos|) lowest scores); ties broken by ascending instance id.
void select_confident(InstancePools& pools, std::span<const double> instance_scores, double r);

// Draw one anchor batch for epoch t. During warm-up anchors and S_x come from
// X-_neg and D_x from X+_pos; afterwards ceil(p+ * n) positive anchors come
// from X+_pos(r) and the rest from X-_neg u X-_pos(r), with S_x / D_x drawn
// from the matching pools. Uniform without replacement, falling back to
// replacement when a pool is smaller than requested; an anchor never appears
// in its own S_x or D_x. BatchError (naming the pool) when a source is empty.
ContrastiveBatch draw_batch(const InstancePools& pools, const SpsSchedule& sched, std::size_t t,
                            const BatchSpec& spec, Rng& rng);

}  // namespace mil::sampler
