#include "mil/sampler.hpp"

#include <algorithm>
#include <cmath>

#include "mil/errors.hpp"

namespace mil::sampler {

namespace {

// k uniform draws from `pool` excluding `excluded`, without replacement when
// possible. Returns the number of draws that had to reuse elements.
std::size_t sample_from(const std::vector<std::uint32_t>& pool, std::uint32_t excluded,
                        std::size_t k, Rng& rng, const char* pool_name,
                        std::vector<std::uint32_t>& out) {
  std::vector<std::uint32_t> universe;
  universe.reserve(pool.size());
  for (std::uint32_t id : pool)
    if (id != excluded) universe.push_back(id);
  if (universe.empty()) throw BatchError("draw_batch: empty sampling pool", pool_name);

  if (universe.size() >= k) {
    // partial Fisher-Yates
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t j = i + rand_index(rng, universe.size() - i);
      std::swap(universe[i], universe[j]);
      out.push_back(universe[i]);
    }
    return 0;
  }
  for (std::size_t i = 0; i < k; ++i) out.push_back(universe[rand_index(rng, universe.size())]);
  return k;
}

std::vector<std::uint32_t> concat(const std::vector<std::uint32_t>& a,
                                  const std::vector<std::uint32_t>& b) {
  std::vector<std::uint32_t> u = a;
  u.insert(u.end(), b.begin(), b.end());
  return u;
}

}  // namespace

void SpsSchedule::validate() const {
  if (!(r0 >= 0.0 && r0 <= rT && rT <= 1.0)) throw ConfigError("schedule: need 0 <= r0 <= rT <= 1");
  if (warmup_epochs >= total_epochs) throw ConfigError("schedule: need T_warmup < T");
  if (!(positive_anchor_ratio >= 0.0 && positive_anchor_ratio <= 1.0)) {
    throw ConfigError("schedule: p+ must be in [0, 1]");
  }
}

InstancePools partition_instances(std::span<const std::uint8_t> instance_bag_labels,
                                  std::span<const std::int8_t> pseudo_labels) {
  if (instance_bag_labels.size() != pseudo_labels.size()) {
    throw ShapeError("partition_instances: label spans differ in length");
  }
  InstancePools pools;
  for (std::uint32_t i = 0; i < instance_bag_labels.size(); ++i) {
    if (instance_bag_labels[i] == 0) {
      // Negative bags contain only negatives, whatever the pseudo label says.
      pools.neg_bag.push_back(i);
    } else {
      if (pseudo_labels[i] < 0) {
        throw StateError("partition_instances: positive-bag instance " + std::to_string(i) +
                         " has no pseudo label");
      }
      (pseudo_labels[i] ? pools.pos_pseudo : pools.neg_pseudo).push_back(i);
    }
  }
  return pools;
}

double rate_schedule(double t, const SpsSchedule& sched) {
  sched.validate();
  const double tw = static_cast<double>(sched.warmup_epochs);
  const double total = static_cast<double>(sched.total_epochs);
  if (!(t > tw)) throw ContractError("rate_schedule: confidence pools are undefined during warm-up");
  if (t > total) throw ContractError("rate_schedule: t beyond total epochs");
  if (t == total) return sched.rT;  // exact endpoint
  const double r = sched.r0 + (sched.rT - sched.r0) * (t - tw) / (total - tw);
  return std::min(r, sched.rT);
}

void select_confident(InstancePools& pools, std::span<const double> instance_scores, double r) {
  if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("select_confident: r must be in [0, 1]");
  for (std::uint32_t id : pools.pos_pseudo) {
    const double s = instance_scores[id];
    if (!(s >= 0.0 && s <= 1.0)) throw ContractError("select_confident: score outside [0, 1]");
  }
  for (std::uint32_t id : pools.neg_pseudo) {
    const double s = instance_scores[id];
    if (!(s >= 0.0 && s <= 1.0)) throw ContractError("select_confident: score outside [0, 1]");
  }

  auto take = [&](const std::vector<std::uint32_t>& pool, bool highest) {
    const auto want =
        static_cast<std::size_t>(std::ceil(r * static_cast<double>(pool.size()) - 1e-12));
    std::vector<std::uint32_t> sorted = pool;
    std::sort(sorted.begin(), sorted.end(), [&](std::uint32_t a, std::uint32_t b) {
      if (instance_scores[a] != instance_scores[b]) {
        return highest ? instance_scores[a] > instance_scores[b]
                       : instance_scores[a] < instance_scores[b];
      }
      return a < b;  // deterministic tie-break
    });
    sorted.resize(std::min(want, sorted.size()));
    return sorted;
  };
  pools.pos_confident = take(pools.pos_pseudo, /*highest=*/true);
  pools.neg_confident = take(pools.neg_pseudo, /*highest=*/false);
}

ContrastiveBatch draw_batch(const InstancePools& pools, const SpsSchedule& sched, std::size_t t,
                            const BatchSpec& spec, Rng& rng) {
  sched.validate();
  if (spec.n_anchors == 0 || spec.same_per_anchor == 0) {
    throw ConfigError("draw_batch: need at least one anchor and a nonempty S_x");
  }
  ContrastiveBatch batch;
  const bool warmup = t <= sched.warmup_epochs;

  std::size_t n_pos = 0;
  if (!warmup) {
    n_pos = static_cast<std::size_t>(
        std::ceil(sched.positive_anchor_ratio * static_cast<double>(spec.n_anchors) - 1e-12));
    n_pos = std::min(n_pos, spec.n_anchors);
  }

  const std::vector<std::uint32_t> neg_union =
      warmup ? pools.neg_bag : concat(pools.neg_bag, pools.neg_confident);

  // Anchor sources.
  if (warmup) {
    if (pools.neg_bag.empty()) throw BatchError("draw_batch: no warm-up anchors", "X-_neg");
    batch.replacement_fallbacks += sample_from(pools.neg_bag, UINT32_MAX, spec.n_anchors, rng,
                                               "X-_neg", batch.anchors);
    batch.anchor_is_positive.assign(spec.n_anchors, 0);
  } else {
    if (n_pos > 0 && pools.pos_confident.empty()) {
      throw BatchError("draw_batch: no positive anchors available", "X+_pos(r)");
    }
    if (n_pos < spec.n_anchors && neg_union.empty()) {
      throw BatchError("draw_batch: no negative anchors available", "X-_neg u X-_pos(r)");
    }
    batch.replacement_fallbacks +=
        sample_from(pools.pos_confident, UINT32_MAX, n_pos, rng, "X+_pos(r)", batch.anchors);
    batch.replacement_fallbacks += sample_from(neg_union, UINT32_MAX, spec.n_anchors - n_pos, rng,
                                               "X-_neg u X-_pos(r)", batch.anchors);
    batch.anchor_is_positive.assign(spec.n_anchors, 0);
    std::fill_n(batch.anchor_is_positive.begin(), n_pos, 1);
  }

  // Per-anchor contrastive sets.
  for (std::size_t i = 0; i < batch.anchors.size(); ++i) {
    const std::uint32_t anchor = batch.anchors[i];
    std::vector<std::uint32_t> same, diff;
    if (warmup) {
      batch.replacement_fallbacks +=
          sample_from(pools.neg_bag, anchor, spec.same_per_anchor, rng, "X-_neg", same);
      if (spec.diff_per_anchor > 0) {
        if (pools.pos_pseudo.empty()) throw BatchError("draw_batch: warm-up D_x source empty",
                                                       "X+_pos");
        batch.replacement_fallbacks +=
            sample_from(pools.pos_pseudo, anchor, spec.diff_per_anchor, rng, "X+_pos", diff);
      }
    } else if (batch.anchor_is_positive[i]) {
      batch.replacement_fallbacks +=
          sample_from(pools.pos_confident, anchor, spec.same_per_anchor, rng, "X+_pos(r)", same);
      if (spec.diff_per_anchor > 0) {
        batch.replacement_fallbacks += sample_from(neg_union, anchor, spec.diff_per_anchor, rng,
                                                   "X-_neg u X-_pos(r)", diff);
      }
    } else {
      batch.replacement_fallbacks +=
          sample_from(neg_union, anchor, spec.same_per_anchor, rng, "X-_neg u X-_pos(r)", same);
      if (spec.diff_per_anchor > 0) {
        batch.replacement_fallbacks +=
            sample_from(pools.pos_confident, anchor, spec.diff_per_anchor, rng, "X+_pos(r)", diff);
      }
    }
    batch.same_sets.push_back(std::move(same));
    batch.diff_sets.push_back(std::move(diff));
  }
  return batch;
}

}  // namespace mil::sampler
