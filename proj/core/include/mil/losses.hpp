#pragma once

#include <span>
#include <vector>

#include "mil/matrix.hpp"
#include "mil/tape.hpp"

namespace mil::losses {

struct SimilarityConfig {
  double temperature = 0.5;
};

// exp(z1.z2 / tau) for unit-norm rows. ContractError when a norm is off by more
// than 1e-6, ConfigError for a non-positive temperature.
double similarity(const num::Matrix& z1, const num::Matrix& z2, const SimilarityConfig& cfg);

struct ContrastiveResult {
  double loss = 0.0;
  num::Matrix d_anchor;
  num::Matrix d_positive;            // d/d z_aug (info_nce only; empty for sup_con)
  std::vector<num::Matrix> d_same;   // d/d z_s, one per element of S_x (sup_con only)
  std::vector<num::Matrix> d_diff;   // d/d z_d, one per element of D_x / z_diffs
};

// -log [ sim(x, aug) / (sim(x, aug) + sum_i sim(x, diff_i)) ], in log space.
ContrastiveResult info_nce(const num::Matrix& z_anchor, const num::Matrix& z_aug,
                           std::span<const num::Matrix> z_diffs, const SimilarityConfig& cfg);

// (1/|S|) sum_{s in S} -log [ sim(x, s) / (sum_S sim + sum_D sim) ].
// The denominator is shared across the |S| terms. S must be nonempty.
ContrastiveResult sup_con(const num::Matrix& z_anchor, std::span<const num::Matrix> z_same,
                          std::span<const num::Matrix> z_diff, const SimilarityConfig& cfg);

// -[y log s + (1-y) log(1-s)]; scores outside (0,1) are clamped to
// [1e-12, 1-1e-12]. Optional derivative with respect to the score.
double bce_instance(double score, int pseudo_label, double* d_score = nullptr);

// Tape builders over a shared projection matrix `z` (rows unit-norm).
// Row indices select the anchor and its sets; the result is the scalar loss term.
num::Var sup_con_term(num::GradTape& tape, num::Var z, std::uint32_t anchor,
                      std::span<const std::uint32_t> same, std::span<const std::uint32_t> diff,
                      double temperature);
num::Var info_nce_term(num::GradTape& tape, num::Var z, std::uint32_t anchor, std::uint32_t aug,
                       std::span<const std::uint32_t> diffs, double temperature);

}  // namespace mil::losses
