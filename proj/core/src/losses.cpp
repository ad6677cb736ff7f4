#include "mil/losses.hpp"

#include <algorithm>
#include <cmath>

#include "mil/errors.hpp"

namespace mil::losses {

namespace {

constexpr double kUnitNormTol = 1e-6;
constexpr double kClampLo = 1e-12;
constexpr double kClampHi = 1.0 - 1e-12;

void require_unit(const num::Matrix& z, const char* what) {
  if (z.rows() != 1) throw ContractError(std::string(what) + ": expected a row vector");
  const double n = num::l2_norm(z.row_span(0));
  if (std::abs(n - 1.0) > kUnitNormTol) {
    throw ContractError(std::string(what) + ": input is not unit-norm");
  }
}

void require_temperature(const SimilarityConfig& cfg) {
  if (!(cfg.temperature > 0.0)) throw ConfigError("similarity: temperature must be positive");
}

// Shared driver: anchors plus positive set P and negative set D on a local tape.
// loss = logsumexp(sims(P+D)/tau) - mean(sims(P)/tau)
ContrastiveResult pair_set_loss(const num::Matrix& z_anchor, std::span<const num::Matrix> z_pos,
                                std::span<const num::Matrix> z_neg, const SimilarityConfig& cfg) {
  num::GradTape tape;
  const num::Var anchor = tape.input(z_anchor);
  std::vector<num::Var> pos, neg;
  for (const auto& z : z_pos) pos.push_back(tape.input(z));
  for (const auto& z : z_neg) neg.push_back(tape.input(z));

  std::vector<num::Var> sims;
  sims.reserve(pos.size() + neg.size());
  for (num::Var v : pos) sims.push_back(tape.matmul_nt(anchor, v));
  for (num::Var v : neg) sims.push_back(tape.matmul_nt(anchor, v));
  const num::Var all = tape.scale(tape.concat_cols(sims), 1.0 / cfg.temperature);
  const num::Var lse = tape.logsumexp(all);
  const num::Var pos_mean = tape.mean(tape.slice_cols(all, 0, pos.size()));
  const num::Var loss = tape.sub(lse, pos_mean);

  std::vector<num::Var> wrt;
  wrt.push_back(anchor);
  wrt.insert(wrt.end(), pos.begin(), pos.end());
  wrt.insert(wrt.end(), neg.begin(), neg.end());
  std::vector<num::Matrix> grads = tape.gradients(loss, wrt);

  ContrastiveResult r;
  r.loss = tape.value(loss)[0];
  r.d_anchor = std::move(grads[0]);
  for (std::size_t i = 0; i < pos.size(); ++i) r.d_same.push_back(std::move(grads[1 + i]));
  for (std::size_t i = 0; i < neg.size(); ++i)
    r.d_diff.push_back(std::move(grads[1 + pos.size() + i]));
  return r;
}

}  // namespace

double similarity(const num::Matrix& z1, const num::Matrix& z2, const SimilarityConfig& cfg) {
  require_temperature(cfg);
  require_unit(z1, "similarity");
  require_unit(z2, "similarity");
  if (z1.cols() != z2.cols()) throw ShapeError("similarity: dimension mismatch");
  return std::exp(num::dot(z1.row_span(0), z2.row_span(0)) / cfg.temperature);
}

ContrastiveResult info_nce(const num::Matrix& z_anchor, const num::Matrix& z_aug,
                           std::span<const num::Matrix> z_diffs, const SimilarityConfig& cfg) {
  require_temperature(cfg);
  require_unit(z_anchor, "info_nce");
  require_unit(z_aug, "info_nce");
  for (const auto& z : z_diffs) require_unit(z, "info_nce");

  ContrastiveResult r = pair_set_loss(z_anchor, {&z_aug, 1}, z_diffs, cfg);
  r.d_positive = std::move(r.d_same[0]);
  r.d_same.clear();
  return r;
}

ContrastiveResult sup_con(const num::Matrix& z_anchor, std::span<const num::Matrix> z_same,
                          std::span<const num::Matrix> z_diff, const SimilarityConfig& cfg) {
  require_temperature(cfg);
  if (z_same.empty()) throw ContractError("sup_con: S_x must be nonempty");
  require_unit(z_anchor, "sup_con");
  for (const auto& z : z_same) require_unit(z, "sup_con");
  for (const auto& z : z_diff) require_unit(z, "sup_con");
  return pair_set_loss(z_anchor, z_same, z_diff, cfg);
}

double bce_instance(double score, int pseudo_label, double* d_score) {
  const double y = pseudo_label ? 1.0 : 0.0;
  const bool clamped = score <= kClampLo || score >= kClampHi;
  const double s = std::clamp(score, kClampLo, kClampHi);
  if (d_score) *d_score = clamped ? 0.0 : (s - y) / (s * (1.0 - s));
  return -(y * std::log(s) + (1.0 - y) * std::log(1.0 - s));
}

num::Var sup_con_term(num::GradTape& tape, num::Var z, std::uint32_t anchor,
                      std::span<const std::uint32_t> same, std::span<const std::uint32_t> diff,
                      double temperature) {
  if (same.empty()) throw ContractError("sup_con_term: S_x must be nonempty");
  if (!(temperature > 0.0)) throw ConfigError("sup_con_term: temperature must be positive");
  std::vector<std::uint32_t> others(same.begin(), same.end());
  others.insert(others.end(), diff.begin(), diff.end());

  const num::Var za = tape.gather_rows(z, {anchor});
  const num::Var zo = tape.gather_rows(z, std::move(others));
  const num::Var sims = tape.scale(tape.matmul_nt(za, zo), 1.0 / temperature);
  const num::Var lse = tape.logsumexp(sims);
  const num::Var pos_mean = tape.mean(tape.slice_cols(sims, 0, same.size()));
  return tape.sub(lse, pos_mean);
}

num::Var info_nce_term(num::GradTape& tape, num::Var z, std::uint32_t anchor, std::uint32_t aug,
                       std::span<const std::uint32_t> diffs, double temperature) {
  const std::uint32_t same[1] = {aug};
  return sup_con_term(tape, z, anchor, same, diffs, temperature);
}

}  // namespace mil::losses
