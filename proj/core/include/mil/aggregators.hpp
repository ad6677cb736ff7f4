#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mil/matrix.hpp"
#include "mil/tape.hpp"

namespace mil::agg {

enum class Kind : std::uint8_t { max_pool = 0, topk = 1, attention = 2, ds_mil = 3, transformer = 4 };
enum class AttentionMode : std::uint8_t { embedding = 0, instance = 1 };

const char* kind_name(Kind k);
Kind kind_from_name(const std::string& name);

// Architecture and trainer settings. Trainer defaults follow the per-bag Adam
// recipe (lr 2e-4 halved every 75 epochs, at most 350 epochs).
struct AggregatorConfig {
  double topk_ratio = 0.1;        // default grid {0.001, 0.01, 0.03, 0.1, 0.2}
  double stream_weight = 1.0;     // ds_mil embedding-stream weight, from [0.1, 5]
  AttentionMode attention_mode = AttentionMode::embedding;
  std::size_t attn_dim = 0;       // l; 0 means l = d
  std::size_t heads = 4;
  std::size_t layers = 2;         // transformer depth
  std::size_t mlp_expansion = 2;

  std::size_t epochs = 350;
  double lr = 2e-4;
  std::size_t lr_step = 75;
  double lr_gamma = 0.5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;  // L2 folded into the gradient
  std::size_t patience = 0;  // early stop after this many epochs without val improvement; 0 = off
};

struct AggregatorModel {
  Kind kind = Kind::max_pool;
  std::size_t input_dim = 0;
  AggregatorConfig cfg;

  num::Matrix phi_w, phi_b;    // instance classifier (max, topk, attention-instance, ds_mil)
  num::Matrix attn_V, attn_w;  // attention scorer (attention, transformer)
  num::Matrix bag_w, bag_b;    // bag-level classifier
  num::Matrix q_proj, v_proj;  // ds_mil query/value maps

  struct Block {
    num::Matrix wq, bq, wk, bk, wv, bv, wo, bo;  // multi-head self-attention
    num::Matrix w1, b1, w2, b2;                  // position-wise MLP
  };
  std::vector<Block> blocks;  // transformer only
};

struct BagPrediction {
  double bag_score = 0.0;
  std::vector<double> instance_scores;    // empty for embedding-only kinds
  std::vector<double> attention_weights;  // empty for max/topk
};

AggregatorModel init_aggregator(Kind kind, std::size_t input_dim, const AggregatorConfig& cfg,
                                std::uint64_t seed);

// The five aggregators. All are permutation-invariant in bag_score (bitwise:
// instance reductions run in a canonical row order) and reject empty bags.
BagPrediction max_pool(const num::Matrix& H, const AggregatorModel& m);
BagPrediction topk_pool(const num::Matrix& H, const AggregatorModel& m, double ratio);
BagPrediction attention_mil(const num::Matrix& H, const AggregatorModel& m, AttentionMode mode);
BagPrediction ds_mil(const num::Matrix& H, const AggregatorModel& m);
BagPrediction transformer_agg(const num::Matrix& H, const AggregatorModel& m);

// Dispatch on m.kind.
BagPrediction predict(const AggregatorModel& m, const num::Matrix& H);

// phi(h_k) per instance; CapabilityError for kinds without an instance
// classifier (attention in embedding mode, transformer) directing the caller
// to attach an auxiliary probe.
std::vector<double> instance_scores(const AggregatorModel& m, const num::Matrix& H);

// Views over the parameters the kind actually trains (canonical order).
std::vector<num::Matrix*> param_refs(AggregatorModel& m);
std::vector<const num::Matrix*> param_refs(const AggregatorModel& m);

// Tape forward used by the trainer and by end-to-end training.
struct StagedAggregator {
  std::vector<num::Var> params;  // same order as param_refs
  num::Var phi_w, phi_b, attn_V, attn_w, bag_w, bag_b, q_proj, v_proj;
  std::vector<std::array<num::Var, 12>> blocks;
};
StagedAggregator stage_model(num::GradTape& tape, const AggregatorModel& m);

struct AggForward {
  num::Var bag_prob;                       // 1 x 1
  std::optional<num::Var> instance_probs;  // K x 1, original row order
  std::optional<num::Var> stream_inst;     // ds_mil instance-stream probability
  std::optional<num::Var> stream_emb;      // ds_mil embedding-stream probability
  std::optional<num::Var> attention;       // 1 x K, canonical order
  std::vector<std::uint32_t> perm;         // canonical row order used for reductions
};
AggForward forward_on_tape(num::GradTape& tape, const AggregatorModel& m,
                           const StagedAggregator& staged, num::Var H);

// Per-bag training loss on the tape (bag-level BCE; ds_mil uses its weighted
// dual-stream cross-entropy).
num::Var training_loss(num::GradTape& tape, const AggregatorModel& m, const AggForward& fwd,
                       int bag_label);

// Adam with bias correction; `lr_now` overrides the stored schedule-free rate.
struct AdamState {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::size_t t = 0;
  std::vector<num::Matrix> m1, m2;
};
AdamState make_adam_state(double beta1, double beta2, double eps,
                          std::span<num::Matrix* const> params);
void adam_step(std::span<num::Matrix* const> params, std::span<const num::Matrix> grads,
               AdamState& state, double lr_now);

struct TrainedAggregator {
  AggregatorModel model;
  double best_val_auc = 0.0;
  std::size_t best_epoch = 0;
};

// Per-bag Adam training with model selection on validation bag AUC (the best
// epoch's parameters are returned). DataError when the training split has a
// single class.
TrainedAggregator train_aggregator(std::span<const num::Matrix> train_bags,
                                   std::span<const std::uint8_t> train_labels,
                                   std::span<const num::Matrix> val_bags,
                                   std::span<const std::uint8_t> val_labels, Kind kind,
                                   const AggregatorConfig& cfg, std::uint64_t seed);

// Logistic probe on frozen embeddings (the linear-evaluation pipeline and the
// auxiliary instance classifier for embedding-only kinds). Full-batch Adam
// from a zero init, so the fit is deterministic.
struct LinearProbe {
  num::Matrix w, b;  // 1 x d, 1 x 1
};
LinearProbe train_linear_probe(const num::Matrix& x, std::span<const std::uint8_t> y,
                               std::size_t epochs = 200, double lr = 0.05);
std::vector<double> probe_scores(const LinearProbe& probe, const num::Matrix& x);

// Binary checkpoint, magic "MILA1\0".
void save_checkpoint(const AggregatorModel& m, const std::filesystem::path& path);
AggregatorModel load_checkpoint(const std::filesystem::path& path);

}  // namespace mil::agg
