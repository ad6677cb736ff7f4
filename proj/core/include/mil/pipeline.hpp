#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mil/aggregators.hpp"
#include "mil/data.hpp"
#include "mil/encoder.hpp"
#include "mil/matrix.hpp"
#include "mil/metrics.hpp"
#include "mil/sampler.hpp"

namespace mil::pipeline {

struct PretrainConfig {
  std::size_t epochs = 20;
  std::size_t batch = 128;
  double lr = 0.03;
  double weight_decay = 1e-4;
  double momentum = 0.9;
  double temperature = 0.5;
  double augment_strength = 0.1;
};

struct FinetuneConfig {
  std::size_t epochs = 50;        // T
  std::size_t warmup_epochs = 5;  // T_warm-up (the schedule default is 10% of T)
  std::size_t steps_per_epoch = 16;
  sampler::BatchSpec batch;
  std::size_t ce_batch = 256;  // instance minibatch for cross-entropy finetuning
  double lr = 1e-2;
  double weight_decay = 1e-4;
  double momentum = 0.9;
  double temperature = 0.5;
  double augment_strength = 0.1;
};

struct EncoderConfig {
  std::size_t embed_dim = 32;  // d
  std::size_t proj_dim = 16;   // d'
  std::vector<std::size_t> hidden_widths = {64};
  std::vector<std::size_t> projection_hidden = {};  // empty: single linear layer
};

struct TrainConfig {
  double eta = 0.3;  // pseudo-label binarization threshold
  double r0 = 0.2;
  double rT = 0.8;
  double p_plus = 0.2;
  std::size_t refresh_period = 5;  // epochs between aggregator retrain + refresh attempts
  bool iterative = true;           // refresh pseudo labels through the validation gate
  bool self_paced = true;          // false: r == 1 and no warm-up (all pseudo labels used)
  EncoderConfig encoder;
  PretrainConfig pretrain;
  FinetuneConfig finetune;
  agg::Kind aggregator_kind = agg::Kind::ds_mil;
  agg::AggregatorConfig aggregator;
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  void validate() const;
  sampler::SpsSchedule schedule() const;
};

struct PseudoLabelState {
  std::vector<double> scores;          // per train instance (train-local index)
  std::vector<std::uint8_t> labels;
  std::vector<double> auc_history;     // validation bag AUC per refresh round
  std::ptrdiff_t last_accepted_round = -1;
};

// label = 1 iff score > eta (strict); negative-bag instances are forced to 0.
std::vector<std::uint8_t> binarize(std::span<const double> scores, double eta,
                                   std::span<const std::uint8_t> bag_label_per_instance);

// True iff auc_now >= max(auc_history); an empty history accepts.
bool update_gate(std::span<const double> auc_history, double auc_now);

// Argmax of validation AUC; ties resolve to the earliest round.
std::size_t model_select(std::span<const double> val_bag_aucs);

struct CurveRow {
  std::size_t round = 0;
  std::size_t epoch = 0;
  data::Split split = data::Split::train;
  double bag_auc = 0.0;
  double inst_auc = 0.0;        // nan without ground-truth instance labels
  double inst_max_f1 = 0.0;     // nan without ground-truth instance labels
  double pseudo_precision = 0.0;  // train rows only; nan elsewhere
  double pseudo_recall = 0.0;
};

struct SplitReports {
  metrics::MetricsReport train, val, test;
};

struct RunArtifacts {
  std::vector<CurveRow> curves;
  std::vector<double> round_val_auc;  // one entry per refresh round
  std::size_t best_round = 0;
  std::vector<encoder::EncoderParams> round_encoders;
  std::vector<agg::AggregatorModel> round_aggregators;
  encoder::EncoderParams final_encoder;
  agg::AggregatorModel final_aggregator;
  PseudoLabelState pseudo;
  SplitReports reports;
  std::size_t sampler_replacement_fallbacks = 0;
};

struct PretrainResult {
  encoder::EncoderParams params;
  std::vector<double> epoch_loss;
};

// InfoNCE pretraining over uniformly sampled training instances with one
// augmented view per anchor and in-batch negatives (batch - 1 per anchor).
PretrainResult run_cssl_pretrain(const data::Dataset& ds, const TrainConfig& cfg);

// The iterative loop: round-0 aggregator, then alternate supervised
// contrastive finetuning with gate-checked pseudo-label refreshes every
// refresh_period epochs. The returned model is the best-validation round.
RunArtifacts run_its2clr(const data::Dataset& ds, const TrainConfig& cfg,
                         const encoder::EncoderParams& pretrained);

// Instance cross-entropy finetuning on pseudo labels; `iterative` refreshes
// them through the same gate machinery.
RunArtifacts run_ce_finetune(const data::Dataset& ds, const TrainConfig& cfg,
                             const encoder::EncoderParams& pretrained, bool iterative);

// Supervised contrastive finetuning on ground-truth instance labels
// (pools with r == 1, no gate); the upper-bound baseline.
RunArtifacts run_groundtruth_finetune(const data::Dataset& ds, const TrainConfig& cfg,
                                      const encoder::EncoderParams& pretrained);

// Joint encoder + aggregator training on bag-level cross-entropy.
RunArtifacts run_end2end(const data::Dataset& ds, const TrainConfig& cfg,
                         const encoder::EncoderParams& pretrained);

// Aggregator-only training on frozen embeddings (also used for round 0).
RunArtifacts run_aggregator_only(const data::Dataset& ds, const TrainConfig& cfg,
                                 const encoder::EncoderParams& frozen);

// Forward the whole feature table through f, row-parallel across `threads`.
num::Matrix embed_all(const encoder::EncoderParams& params, const num::Matrix& features,
                      std::size_t threads);

// Run-directory writers (layout documented in the README).
void write_curves_csv(std::span<const CurveRow> curves, const std::filesystem::path& path);
void write_report_csv(const SplitReports& reports, const std::filesystem::path& path);
void write_pseudo_labels_csv(const PseudoLabelState& state,
                             std::span<const std::uint32_t> train_instance_ids,
                             const std::filesystem::path& path);
void write_pretrain_loss_csv(std::span<const double> epoch_loss,
                             const std::filesystem::path& path);
void write_run_artifacts(const RunArtifacts& artifacts, const data::Dataset& ds,
                         const std::filesystem::path& dir);

}  // namespace mil::pipeline
