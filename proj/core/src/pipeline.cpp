#include "mil/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <thread>

#include "mil/errors.hpp"
#include "mil/losses.hpp"
#include "mil/rng.hpp"

namespace mil::pipeline {

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

// seed-stream tags
constexpr std::uint64_t kTagPretrain = 0x707265;   // "pre"
constexpr std::uint64_t kTagFinetune = 0x66696e;   // "fin"
constexpr std::uint64_t kTagAggRound = 0x616767;   // "agg"
constexpr std::uint64_t kTagHead = 0x686561;       // "hea"
constexpr std::uint64_t kTagEnd2End = 0x653265;    // "e2e"

enum class Mode { its2clr, ce, groundtruth, agg_only };

struct SplitView {
  data::Split split = data::Split::train;
  std::vector<const data::Bag*> bags;
  std::vector<std::uint8_t> bag_labels;
  std::vector<std::uint32_t> instance_ids;     // global ids, bag-major
  std::vector<std::uint8_t> inst_bag_labels;   // per local instance
  std::vector<std::uint8_t> inst_true_labels;  // per local instance, when available
  bool has_truth = false;

  std::size_t size() const { return instance_ids.size(); }
};

SplitView make_view(const data::Dataset& ds, data::Split s) {
  SplitView v;
  v.split = s;
  v.bags = ds.bags_in(s);
  v.has_truth = !v.bags.empty();
  for (const data::Bag* b : v.bags) {
    v.bag_labels.push_back(b->label ? 1 : 0);
    if (!b->has_instance_labels()) v.has_truth = false;
    for (std::uint32_t i = b->start; i < b->end; ++i) {
      v.instance_ids.push_back(i);
      v.inst_bag_labels.push_back(b->label ? 1 : 0);
    }
  }
  if (v.has_truth) {
    for (const data::Bag* b : v.bags) {
      v.inst_true_labels.insert(v.inst_true_labels.end(), b->instance_labels.begin(),
                                b->instance_labels.end());
    }
  }
  return v;
}

num::Matrix view_embeddings(const num::Matrix& h_all, const SplitView& view) {
  num::Matrix out(view.size(), h_all.cols());
  for (std::size_t i = 0; i < view.size(); ++i) {
    std::copy_n(h_all.row_span(view.instance_ids[i]).data(), h_all.cols(),
                out.row_span(i).data());
  }
  return out;
}

std::vector<num::Matrix> bag_embeddings(const num::Matrix& h_all, const SplitView& view) {
  std::vector<num::Matrix> out;
  out.reserve(view.bags.size());
  for (const data::Bag* b : view.bags) {
    num::Matrix h(b->size(), h_all.cols());
    for (std::uint32_t i = b->start; i < b->end; ++i) {
      std::copy_n(h_all.row_span(i).data(), h_all.cols(), h.row_span(i - b->start).data());
    }
    out.push_back(std::move(h));
  }
  return out;
}

std::vector<double> bag_scores(const agg::AggregatorModel& model,
                               std::span<const num::Matrix> bags) {
  std::vector<double> scores;
  scores.reserve(bags.size());
  for (const auto& h : bags) scores.push_back(agg::predict(model, h).bag_score);
  return scores;
}

bool kind_has_phi(agg::Kind kind, agg::AttentionMode mode) {
  switch (kind) {
    case agg::Kind::max_pool:
    case agg::Kind::topk:
    case agg::Kind::ds_mil:
      return true;
    case agg::Kind::attention:
      return mode == agg::AttentionMode::instance;
    case agg::Kind::transformer:
      return false;
  }
  return false;
}

// Instances the sampler may touch at the given finetune epoch; used for the
// pseudo-label precision/recall curves.
std::vector<std::uint32_t> sampler_selection(const sampler::InstancePools& base,
                                             std::span<const double> scores,
                                             const sampler::SpsSchedule& sched,
                                             std::size_t epoch) {
  std::vector<std::uint32_t> sel = base.neg_bag;
  if (epoch <= sched.warmup_epochs) {
    sel.insert(sel.end(), base.pos_pseudo.begin(), base.pos_pseudo.end());
    return sel;
  }
  sampler::InstancePools pools = base;
  sampler::select_confident(pools, scores, sampler::rate_schedule(static_cast<double>(epoch), sched));
  sel.insert(sel.end(), pools.pos_confident.begin(), pools.pos_confident.end());
  sel.insert(sel.end(), pools.neg_confident.begin(), pools.neg_confident.end());
  return sel;
}

struct AugmentedBatch {
  num::Matrix x;  // augmented feature rows
};

num::Matrix gather_features(const data::Dataset& ds, std::span<const std::uint32_t> global_ids) {
  num::Matrix x(global_ids.size(), ds.feature_dim());
  for (std::size_t i = 0; i < global_ids.size(); ++i) {
    std::copy_n(ds.features.row_span(global_ids[i]).data(), ds.feature_dim(),
                x.row_span(i).data());
  }
  return x;
}

// Curve/report cells stay NaN when a metric is undefined for the split.
template <typename Fn>
double metric_or_nan(Fn&& fn) {
  try {
    return fn();
  } catch (const UndefinedMetricError&) {
    return kNan;
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (!(eta > 0.0 && eta < 1.0)) throw ConfigError("train: eta must be in (0, 1)");
  if (refresh_period == 0) throw ConfigError("train: refresh_period must be >= 1");
  if (finetune.epochs < refresh_period) {
    throw ConfigError("train: finetune epochs must be >= refresh_period");
  }
  if (finetune.steps_per_epoch == 0) throw ConfigError("train: steps_per_epoch must be >= 1");
  if (threads == 0) throw ConfigError("train: threads must be >= 1");
  if (self_paced) schedule().validate();
}

sampler::SpsSchedule TrainConfig::schedule() const {
  sampler::SpsSchedule s;
  s.r0 = r0;
  s.rT = rT;
  s.warmup_epochs = finetune.warmup_epochs;
  s.total_epochs = finetune.epochs;
  s.positive_anchor_ratio = p_plus;
  return s;
}

std::vector<std::uint8_t> binarize(std::span<const double> scores, double eta,
                                   std::span<const std::uint8_t> bag_label_per_instance) {
  if (scores.size() != bag_label_per_instance.size()) {
    throw ShapeError("binarize: span length mismatch");
  }
  std::vector<std::uint8_t> labels(scores.size(), 0);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    // Strict threshold; negative bags contain only negatives.
    labels[i] = (bag_label_per_instance[i] != 0 && scores[i] > eta) ? 1 : 0;
  }
  return labels;
}

bool update_gate(std::span<const double> auc_history, double auc_now) {
  for (double prev : auc_history) {
    if (auc_now < prev) return false;
  }
  return true;
}

std::size_t model_select(std::span<const double> val_bag_aucs) {
  if (val_bag_aucs.empty()) throw StateError("model_select: no checkpoints");
  std::size_t best = 0;
  for (std::size_t i = 1; i < val_bag_aucs.size(); ++i) {
    if (val_bag_aucs[i] > val_bag_aucs[best]) best = i;  // ties keep the earliest
  }
  return best;
}

num::Matrix embed_all(const encoder::EncoderParams& params, const num::Matrix& features,
                      std::size_t threads) {
  const std::size_t n = features.rows();
  num::Matrix out(n, params.dims.embed_dim);
  const std::size_t workers = std::max<std::size_t>(1, std::min(threads, n));
  auto work = [&](std::size_t begin, std::size_t end) {
    if (begin >= end) return;
    num::Matrix chunk(end - begin, features.cols());
    std::copy_n(features.data().begin() + begin * features.cols(),
                (end - begin) * features.cols(), chunk.data().begin());
    const num::Matrix h = encoder::forward_features(params, chunk);
    std::copy_n(h.data().begin(), h.size(), out.data().begin() + begin * out.cols());
  };
  if (workers == 1) {
    work(0, n);
  } else {
    std::vector<std::thread> pool;
    const std::size_t per = (n + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back(work, w * per, std::min(n, (w + 1) * per));
    }
    for (auto& t : pool) t.join();
  }
  return out;
}

PretrainResult run_cssl_pretrain(const data::Dataset& ds, const TrainConfig& cfg) {
  cfg.validate();
  if (ds.instance_count() < 2) throw DataError("pretrain: need at least two instances");
  const SplitView train = make_view(ds, data::Split::train);
  if (train.size() < 2) throw DataError("pretrain: need at least two training instances");

  encoder::EncoderDims dims{ds.feature_dim(), cfg.encoder.embed_dim, cfg.encoder.proj_dim};
  encoder::EncoderParams params = encoder::init_params(
      dims, cfg.encoder.hidden_widths, seed_stream(cfg.seed, kTagPretrain),
      cfg.encoder.projection_hidden);
  const std::vector<num::Matrix*> refs = encoder::param_refs(params);
  encoder::SgdState sgd = encoder::make_sgd_state(cfg.pretrain.lr, cfg.pretrain.momentum,
                                                  cfg.pretrain.weight_decay, refs);

  PretrainResult result;
  const std::size_t batch = std::min<std::size_t>(std::max<std::size_t>(2, cfg.pretrain.batch),
                                                  train.size());
  std::vector<std::uint32_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < cfg.pretrain.epochs; ++epoch) {
    sgd.learning_rate = encoder::cosine_lr(epoch, cfg.pretrain.epochs, cfg.pretrain.lr);
    Rng rng = make_rng(cfg.seed, kTagPretrain, epoch + 1);
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t steps = 0;

    for (std::size_t at = 0; at + 2 <= train.size(); at += batch) {
      const std::size_t b = std::min(batch, train.size() - at);
      if (b < 2) break;
      std::vector<std::uint32_t> ids(b);
      for (std::size_t i = 0; i < b; ++i) ids[i] = train.instance_ids[order[at + i]];

      // Rows 0..b-1 are the anchors, rows b..2b-1 their augmented views.
      num::Matrix x(2 * b, ds.feature_dim());
      for (std::size_t i = 0; i < b; ++i) {
        const auto row = ds.features.row_span(ids[i]);
        std::copy_n(row.data(), row.size(), x.row_span(i).data());
        data::augment(row, cfg.pretrain.augment_strength, rng, x.row_span(b + i));
      }

      num::GradTape tape;
      encoder::EncoderVars vars = encoder::stage_params(tape, params);
      const num::Var z =
          encoder::projection_on_tape(tape, vars, encoder::features_on_tape(tape, vars, tape.input(x)));

      num::Var total = num::Var{0};
      bool first = true;
      std::vector<std::uint32_t> diffs;
      for (std::uint32_t i = 0; i < b; ++i) {
        diffs.clear();
        for (std::uint32_t j = 0; j < b; ++j) {
          if (j != i) diffs.push_back(j);
        }
        const num::Var term = losses::info_nce_term(tape, z, i, static_cast<std::uint32_t>(b + i),
                                                    diffs, cfg.pretrain.temperature);
        total = first ? term : tape.add(total, term);
        first = false;
      }
      const num::Var loss = tape.scale(total, 1.0 / static_cast<double>(b));
      epoch_loss += tape.value(loss)[0];
      ++steps;

      const std::vector<num::Matrix> grads = tape.gradients(loss, vars.all);
      encoder::sgd_step(refs, grads, sgd);
    }
    result.epoch_loss.push_back(steps > 0 ? epoch_loss / static_cast<double>(steps) : 0.0);
  }
  result.params = std::move(params);
  return result;
}

namespace {

struct RoundContext {
  const data::Dataset& ds;
  const TrainConfig& cfg;
  Mode mode;
  bool iterative;
  sampler::SpsSchedule sched;  // effective schedule (r == 1 for gt / no-SPL)
  bool use_warmup = true;

  SplitView train, val, test;

  encoder::EncoderParams enc;
  PseudoLabelState state;
  RunArtifacts artifacts;
};

void round_curves(RoundContext& c, const agg::AggregatorModel& model, const num::Matrix& h_all,
                  std::size_t round, std::size_t epoch) {
  const bool phi = kind_has_phi(model.kind, model.cfg.attention_mode);
  for (const SplitView* view : {&c.train, &c.val, &c.test}) {
    if (view->bags.empty()) continue;
    CurveRow row;
    row.round = round;
    row.epoch = epoch;
    row.split = view->split;
    const auto bags = bag_embeddings(h_all, *view);
    row.bag_auc =
        metric_or_nan([&] { return metrics::roc_auc(view->bag_labels, bag_scores(model, bags)); });
    row.inst_auc = kNan;
    row.inst_max_f1 = kNan;
    row.pseudo_precision = kNan;
    row.pseudo_recall = kNan;
    if (phi && view->has_truth) {
      const std::vector<double> scores = agg::instance_scores(model, view_embeddings(h_all, *view));
      row.inst_auc = metric_or_nan([&] { return metrics::roc_auc(view->inst_true_labels, scores); });
      row.inst_max_f1 =
          metric_or_nan([&] { return metrics::max_f1(view->inst_true_labels, scores).f1; });
    }
    if (view->split == data::Split::train && view->has_truth && !c.state.labels.empty()) {
      std::vector<std::uint32_t> selection;
      if (c.mode == Mode::ce || c.mode == Mode::agg_only ||
          c.state.scores.size() != view->size()) {
        selection.resize(view->size());
        std::iota(selection.begin(), selection.end(), 0);
      } else {
        std::vector<std::int8_t> pseudo(c.state.labels.begin(), c.state.labels.end());
        const auto pools = sampler::partition_instances(view->inst_bag_labels, pseudo);
        const std::size_t eff = std::min(epoch + 1, c.sched.total_epochs);
        selection = sampler_selection(pools, c.state.scores, c.sched, eff);
      }
      const auto q = metrics::pseudo_quality(view->inst_true_labels, c.state.labels, selection);
      row.pseudo_precision = q.precision;
      row.pseudo_recall = q.recall;
    }
    c.artifacts.curves.push_back(row);
  }
}

// Embeddings, aggregator retrain, validation gate, pseudo-label refresh,
// curves and checkpoint snapshots for one refresh round.
void run_round(RoundContext& c, std::size_t round, std::size_t epoch) {
  const num::Matrix h_all = embed_all(c.enc, c.ds.features, c.cfg.threads);
  const auto train_bags = bag_embeddings(h_all, c.train);
  const auto val_bags = bag_embeddings(h_all, c.val);

  agg::TrainedAggregator trained = agg::train_aggregator(
      train_bags, c.train.bag_labels, val_bags, c.val.bag_labels, c.cfg.aggregator_kind,
      c.cfg.aggregator, seed_stream(c.cfg.seed, kTagAggRound, round));

  const double auc_now = trained.best_val_auc;
  if (kind_has_phi(trained.model.kind, trained.model.cfg.attention_mode)) {
    const std::vector<double> scores =
        agg::instance_scores(trained.model, view_embeddings(h_all, c.train));
    if (c.mode == Mode::groundtruth) {
      c.state.scores = scores;  // labels stay ground truth; the gate is never consulted
    } else {
      const bool accept = round == 0 || (c.iterative && update_gate(c.state.auc_history, auc_now));
      if (accept) {
        c.state.scores = scores;
        c.state.labels = binarize(scores, c.cfg.eta, c.train.inst_bag_labels);
        c.state.last_accepted_round = static_cast<std::ptrdiff_t>(round);
      }
    }
  }
  c.state.auc_history.push_back(auc_now);
  c.artifacts.round_val_auc.push_back(auc_now);
  c.artifacts.round_encoders.push_back(c.enc);
  c.artifacts.round_aggregators.push_back(trained.model);
  round_curves(c, trained.model, h_all, round, epoch);
}

void contrastive_epoch(RoundContext& c, std::span<num::Matrix* const> refs,
                       encoder::SgdState& sgd, std::size_t epoch) {
  const std::vector<std::uint8_t>& labels =
      c.mode == Mode::groundtruth ? c.train.inst_true_labels : c.state.labels;
  std::vector<std::int8_t> pseudo(labels.begin(), labels.end());
  sampler::InstancePools pools = sampler::partition_instances(c.train.inst_bag_labels, pseudo);
  const bool warmup = c.use_warmup && epoch <= c.sched.warmup_epochs;
  if (!warmup) {
    const double r = sampler::rate_schedule(static_cast<double>(epoch), c.sched);
    std::vector<double> conf = c.state.scores;
    if (conf.size() != labels.size()) {
      // No aggregator instance scores (embedding-only kind under ground
      // truth); r == 1 there, so ranking by label is a no-op stand-in.
      conf.assign(labels.begin(), labels.end());
    }
    sampler::select_confident(pools, conf, r);
  }

  Rng rng = make_rng(c.cfg.seed, kTagFinetune, epoch);
  for (std::size_t step = 0; step < c.cfg.finetune.steps_per_epoch; ++step) {
    sampler::ContrastiveBatch batch =
        sampler::draw_batch(pools, c.sched, epoch, c.cfg.finetune.batch, rng);
    c.artifacts.sampler_replacement_fallbacks += batch.replacement_fallbacks;

    // Row layout per anchor: [anchor, S..., D...].
    std::vector<std::uint32_t> global_ids;
    for (std::size_t i = 0; i < batch.anchors.size(); ++i) {
      global_ids.push_back(c.train.instance_ids[batch.anchors[i]]);
      for (std::uint32_t id : batch.same_sets[i]) global_ids.push_back(c.train.instance_ids[id]);
      for (std::uint32_t id : batch.diff_sets[i]) global_ids.push_back(c.train.instance_ids[id]);
    }
    num::Matrix x = gather_features(c.ds, global_ids);
    x = data::augment_rows(x, c.cfg.finetune.augment_strength, rng);

    num::GradTape tape;
    encoder::EncoderVars vars = encoder::stage_params(tape, c.enc);
    const num::Var z = encoder::projection_on_tape(
        tape, vars, encoder::features_on_tape(tape, vars, tape.input(x)));

    num::Var total{0};
    std::uint32_t at = 0;
    for (std::size_t i = 0; i < batch.anchors.size(); ++i) {
      const std::uint32_t anchor = at++;
      std::vector<std::uint32_t> same, diff;
      for (std::size_t j = 0; j < batch.same_sets[i].size(); ++j) same.push_back(at++);
      for (std::size_t j = 0; j < batch.diff_sets[i].size(); ++j) diff.push_back(at++);
      const num::Var term =
          losses::sup_con_term(tape, z, anchor, same, diff, c.cfg.finetune.temperature);
      total = i == 0 ? term : tape.add(total, term);
    }
    const num::Var loss = tape.scale(total, 1.0 / static_cast<double>(batch.anchors.size()));
    const std::vector<num::Matrix> grads = tape.gradients(loss, vars.all);
    encoder::sgd_step(refs, grads, sgd);
  }
}

void ce_epoch(RoundContext& c, num::Matrix& head_w, num::Matrix& head_b,
              std::span<num::Matrix* const> refs, encoder::SgdState& sgd, std::size_t epoch) {
  Rng rng = make_rng(c.cfg.seed, kTagFinetune, epoch);
  std::vector<std::uint32_t> order(c.train.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  const std::size_t batch = std::max<std::size_t>(1, c.cfg.finetune.ce_batch);
  for (std::size_t at = 0; at < order.size(); at += batch) {
    const std::size_t b = std::min(batch, order.size() - at);
    std::vector<std::uint32_t> global_ids(b);
    num::Matrix targets(b, 1);
    for (std::size_t i = 0; i < b; ++i) {
      const std::uint32_t local = order[at + i];
      global_ids[i] = c.train.instance_ids[local];
      targets(i, 0) = c.state.labels[local] ? 1.0 : 0.0;
    }
    num::Matrix x = gather_features(c.ds, global_ids);
    x = data::augment_rows(x, c.cfg.finetune.augment_strength, rng);

    num::GradTape tape;
    encoder::EncoderVars vars = encoder::stage_params(tape, c.enc);
    const num::Var hw = tape.input(head_w);
    const num::Var hb = tape.input(head_b);
    const num::Var h = encoder::features_on_tape(tape, vars, tape.input(x));
    const num::Var probs = tape.sigmoid(tape.add_rowvec(tape.matmul_nt(h, hw), hb));
    const num::Var loss = tape.bce_mean(probs, targets);

    std::vector<num::Var> wrt = vars.all;
    wrt.push_back(hw);
    wrt.push_back(hb);
    const std::vector<num::Matrix> grads = tape.gradients(loss, wrt);
    encoder::sgd_step(refs, grads, sgd);
  }
}

SplitReports final_reports(RoundContext& c) {
  SplitReports reports;
  const num::Matrix h_all = embed_all(c.artifacts.final_encoder, c.ds.features, c.cfg.threads);
  const agg::AggregatorModel& model = c.artifacts.final_aggregator;
  const bool phi = kind_has_phi(model.kind, model.cfg.attention_mode);

  // Dice calibration and the IoU threshold both come from the validation split.
  std::vector<double> val_scores;
  if (phi && c.val.has_truth) {
    val_scores = agg::instance_scores(model, view_embeddings(h_all, c.val));
  }

  auto report_for = [&](const SplitView& view) {
    metrics::MetricsReport r;
    r.bag_auc = kNan;
    r.instance_auc = r.instance_auprc = r.instance_max_f1 = r.dice = r.iou = kNan;
    r.inter_class_distance = r.intra_class_deviation_pos = r.intra_class_deviation_neg = kNan;
    r.pseudo_label_precision = r.pseudo_label_recall = kNan;
    if (view.bags.empty()) return r;
    r.bag_auc = metric_or_nan([&] {
      return metrics::roc_auc(view.bag_labels, bag_scores(model, bag_embeddings(h_all, view)));
    });
    const num::Matrix h_view = view_embeddings(h_all, view);
    if (view.has_truth) {
      try {
        const auto stats = metrics::class_stats(h_view, view.inst_true_labels);
        r.inter_class_distance = stats.inter_class_distance;
        r.intra_class_deviation_pos = stats.dev_pos;
        r.intra_class_deviation_neg = stats.dev_neg;
      } catch (const UndefinedMetricError&) {
      }
      if (phi) {
        const std::vector<double> scores = agg::instance_scores(model, h_view);
        r.instance_auc = metric_or_nan([&] { return metrics::roc_auc(view.inst_true_labels, scores); });
        r.instance_auprc = metric_or_nan([&] { return metrics::aupr(view.inst_true_labels, scores); });
        r.instance_max_f1 =
            metric_or_nan([&] { return metrics::max_f1(view.inst_true_labels, scores).f1; });
        if (!val_scores.empty()) {
          try {
            r.dice = metrics::dice_calibrated(view.inst_true_labels, scores,
                                              c.val.inst_true_labels, val_scores)
                         .first;
            const double thr = metrics::max_f1(c.val.inst_true_labels, val_scores).threshold;
            std::vector<std::uint8_t> preds(scores.size());
            for (std::size_t i = 0; i < scores.size(); ++i) preds[i] = scores[i] >= thr ? 1 : 0;
            r.iou = metrics::iou(view.inst_true_labels, preds);
          } catch (const ConfigError&) {
          } catch (const UndefinedMetricError&) {
          }
        }
      }
    }
    if (view.split == data::Split::train && view.has_truth && !c.state.labels.empty()) {
      std::vector<std::uint32_t> all(view.size());
      std::iota(all.begin(), all.end(), 0);
      const auto q = metrics::pseudo_quality(view.inst_true_labels, c.state.labels, all);
      r.pseudo_label_precision = q.precision;
      r.pseudo_label_recall = q.recall;
    }
    return r;
  };
  reports.train = report_for(c.train);
  reports.val = report_for(c.val);
  reports.test = report_for(c.test);
  return reports;
}

RunArtifacts run_iterative(const data::Dataset& ds, const TrainConfig& cfg,
                           const encoder::EncoderParams& pretrained, Mode mode, bool iterative) {
  cfg.validate();
  if (ds.feature_dim() != pretrained.dims.input_dim) {
    throw ShapeError("run: dataset dim does not match the encoder input dim");
  }
  if (mode == Mode::groundtruth && !ds.has_instance_labels()) {
    throw DataError("ground-truth finetuning needs instance labels");
  }
  if ((mode == Mode::its2clr || mode == Mode::ce) &&
      !kind_has_phi(cfg.aggregator_kind, cfg.aggregator.attention_mode)) {
    throw ConfigError(
        "pseudo-label training needs an instance-scoring aggregator "
        "(max, topk, attention in instance mode, or ds_mil)");
  }

  RoundContext c{ds, cfg, mode, iterative, {}, true, make_view(ds, data::Split::train),
                 make_view(ds, data::Split::val), make_view(ds, data::Split::test)};
  if (c.train.bags.empty() || c.val.bags.empty()) {
    throw DataError("run: train and val splits must be nonempty");
  }
  c.enc = pretrained;

  // Effective schedule: ground truth uses r == 1 (full pools); without
  // self-paced learning all pseudo labels are used from the start.
  c.sched = cfg.schedule();
  if (mode == Mode::groundtruth) {
    c.sched.r0 = c.sched.rT = 1.0;
  }
  if (!cfg.self_paced) {
    c.sched.r0 = c.sched.rT = 1.0;
    c.sched.warmup_epochs = 0;
    c.use_warmup = false;
  }
  if (mode == Mode::groundtruth) {
    c.state.labels.assign(c.train.inst_true_labels.begin(), c.train.inst_true_labels.end());
    c.state.last_accepted_round = 0;
  }

  run_round(c, 0, 0);
  if (mode == Mode::agg_only) {
    c.artifacts.best_round = 0;
    c.artifacts.final_encoder = c.enc;
    c.artifacts.final_aggregator = c.artifacts.round_aggregators[0];
    c.artifacts.pseudo = c.state;
    c.artifacts.reports = final_reports(c);
    return std::move(c.artifacts);
  }

  // Optimizer state persists across refresh rounds.
  std::vector<num::Matrix*> refs = encoder::param_refs(c.enc);
  num::Matrix head_w, head_b;
  if (mode == Mode::ce) {
    Rng rng = make_rng(cfg.seed, kTagHead);
    head_w = num::Matrix(1, c.enc.dims.embed_dim);
    const double stddev = std::sqrt(2.0 / static_cast<double>(c.enc.dims.embed_dim));
    for (auto& w : head_w.data()) w = rand_normal(rng, 0.0, stddev);
    head_b = num::Matrix(1, 1);
    refs.push_back(&head_w);
    refs.push_back(&head_b);
  }
  encoder::SgdState sgd = encoder::make_sgd_state(cfg.finetune.lr, cfg.finetune.momentum,
                                                  cfg.finetune.weight_decay, refs);

  std::size_t round = 0;
  for (std::size_t epoch = 1; epoch <= cfg.finetune.epochs; ++epoch) {
    try {
      if (mode == Mode::ce) {
        ce_epoch(c, head_w, head_b, refs, sgd, epoch);
      } else {
        contrastive_epoch(c, refs, sgd, epoch);
      }
    } catch (const BatchError& e) {
      throw BatchError(std::string(e.what()) + " at finetune epoch " + std::to_string(epoch) +
                           ", round " + std::to_string(round),
                       e.pool);
    }
    if (epoch % cfg.refresh_period == 0) {
      run_round(c, ++round, epoch);
    }
  }

  c.artifacts.best_round = model_select(c.artifacts.round_val_auc);
  c.artifacts.final_encoder = c.artifacts.round_encoders[c.artifacts.best_round];
  c.artifacts.final_aggregator = c.artifacts.round_aggregators[c.artifacts.best_round];
  c.artifacts.pseudo = c.state;
  c.artifacts.reports = final_reports(c);
  return std::move(c.artifacts);
}

}  // namespace

RunArtifacts run_its2clr(const data::Dataset& ds, const TrainConfig& cfg,
                         const encoder::EncoderParams& pretrained) {
  return run_iterative(ds, cfg, pretrained, Mode::its2clr, cfg.iterative);
}

RunArtifacts run_ce_finetune(const data::Dataset& ds, const TrainConfig& cfg,
                             const encoder::EncoderParams& pretrained, bool iterative) {
  return run_iterative(ds, cfg, pretrained, Mode::ce, iterative);
}

RunArtifacts run_groundtruth_finetune(const data::Dataset& ds, const TrainConfig& cfg,
                                      const encoder::EncoderParams& pretrained) {
  return run_iterative(ds, cfg, pretrained, Mode::groundtruth, false);
}

RunArtifacts run_aggregator_only(const data::Dataset& ds, const TrainConfig& cfg,
                                 const encoder::EncoderParams& frozen) {
  return run_iterative(ds, cfg, frozen, Mode::agg_only, false);
}

RunArtifacts run_end2end(const data::Dataset& ds, const TrainConfig& cfg,
                         const encoder::EncoderParams& pretrained) {
  cfg.validate();
  if (ds.feature_dim() != pretrained.dims.input_dim) {
    throw ShapeError("run: dataset dim does not match the encoder input dim");
  }
  RoundContext c{ds,
                 cfg,
                 Mode::agg_only,
                 false,
                 cfg.self_paced ? cfg.schedule() : sampler::SpsSchedule{1.0, 1.0, 0,
                                                                        cfg.finetune.epochs, cfg.p_plus},
                 false,
                 make_view(ds, data::Split::train),
                 make_view(ds, data::Split::val),
                 make_view(ds, data::Split::test)};
  if (c.train.bags.empty() || c.val.bags.empty()) {
    throw DataError("run: train and val splits must be nonempty");
  }
  c.enc = pretrained;

  agg::AggregatorModel model = agg::init_aggregator(
      cfg.aggregator_kind, pretrained.dims.embed_dim, cfg.aggregator,
      seed_stream(cfg.seed, kTagEnd2End));
  std::vector<num::Matrix*> refs = encoder::param_refs(c.enc);
  for (num::Matrix* p : agg::param_refs(model)) refs.push_back(p);
  agg::AdamState adam = agg::make_adam_state(cfg.aggregator.beta1, cfg.aggregator.beta2,
                                             cfg.aggregator.adam_eps, refs);

  auto snapshot_round = [&](std::size_t round, std::size_t epoch) {
    const num::Matrix h_all = embed_all(c.enc, c.ds.features, cfg.threads);
    const auto val_bags = bag_embeddings(h_all, c.val);
    const double auc = metrics::roc_auc(c.val.bag_labels, bag_scores(model, val_bags));
    c.state.auc_history.push_back(auc);
    c.artifacts.round_val_auc.push_back(auc);
    c.artifacts.round_encoders.push_back(c.enc);
    c.artifacts.round_aggregators.push_back(model);
    round_curves(c, model, h_all, round, epoch);
  };

  snapshot_round(0, 0);
  std::size_t round = 0;
  std::vector<std::size_t> order(c.train.bags.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 1; epoch <= cfg.finetune.epochs; ++epoch) {
    const double lr_now =
        cfg.aggregator.lr *
        std::pow(cfg.aggregator.lr_gamma,
                 static_cast<double>((epoch - 1) / std::max<std::size_t>(1, cfg.aggregator.lr_step)));
    Rng rng = make_rng(cfg.seed, kTagEnd2End, epoch);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b : order) {
      const data::Bag* bag = c.train.bags[b];
      std::vector<std::uint32_t> ids(bag->size());
      std::iota(ids.begin(), ids.end(), bag->start);
      num::Matrix x = gather_features(ds, ids);
      x = data::augment_rows(x, cfg.finetune.augment_strength, rng);

      num::GradTape tape;
      encoder::EncoderVars vars = encoder::stage_params(tape, c.enc);
      agg::StagedAggregator staged = agg::stage_model(tape, model);
      const num::Var h = encoder::features_on_tape(tape, vars, tape.input(x));
      agg::AggForward fwd = agg::forward_on_tape(tape, model, staged, h);
      const num::Var loss = agg::training_loss(tape, model, fwd, bag->label);

      std::vector<num::Var> wrt = vars.all;
      wrt.insert(wrt.end(), staged.params.begin(), staged.params.end());
      const std::vector<num::Matrix> grads = tape.gradients(loss, wrt);
      agg::adam_step(refs, grads, adam, lr_now);
    }
    if (epoch % cfg.refresh_period == 0) snapshot_round(++round, epoch);
  }

  c.artifacts.best_round = model_select(c.artifacts.round_val_auc);
  c.artifacts.final_encoder = c.artifacts.round_encoders[c.artifacts.best_round];
  c.artifacts.final_aggregator = c.artifacts.round_aggregators[c.artifacts.best_round];
  c.artifacts.pseudo = c.state;
  c.artifacts.reports = final_reports(c);
  return std::move(c.artifacts);
}

}  // namespace mil::pipeline
