#include "mil/aggregators.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "binio.hpp"
#include "mil/errors.hpp"
#include "mil/metrics.hpp"
#include "mil/rng.hpp"

namespace mil::agg {

namespace {

constexpr char kMagic[7] = "MILA1";

num::Matrix he_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
  num::Matrix w(rows, cols);
  const double stddev = std::sqrt(2.0 / static_cast<double>(cols));
  for (auto& x : w.data()) x = rand_normal(rng, 0.0, stddev);
  return w;
}

bool has_instance_classifier(const AggregatorModel& m) {
  switch (m.kind) {
    case Kind::max_pool:
    case Kind::topk:
    case Kind::ds_mil:
      return true;
    case Kind::attention:
      return m.cfg.attention_mode == AttentionMode::instance;
    case Kind::transformer:
      return false;
  }
  return false;
}

// Canonical row order: lexicographic on row values (equal rows keep index
// order). Running every instance reduction in this order makes bag scores
// bitwise permutation-invariant.
std::vector<std::uint32_t> canonical_order(const num::Matrix& h) {
  std::vector<std::uint32_t> perm(h.rows());
  std::iota(perm.begin(), perm.end(), 0);
  std::stable_sort(perm.begin(), perm.end(), [&](std::uint32_t a, std::uint32_t b) {
    const auto ra = h.row_span(a), rb = h.row_span(b);
    return std::lexicographical_compare(ra.begin(), ra.end(), rb.begin(), rb.end());
  });
  return perm;
}

std::size_t topk_count(double ratio, std::size_t k) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ConfigError("topk: ratio must be in (0, 1]");
  const auto m = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(k) - 1e-12));
  return std::clamp<std::size_t>(m, 1, k);
}

void require_bag(const num::Matrix& h, const AggregatorModel& m) {
  if (h.rows() == 0) throw ShapeError("aggregator: empty bag");
  if (h.cols() != m.input_dim) throw ShapeError("aggregator: embedding dim mismatch");
}

struct TapeCtx {
  num::GradTape& tape;
  const AggregatorModel& m;
  const StagedAggregator& s;

  num::Var phi(num::Var x) const {
    return tape.sigmoid(tape.add_rowvec(tape.matmul_nt(x, s.phi_w), s.phi_b));
  }
  num::Var bag_head(num::Var z) const {
    return tape.sigmoid(tape.add_rowvec(tape.matmul_nt(z, s.bag_w), s.bag_b));
  }
  // Gated attention logits -> 1 x K weights over canonical rows.
  num::Var attention_row(num::Var x) const {
    num::Var e = tape.matmul_nt(tape.tanh(tape.matmul_nt(x, s.attn_V)), s.attn_w);
    return tape.softmax_rows(tape.transpose(e));
  }
  num::Var msa_block(num::Var x, const std::array<num::Var, 12>& blk) const {
    const std::size_t d = m.input_dim;
    const std::size_t heads = m.cfg.heads;
    const std::size_t dh = d / heads;
    num::Var q = tape.add_rowvec(tape.matmul_nt(x, blk[0]), blk[1]);
    num::Var k = tape.add_rowvec(tape.matmul_nt(x, blk[2]), blk[3]);
    num::Var v = tape.add_rowvec(tape.matmul_nt(x, blk[4]), blk[5]);
    std::vector<num::Var> head_outs;
    for (std::size_t hidx = 0; hidx < heads; ++hidx) {
      num::Var qh = tape.slice_cols(q, hidx * dh, (hidx + 1) * dh);
      num::Var kh = tape.slice_cols(k, hidx * dh, (hidx + 1) * dh);
      num::Var vh = tape.slice_cols(v, hidx * dh, (hidx + 1) * dh);
      num::Var scores = tape.scale(tape.matmul_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(dh)));
      head_outs.push_back(tape.matmul(tape.softmax_rows(scores), vh));
    }
    num::Var o = tape.add_rowvec(tape.matmul_nt(tape.concat_cols(head_outs), blk[6]), blk[7]);
    num::Var x1 = tape.add(o, x);
    num::Var mid = tape.relu(tape.add_rowvec(tape.matmul_nt(x1, blk[8]), blk[9]));
    num::Var out = tape.add_rowvec(tape.matmul_nt(mid, blk[10]), blk[11]);
    return tape.add(out, x1);
  }
};

}  // namespace

const char* kind_name(Kind k) {
  switch (k) {
    case Kind::max_pool: return "max";
    case Kind::topk: return "topk";
    case Kind::attention: return "attention";
    case Kind::ds_mil: return "ds_mil";
    case Kind::transformer: return "transformer";
  }
  return "max";
}

Kind kind_from_name(const std::string& name) {
  if (name == "max" || name == "max_pool") return Kind::max_pool;
  if (name == "topk") return Kind::topk;
  if (name == "attention") return Kind::attention;
  if (name == "attention_instance") return Kind::attention;  // mode set separately
  if (name == "ds_mil" || name == "dsmil") return Kind::ds_mil;
  if (name == "transformer") return Kind::transformer;
  throw ConfigError("unknown aggregator kind: " + name);
}

AggregatorModel init_aggregator(Kind kind, std::size_t input_dim, const AggregatorConfig& cfg,
                                std::uint64_t seed) {
  if (input_dim == 0) throw ConfigError("aggregator: input_dim must be positive");
  AggregatorModel m;
  m.kind = kind;
  m.input_dim = input_dim;
  m.cfg = cfg;
  if (m.cfg.attn_dim == 0) m.cfg.attn_dim = input_dim;  // l = d by default
  Rng rng = make_rng(seed, 0x616767, static_cast<std::uint64_t>(kind));  // "agg"

  const std::size_t l = m.cfg.attn_dim;
  // Logistic heads start at zero (score 0.5 everywhere) so max/top-k routing
  // is not dominated by a random saturated instance at the first epochs.
  auto init_phi = [&] {
    m.phi_w = num::Matrix(1, input_dim);
    m.phi_b = num::Matrix(1, 1);
  };
  auto init_attention = [&] {
    m.attn_V = he_matrix(l, input_dim, rng);
    m.attn_w = he_matrix(1, l, rng);
  };
  auto init_bag_head = [&] {
    m.bag_w = num::Matrix(1, input_dim);
    m.bag_b = num::Matrix(1, 1);
  };

  switch (kind) {
    case Kind::max_pool:
    case Kind::topk:
      init_phi();
      break;
    case Kind::attention:
      init_attention();
      if (cfg.attention_mode == AttentionMode::instance) {
        init_phi();
      } else {
        init_bag_head();
      }
      break;
    case Kind::ds_mil:
      if (!(cfg.stream_weight > 0.0)) throw ConfigError("ds_mil: stream weight must be positive");
      init_phi();
      m.q_proj = he_matrix(l, input_dim, rng);
      m.v_proj = he_matrix(input_dim, input_dim, rng);
      init_bag_head();
      break;
    case Kind::transformer: {
      if (input_dim % cfg.heads != 0) {
        throw ConfigError("transformer: input_dim must be divisible by the head count");
      }
      const std::size_t hidden = cfg.mlp_expansion * input_dim;
      for (std::size_t i = 0; i < cfg.layers; ++i) {
        AggregatorModel::Block blk;
        blk.wq = he_matrix(input_dim, input_dim, rng);
        blk.bq = num::Matrix(1, input_dim);
        blk.wk = he_matrix(input_dim, input_dim, rng);
        blk.bk = num::Matrix(1, input_dim);
        blk.wv = he_matrix(input_dim, input_dim, rng);
        blk.bv = num::Matrix(1, input_dim);
        blk.wo = he_matrix(input_dim, input_dim, rng);
        blk.bo = num::Matrix(1, input_dim);
        blk.w1 = he_matrix(hidden, input_dim, rng);
        blk.b1 = num::Matrix(1, hidden);
        blk.w2 = he_matrix(input_dim, hidden, rng);
        blk.b2 = num::Matrix(1, input_dim);
        m.blocks.push_back(std::move(blk));
      }
      init_attention();
      init_bag_head();
      break;
    }
  }
  return m;
}

std::vector<num::Matrix*> param_refs(AggregatorModel& m) {
  std::vector<num::Matrix*> refs;
  auto phi = [&] { refs.insert(refs.end(), {&m.phi_w, &m.phi_b}); };
  auto attention = [&] { refs.insert(refs.end(), {&m.attn_V, &m.attn_w}); };
  auto bag_head = [&] { refs.insert(refs.end(), {&m.bag_w, &m.bag_b}); };
  switch (m.kind) {
    case Kind::max_pool:
    case Kind::topk:
      phi();
      break;
    case Kind::attention:
      attention();
      if (m.cfg.attention_mode == AttentionMode::instance) {
        phi();
      } else {
        bag_head();
      }
      break;
    case Kind::ds_mil:
      phi();
      refs.insert(refs.end(), {&m.q_proj, &m.v_proj});
      bag_head();
      break;
    case Kind::transformer:
      for (auto& blk : m.blocks) {
        refs.insert(refs.end(), {&blk.wq, &blk.bq, &blk.wk, &blk.bk, &blk.wv, &blk.bv, &blk.wo,
                                 &blk.bo, &blk.w1, &blk.b1, &blk.w2, &blk.b2});
      }
      attention();
      bag_head();
      break;
  }
  return refs;
}

std::vector<const num::Matrix*> param_refs(const AggregatorModel& m) {
  std::vector<const num::Matrix*> out;
  for (num::Matrix* p : param_refs(const_cast<AggregatorModel&>(m))) out.push_back(p);
  return out;
}

StagedAggregator stage_model(num::GradTape& tape, const AggregatorModel& m) {
  StagedAggregator s;
  auto stage = [&](const num::Matrix& x) {
    num::Var v = tape.input(x);
    s.params.push_back(v);
    return v;
  };
  switch (m.kind) {
    case Kind::max_pool:
    case Kind::topk:
      s.phi_w = stage(m.phi_w);
      s.phi_b = stage(m.phi_b);
      break;
    case Kind::attention:
      s.attn_V = stage(m.attn_V);
      s.attn_w = stage(m.attn_w);
      if (m.cfg.attention_mode == AttentionMode::instance) {
        s.phi_w = stage(m.phi_w);
        s.phi_b = stage(m.phi_b);
      } else {
        s.bag_w = stage(m.bag_w);
        s.bag_b = stage(m.bag_b);
      }
      break;
    case Kind::ds_mil:
      s.phi_w = stage(m.phi_w);
      s.phi_b = stage(m.phi_b);
      s.q_proj = stage(m.q_proj);
      s.v_proj = stage(m.v_proj);
      s.bag_w = stage(m.bag_w);
      s.bag_b = stage(m.bag_b);
      break;
    case Kind::transformer:
      for (const auto& blk : m.blocks) {
        std::array<num::Var, 12> vars{};
        const num::Matrix* fields[12] = {&blk.wq, &blk.bq, &blk.wk, &blk.bk, &blk.wv, &blk.bv,
                                         &blk.wo, &blk.bo, &blk.w1, &blk.b1, &blk.w2, &blk.b2};
        for (int i = 0; i < 12; ++i) vars[i] = stage(*fields[i]);
        s.blocks.push_back(vars);
      }
      s.attn_V = stage(m.attn_V);
      s.attn_w = stage(m.attn_w);
      s.bag_w = stage(m.bag_w);
      s.bag_b = stage(m.bag_b);
      break;
  }
  return s;
}

AggForward forward_on_tape(num::GradTape& tape, const AggregatorModel& m,
                           const StagedAggregator& staged, num::Var H) {
  require_bag(tape.value(H), m);
  const std::size_t k = tape.value(H).rows();
  TapeCtx ctx{tape, m, staged};
  AggForward fwd;
  fwd.perm = canonical_order(tape.value(H));

  switch (m.kind) {
    case Kind::max_pool: {
      num::Var scores = ctx.phi(H);  // row-local, order does not matter for max
      fwd.instance_probs = scores;
      fwd.bag_prob = tape.max_all(scores);
      break;
    }
    case Kind::topk: {
      num::Var scores = ctx.phi(H);
      fwd.instance_probs = scores;
      num::Var sorted_scores = tape.gather_rows(scores, fwd.perm);
      const num::Matrix& sv = tape.value(sorted_scores);
      std::vector<std::uint32_t> idx(k);
      std::iota(idx.begin(), idx.end(), 0);
      std::stable_sort(idx.begin(), idx.end(),
                       [&](std::uint32_t a, std::uint32_t b) { return sv[a] > sv[b]; });
      idx.resize(topk_count(m.cfg.topk_ratio, k));
      std::sort(idx.begin(), idx.end());  // accumulate the mean in canonical order
      fwd.bag_prob = tape.mean(tape.gather_rows(sorted_scores, std::move(idx)));
      break;
    }
    case Kind::attention: {
      num::Var hs = tape.gather_rows(H, fwd.perm);
      num::Var a_row = ctx.attention_row(hs);
      fwd.attention = a_row;
      if (m.cfg.attention_mode == AttentionMode::instance) {
        num::Var scores = ctx.phi(H);
        fwd.instance_probs = scores;
        fwd.bag_prob = tape.matmul(a_row, tape.gather_rows(scores, fwd.perm));
      } else {
        fwd.bag_prob = ctx.bag_head(tape.matmul(a_row, hs));
      }
      break;
    }
    case Kind::ds_mil: {
      num::Var hs = tape.gather_rows(H, fwd.perm);
      num::Var scores = ctx.phi(H);
      fwd.instance_probs = scores;
      num::Var sorted_scores = tape.gather_rows(scores, fwd.perm);
      // Critical instance: first argmax in canonical order.
      const num::Matrix& sv = tape.value(sorted_scores);
      std::uint32_t crit = 0;
      for (std::uint32_t i = 1; i < k; ++i)
        if (sv[i] > sv[crit]) crit = i;
      num::Var queries = tape.matmul_nt(hs, staged.q_proj);  // K x l
      num::Var q_crit = tape.gather_rows(queries, {crit});
      num::Var sims =
          tape.scale(tape.matmul_nt(queries, q_crit),
                     1.0 / std::sqrt(static_cast<double>(m.cfg.attn_dim)));  // K x 1
      num::Var a_row = tape.softmax_rows(tape.transpose(sims));
      fwd.attention = a_row;
      num::Var values = tape.matmul_nt(hs, staged.v_proj);  // K x d
      num::Var attended = tape.matmul(a_row, values);
      fwd.stream_inst = tape.max_all(sorted_scores);
      fwd.stream_emb = ctx.bag_head(attended);
      const double w = m.cfg.stream_weight;
      fwd.bag_prob = tape.scale(
          tape.add(*fwd.stream_inst, tape.scale(*fwd.stream_emb, w)), 1.0 / (1.0 + w));
      break;
    }
    case Kind::transformer: {
      num::Var x = tape.gather_rows(H, fwd.perm);
      for (const auto& blk : staged.blocks) x = ctx.msa_block(x, blk);
      num::Var a_row = ctx.attention_row(x);
      fwd.attention = a_row;
      fwd.bag_prob = ctx.bag_head(tape.matmul(a_row, x));
      break;
    }
  }
  return fwd;
}

num::Var training_loss(num::GradTape& tape, const AggregatorModel& m, const AggForward& fwd,
                       int bag_label) {
  const num::Matrix target = num::Matrix::scalar(bag_label ? 1.0 : 0.0);
  if (m.kind == Kind::ds_mil) {
    // Dual-stream cross-entropy, embedding stream weighted by stream_weight.
    num::Var li = tape.bce_mean(*fwd.stream_inst, target);
    num::Var le = tape.bce_mean(*fwd.stream_emb, target);
    const double w = m.cfg.stream_weight;
    return tape.scale(tape.add(li, tape.scale(le, w)), 1.0 / (1.0 + w));
  }
  return tape.bce_mean(fwd.bag_prob, target);
}

namespace {

BagPrediction run_forward(const AggregatorModel& m, const num::Matrix& h) {
  num::GradTape tape;
  StagedAggregator staged = stage_model(tape, m);
  AggForward fwd = forward_on_tape(tape, m, staged, tape.input(h));
  BagPrediction pred;
  pred.bag_score = tape.value(fwd.bag_prob)[0];
  if (fwd.instance_probs) {
    pred.instance_scores = tape.value(*fwd.instance_probs).data();
  }
  if (fwd.attention) {
    const num::Matrix& a = tape.value(*fwd.attention);
    pred.attention_weights.resize(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) pred.attention_weights[fwd.perm[i]] = a[i];
  }
  return pred;
}

}  // namespace

BagPrediction max_pool(const num::Matrix& H, const AggregatorModel& m) {
  AggregatorModel view = m;
  view.kind = Kind::max_pool;
  return run_forward(view, H);
}

BagPrediction topk_pool(const num::Matrix& H, const AggregatorModel& m, double ratio) {
  AggregatorModel view = m;
  view.kind = Kind::topk;
  view.cfg.topk_ratio = ratio;
  return run_forward(view, H);
}

BagPrediction attention_mil(const num::Matrix& H, const AggregatorModel& m, AttentionMode mode) {
  AggregatorModel view = m;
  view.kind = Kind::attention;
  view.cfg.attention_mode = mode;
  return run_forward(view, H);
}

BagPrediction ds_mil(const num::Matrix& H, const AggregatorModel& m) {
  AggregatorModel view = m;
  view.kind = Kind::ds_mil;
  return run_forward(view, H);
}

BagPrediction transformer_agg(const num::Matrix& H, const AggregatorModel& m) {
  AggregatorModel view = m;
  view.kind = Kind::transformer;
  return run_forward(view, H);
}

BagPrediction predict(const AggregatorModel& m, const num::Matrix& H) { return run_forward(m, H); }

std::vector<double> instance_scores(const AggregatorModel& m, const num::Matrix& H) {
  if (!has_instance_classifier(m)) {
    throw CapabilityError(std::string("aggregator kind '") + kind_name(m.kind) +
                          "' has no instance classifier; attach an auxiliary linear probe "
                          "(train_linear_probe) to score instances");
  }
  if (H.cols() != m.input_dim) throw ShapeError("instance_scores: embedding dim mismatch");
  return num::sigmoid_ew(num::add_rowvec(num::matmul_nt(H, m.phi_w), m.phi_b)).data();
}

AdamState make_adam_state(double beta1, double beta2, double eps,
                          std::span<num::Matrix* const> params) {
  AdamState s;
  s.beta1 = beta1;
  s.beta2 = beta2;
  s.eps = eps;
  for (const num::Matrix* p : params) {
    s.m1.emplace_back(p->rows(), p->cols());
    s.m2.emplace_back(p->rows(), p->cols());
  }
  return s;
}

void adam_step(std::span<num::Matrix* const> params, std::span<const num::Matrix> grads,
               AdamState& state, double lr_now) {
  if (params.size() != grads.size() || params.size() != state.m1.size()) {
    throw ShapeError("adam_step: parameter/gradient count mismatch");
  }
  state.t += 1;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    num::Matrix& p = *params[i];
    if (!p.same_shape(grads[i])) throw ShapeError("adam_step: gradient shape mismatch");
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double g = grads[i][j];
      state.m1[i][j] = state.beta1 * state.m1[i][j] + (1.0 - state.beta1) * g;
      state.m2[i][j] = state.beta2 * state.m2[i][j] + (1.0 - state.beta2) * g * g;
      const double mhat = state.m1[i][j] / c1;
      const double vhat = state.m2[i][j] / c2;
      p[j] -= lr_now * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

TrainedAggregator train_aggregator(std::span<const num::Matrix> train_bags,
                                   std::span<const std::uint8_t> train_labels,
                                   std::span<const num::Matrix> val_bags,
                                   std::span<const std::uint8_t> val_labels, Kind kind,
                                   const AggregatorConfig& cfg, std::uint64_t seed) {
  if (train_bags.size() != train_labels.size() || val_bags.size() != val_labels.size()) {
    throw ShapeError("train_aggregator: bag/label count mismatch");
  }
  if (train_bags.empty()) throw DataError("train_aggregator: no training bags");
  const bool any_pos = std::any_of(train_labels.begin(), train_labels.end(),
                                   [](std::uint8_t y) { return y != 0; });
  const bool any_neg = std::any_of(train_labels.begin(), train_labels.end(),
                                   [](std::uint8_t y) { return y == 0; });
  if (!any_pos || !any_neg) {
    throw DataError("train_aggregator: training split needs both classes");
  }

  AggregatorModel model = init_aggregator(kind, train_bags[0].cols(), cfg, seed);
  const std::vector<num::Matrix*> params = param_refs(model);
  AdamState adam = make_adam_state(cfg.beta1, cfg.beta2, cfg.adam_eps, params);
  Rng rng = make_rng(seed, 0x616774);  // "agt"

  auto val_auc = [&]() {
    std::vector<double> scores;
    scores.reserve(val_bags.size());
    for (const auto& h : val_bags) scores.push_back(run_forward(model, h).bag_score);
    return metrics::roc_auc(val_labels, scores);
  };

  TrainedAggregator best{model, -1.0, 0};
  std::size_t since_best = 0;
  std::vector<std::size_t> order(train_bags.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr_now =
        cfg.lr * std::pow(cfg.lr_gamma, static_cast<double>(epoch / std::max<std::size_t>(1, cfg.lr_step)));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b : order) {
      num::GradTape tape;
      StagedAggregator staged = stage_model(tape, model);
      AggForward fwd = forward_on_tape(tape, model, staged, tape.input(train_bags[b]));
      num::Var loss = training_loss(tape, model, fwd, train_labels[b]);
      std::vector<num::Matrix> grads = tape.gradients(loss, staged.params);
      if (cfg.weight_decay > 0.0) {
        for (std::size_t i = 0; i < grads.size(); ++i) {
          for (std::size_t j = 0; j < grads[i].size(); ++j) {
            grads[i][j] += cfg.weight_decay * (*params[i])[j];
          }
        }
      }
      adam_step(params, grads, adam, lr_now);
    }
    const double auc = val_bags.empty() ? 0.0 : val_auc();
    if (auc > best.best_val_auc) {
      best = TrainedAggregator{model, auc, epoch};
      since_best = 0;
    } else if (cfg.patience > 0 && ++since_best >= cfg.patience) {
      break;
    }
  }
  return best;
}

LinearProbe train_linear_probe(const num::Matrix& x, std::span<const std::uint8_t> y,
                               std::size_t epochs, double lr) {
  if (x.rows() != y.size()) throw ShapeError("train_linear_probe: label count mismatch");
  LinearProbe probe{num::Matrix(1, x.cols()), num::Matrix(1, 1)};
  num::Matrix targets(x.rows(), 1);
  for (std::size_t i = 0; i < y.size(); ++i) targets[i] = y[i] ? 1.0 : 0.0;

  num::Matrix* params[2] = {&probe.w, &probe.b};
  AdamState adam = make_adam_state(0.9, 0.999, 1e-8, params);
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    num::GradTape tape;
    num::Var w = tape.input(probe.w);
    num::Var b = tape.input(probe.b);
    num::Var xs = tape.input(x);
    num::Var probs = tape.sigmoid(tape.add_rowvec(tape.matmul_nt(xs, w), b));
    num::Var loss = tape.bce_mean(probs, targets);
    const num::Var wrt[2] = {w, b};
    const std::vector<num::Matrix> grads = tape.gradients(loss, wrt);
    adam_step(params, grads, adam, lr);
  }
  return probe;
}

std::vector<double> probe_scores(const LinearProbe& probe, const num::Matrix& x) {
  return num::sigmoid_ew(num::add_rowvec(num::matmul_nt(x, probe.w), probe.b)).data();
}

void save_checkpoint(const AggregatorModel& m, const std::filesystem::path& path) {
  io::Writer w;
  w.put_bytes(kMagic, 6);
  w.put_u8(static_cast<std::uint8_t>(m.kind));
  w.put_u32(static_cast<std::uint32_t>(m.input_dim));
  w.put_f64(m.cfg.topk_ratio);
  w.put_f64(m.cfg.stream_weight);
  w.put_u8(static_cast<std::uint8_t>(m.cfg.attention_mode));
  w.put_u32(static_cast<std::uint32_t>(m.cfg.attn_dim));
  w.put_u32(static_cast<std::uint32_t>(m.cfg.heads));
  w.put_u32(static_cast<std::uint32_t>(m.cfg.layers));
  w.put_u32(static_cast<std::uint32_t>(m.cfg.mlp_expansion));
  for (const num::Matrix* p : param_refs(m)) {
    w.put_u32(static_cast<std::uint32_t>(p->rows()));
    w.put_u32(static_cast<std::uint32_t>(p->cols()));
    for (double x : p->data()) w.put_f64(x);
  }
  w.save(path);
}

AggregatorModel load_checkpoint(const std::filesystem::path& path) {
  io::Reader r(path);
  r.expect_magic(kMagic);
  const std::uint8_t kind_tag = r.get_u8();
  if (kind_tag > static_cast<std::uint8_t>(Kind::transformer)) {
    throw FormatError("unknown aggregator kind tag", 6);
  }
  AggregatorConfig cfg;
  const auto kind = static_cast<Kind>(kind_tag);
  const std::size_t input_dim = r.get_u32();
  cfg.topk_ratio = r.get_f64();
  cfg.stream_weight = r.get_f64();
  cfg.attention_mode = static_cast<AttentionMode>(r.get_u8());
  cfg.attn_dim = r.get_u32();
  cfg.heads = r.get_u32();
  cfg.layers = r.get_u32();
  cfg.mlp_expansion = r.get_u32();

  AggregatorModel m = init_aggregator(kind, input_dim, cfg, 0);
  for (num::Matrix* p : param_refs(m)) {
    const std::size_t rows = r.get_u32();
    const std::size_t cols = r.get_u32();
    if (rows != p->rows() || cols != p->cols()) {
      throw FormatError("parameter block shape mismatch", static_cast<long long>(r.offset()));
    }
    for (auto& x : p->data()) x = r.get_f64();
    if (!p->all_finite()) throw FormatError("non-finite parameter",
                                            static_cast<long long>(r.offset()));
  }
  r.expect_eof();
  return m;
}

}  // namespace mil::agg
