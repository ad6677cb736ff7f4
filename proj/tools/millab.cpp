// millab: synthetic MIL laboratory command line.
// Subcommands: synth, train, eval, plot, sweep-wr.
// Exit codes: 0 success, 2 config/usage, 3 missing artifact, 4 runtime training error.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mil/aggregators.hpp"
#include "mil/data.hpp"
#include "mil/encoder.hpp"
#include "mil/errors.hpp"
#include "mil/metrics.hpp"
#include "mil/pipeline.hpp"
#include "mil/rng.hpp"

#ifndef MILLAB_GIT_DESCRIBE
#define MILLAB_GIT_DESCRIBE "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// config parsing
// ---------------------------------------------------------------------------

json load_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw mil::MissingArtifactError("cannot open config: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw mil::ConfigError(std::string("config parse error: ") + e.what());
  }
  return j;
}

mil::data::SynthConfig parse_synth(const json& root) {
  const json j = root.value("synth", json::object());
  mil::data::SynthConfig cfg;
  cfg.feature_dim = j.value("feature_dim", cfg.feature_dim);
  auto counts = [&](const char* key, mil::data::SplitBagCounts def) {
    if (!j.contains(key)) return def;
    const json& c = j.at(key);
    return mil::data::SplitBagCounts{c.value("negatives", def.negatives),
                                     c.value("positives", def.positives)};
  };
  cfg.train_bags = counts("train_bags", cfg.train_bags);
  cfg.val_bags = counts("val_bags", cfg.val_bags);
  cfg.test_bags = counts("test_bags", cfg.test_bags);
  cfg.bag_size.size = j.value("bag_size", cfg.bag_size.size);
  cfg.bag_size.jitter = j.value("bag_size_jitter", cfg.bag_size.jitter);
  cfg.witness_rate = j.value("witness_rate", cfg.witness_rate);
  cfg.negative_components = j.value("negative_components", cfg.negative_components);
  cfg.class_separation = j.value("class_separation", cfg.class_separation);
  cfg.noise_scale = j.value("noise_scale", cfg.noise_scale);
  cfg.seed = j.value("seed", cfg.seed);
  return cfg;
}

json synth_to_json(const mil::data::SynthConfig& c) {
  return json{{"feature_dim", c.feature_dim},
              {"train_bags",
               {{"negatives", c.train_bags.negatives}, {"positives", c.train_bags.positives}}},
              {"val_bags", {{"negatives", c.val_bags.negatives}, {"positives", c.val_bags.positives}}},
              {"test_bags",
               {{"negatives", c.test_bags.negatives}, {"positives", c.test_bags.positives}}},
              {"bag_size", c.bag_size.size},
              {"bag_size_jitter", c.bag_size.jitter},
              {"witness_rate", c.witness_rate},
              {"negative_components", c.negative_components},
              {"class_separation", c.class_separation},
              {"noise_scale", c.noise_scale},
              {"seed", c.seed}};
}

mil::agg::AttentionMode attention_mode_from(const std::string& s) {
  if (s == "embedding") return mil::agg::AttentionMode::embedding;
  if (s == "instance") return mil::agg::AttentionMode::instance;
  throw mil::ConfigError("unknown attention mode: " + s);
}

mil::pipeline::TrainConfig parse_train(const json& root) {
  const json j = root.value("train", json::object());
  mil::pipeline::TrainConfig cfg;
  cfg.eta = j.value("eta", cfg.eta);
  cfg.r0 = j.value("r0", cfg.r0);
  cfg.rT = j.value("rT", cfg.rT);
  cfg.p_plus = j.value("p_plus", cfg.p_plus);
  cfg.refresh_period = j.value("refresh_period", cfg.refresh_period);
  cfg.iterative = j.value("iterative", cfg.iterative);
  cfg.self_paced = j.value("self_paced", cfg.self_paced);
  cfg.seed = j.value("seed", cfg.seed);

  const json je = j.value("encoder", json::object());
  cfg.encoder.embed_dim = je.value("embed_dim", cfg.encoder.embed_dim);
  cfg.encoder.proj_dim = je.value("proj_dim", cfg.encoder.proj_dim);
  cfg.encoder.hidden_widths = je.value("hidden_widths", cfg.encoder.hidden_widths);
  cfg.encoder.projection_hidden = je.value("projection_hidden", cfg.encoder.projection_hidden);

  const json jp = j.value("pretrain", json::object());
  cfg.pretrain.epochs = jp.value("epochs", cfg.pretrain.epochs);
  cfg.pretrain.batch = jp.value("batch", cfg.pretrain.batch);
  cfg.pretrain.lr = jp.value("lr", cfg.pretrain.lr);
  cfg.pretrain.weight_decay = jp.value("weight_decay", cfg.pretrain.weight_decay);
  cfg.pretrain.momentum = jp.value("momentum", cfg.pretrain.momentum);
  cfg.pretrain.temperature = jp.value("temperature", cfg.pretrain.temperature);
  cfg.pretrain.augment_strength = jp.value("augment_strength", cfg.pretrain.augment_strength);

  const json jf = j.value("finetune", json::object());
  cfg.finetune.epochs = jf.value("epochs", cfg.finetune.epochs);
  // The warm-up length defaults to 10% of the total (at least one epoch).
  cfg.finetune.warmup_epochs =
      jf.value("warmup_epochs", std::max<std::size_t>(1, cfg.finetune.epochs / 10));
  cfg.finetune.steps_per_epoch = jf.value("steps_per_epoch", cfg.finetune.steps_per_epoch);
  cfg.finetune.batch.n_anchors = jf.value("anchors", cfg.finetune.batch.n_anchors);
  cfg.finetune.batch.same_per_anchor =
      jf.value("same_per_anchor", cfg.finetune.batch.same_per_anchor);
  cfg.finetune.batch.diff_per_anchor =
      jf.value("diff_per_anchor", cfg.finetune.batch.diff_per_anchor);
  cfg.finetune.ce_batch = jf.value("ce_batch", cfg.finetune.ce_batch);
  cfg.finetune.lr = jf.value("lr", cfg.finetune.lr);
  cfg.finetune.weight_decay = jf.value("weight_decay", cfg.finetune.weight_decay);
  cfg.finetune.momentum = jf.value("momentum", cfg.finetune.momentum);
  cfg.finetune.temperature = jf.value("temperature", cfg.finetune.temperature);
  cfg.finetune.augment_strength = jf.value("augment_strength", cfg.finetune.augment_strength);

  const json ja = j.value("aggregator", json::object());
  cfg.aggregator_kind = mil::agg::kind_from_name(ja.value("kind", std::string("ds_mil")));
  cfg.aggregator.topk_ratio = ja.value("topk_ratio", cfg.aggregator.topk_ratio);
  cfg.aggregator.stream_weight = ja.value("stream_weight", cfg.aggregator.stream_weight);
  cfg.aggregator.attention_mode =
      attention_mode_from(ja.value("attention_mode", std::string("embedding")));
  if (ja.value("kind", std::string()) == "attention_instance") {
    cfg.aggregator.attention_mode = mil::agg::AttentionMode::instance;
  }
  cfg.aggregator.attn_dim = ja.value("attn_dim", cfg.aggregator.attn_dim);
  cfg.aggregator.heads = ja.value("heads", cfg.aggregator.heads);
  cfg.aggregator.layers = ja.value("layers", cfg.aggregator.layers);
  cfg.aggregator.mlp_expansion = ja.value("mlp_expansion", cfg.aggregator.mlp_expansion);
  cfg.aggregator.epochs = ja.value("epochs", cfg.aggregator.epochs);
  cfg.aggregator.lr = ja.value("lr", cfg.aggregator.lr);
  cfg.aggregator.lr_step = ja.value("lr_step", cfg.aggregator.lr_step);
  cfg.aggregator.lr_gamma = ja.value("lr_gamma", cfg.aggregator.lr_gamma);
  cfg.aggregator.patience = ja.value("patience", cfg.aggregator.patience);
  cfg.aggregator.weight_decay = ja.value("weight_decay", cfg.aggregator.weight_decay);
  return cfg;
}

json train_to_json(const mil::pipeline::TrainConfig& c, mil::agg::Kind kind) {
  json ja{{"kind", mil::agg::kind_name(kind)},
          {"topk_ratio", c.aggregator.topk_ratio},
          {"stream_weight", c.aggregator.stream_weight},
          {"attention_mode",
           c.aggregator.attention_mode == mil::agg::AttentionMode::embedding ? "embedding"
                                                                             : "instance"},
          {"attn_dim", c.aggregator.attn_dim},
          {"heads", c.aggregator.heads},
          {"layers", c.aggregator.layers},
          {"mlp_expansion", c.aggregator.mlp_expansion},
          {"epochs", c.aggregator.epochs},
          {"lr", c.aggregator.lr},
          {"lr_step", c.aggregator.lr_step},
          {"lr_gamma", c.aggregator.lr_gamma},
          {"patience", c.aggregator.patience},
          {"weight_decay", c.aggregator.weight_decay}};
  return json{
      {"eta", c.eta},
      {"r0", c.r0},
      {"rT", c.rT},
      {"p_plus", c.p_plus},
      {"refresh_period", c.refresh_period},
      {"iterative", c.iterative},
      {"self_paced", c.self_paced},
      {"seed", c.seed},
      {"threads", c.threads},
      {"encoder",
       {{"embed_dim", c.encoder.embed_dim},
        {"proj_dim", c.encoder.proj_dim},
        {"hidden_widths", c.encoder.hidden_widths},
        {"projection_hidden", c.encoder.projection_hidden}}},
      {"pretrain",
       {{"epochs", c.pretrain.epochs},
        {"batch", c.pretrain.batch},
        {"lr", c.pretrain.lr},
        {"weight_decay", c.pretrain.weight_decay},
        {"momentum", c.pretrain.momentum},
        {"temperature", c.pretrain.temperature},
        {"augment_strength", c.pretrain.augment_strength}}},
      {"finetune",
       {{"epochs", c.finetune.epochs},
        {"warmup_epochs", c.finetune.warmup_epochs},
        {"steps_per_epoch", c.finetune.steps_per_epoch},
        {"anchors", c.finetune.batch.n_anchors},
        {"same_per_anchor", c.finetune.batch.same_per_anchor},
        {"diff_per_anchor", c.finetune.batch.diff_per_anchor},
        {"ce_batch", c.finetune.ce_batch},
        {"lr", c.finetune.lr},
        {"weight_decay", c.finetune.weight_decay},
        {"momentum", c.finetune.momentum},
        {"temperature", c.finetune.temperature},
        {"augment_strength", c.finetune.augment_strength}}},
      {"aggregator", std::move(ja)}};
}

// ---------------------------------------------------------------------------
// run manifest
// ---------------------------------------------------------------------------

class ManifestWriter {
 public:
  ManifestWriter(std::string command, const json& config, std::uint64_t seed)
      : start_(std::chrono::steady_clock::now()) {
    manifest_["command"] = std::move(command);
    manifest_["config"] = config;
    manifest_["seed"] = seed;
    manifest_["git_describe"] = MILLAB_GIT_DESCRIBE;
  }
  void add_input(const std::string& key, const fs::path& p) {
    manifest_["inputs"][key] = p.string();
  }
  void add_output(const std::string& key, const fs::path& p) {
    manifest_["outputs"][key] = p.string();
  }
  void write(const fs::path& dir) {
    const auto elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    manifest_["wall_clock_seconds"] = elapsed;
    std::ofstream out(dir / "manifest.json");
    out << manifest_.dump(2) << "\n";
  }

 private:
  json manifest_;
  std::chrono::steady_clock::time_point start_;
};

void write_config_snapshot(const json& cfg, const fs::path& dir) {
  std::ofstream out(dir / "config.json");
  out << cfg.dump(2) << "\n";
}

double realized_witness_rate(const mil::data::Dataset& ds, mil::data::Split split) {
  std::size_t pos = 0, total = 0;
  for (const mil::data::Bag* b : ds.bags_in(split)) {
    if (b->label != 1) continue;
    total += b->size();
    for (auto y : b->instance_labels) pos += y ? 1 : 0;
  }
  return total == 0 ? 0.0 : static_cast<double>(pos) / static_cast<double>(total);
}

mil::encoder::EncoderParams load_encoder_or_die(const fs::path& path) {
  if (!fs::exists(path)) {
    throw mil::MissingArtifactError("encoder checkpoint not found: " + path.string());
  }
  return mil::encoder::load_checkpoint(path);
}

fs::path find_run_encoder(const fs::path& run_dir) {
  for (const char* name : {"checkpoints/encoder_best.mile", "checkpoints/encoder_pretrain.mile"}) {
    if (fs::exists(run_dir / name)) return run_dir / name;
  }
  throw mil::MissingArtifactError("no encoder checkpoint under " + run_dir.string());
}

// ---------------------------------------------------------------------------
// plot
// ---------------------------------------------------------------------------

struct Series {
  std::string label;
  std::vector<std::pair<double, double>> points;  // epoch, value
};

std::string fmt_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

void write_svg(const std::vector<Series>& series, double x_max, const fs::path& path) {
  const double w = 960, h = 540, ml = 60, mr = 220, mt = 30, mb = 50;
  const double pw = w - ml - mr, ph = h - mt - mb;
  const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                          "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  std::string svg;
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt_num(w) + "\" height=\"" +
         fmt_num(h) + "\" viewBox=\"0 0 " + fmt_num(w) + " " + fmt_num(h) + "\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (int i = 0; i <= 10; ++i) {
    const double y = mt + ph - ph * i / 10.0;
    svg += "<line x1=\"" + fmt_num(ml) + "\" y1=\"" + fmt_num(y) + "\" x2=\"" + fmt_num(ml + pw) +
           "\" y2=\"" + fmt_num(y) + "\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n";
    svg += "<text x=\"" + fmt_num(ml - 8) + "\" y=\"" + fmt_num(y + 4) +
           "\" font-size=\"12\" text-anchor=\"end\" font-family=\"sans-serif\">" +
           fmt_num(i / 10.0) + "</text>\n";
  }
  const int x_ticks = 10;
  for (int i = 0; i <= x_ticks; ++i) {
    const double xv = x_max * i / x_ticks;
    const double x = ml + (x_max > 0 ? pw * xv / x_max : 0.0);
    svg += "<text x=\"" + fmt_num(x) + "\" y=\"" + fmt_num(mt + ph + 18) +
           "\" font-size=\"12\" text-anchor=\"middle\" font-family=\"sans-serif\">" +
           fmt_num(xv) + "</text>\n";
  }
  svg += "<line x1=\"" + fmt_num(ml) + "\" y1=\"" + fmt_num(mt) + "\" x2=\"" + fmt_num(ml) +
         "\" y2=\"" + fmt_num(mt + ph) + "\" stroke=\"black\"/>\n";
  svg += "<line x1=\"" + fmt_num(ml) + "\" y1=\"" + fmt_num(mt + ph) + "\" x2=\"" +
         fmt_num(ml + pw) + "\" y2=\"" + fmt_num(mt + ph) + "\" stroke=\"black\"/>\n";
  svg += "<text x=\"" + fmt_num(ml + pw / 2) + "\" y=\"" + fmt_num(h - 12) +
         "\" font-size=\"13\" text-anchor=\"middle\" font-family=\"sans-serif\">epoch</text>\n";

  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = colors[s % 10];
    std::string pts;
    for (const auto& [e, v] : series[s].points) {
      const double x = ml + (x_max > 0 ? pw * e / x_max : 0.0);
      const double y = mt + ph - ph * std::clamp(v, 0.0, 1.0);
      pts += fmt_num(x) + "," + fmt_num(y) + " ";
    }
    svg += "<polyline fill=\"none\" stroke=\"" + std::string(color) +
           "\" stroke-width=\"1.5\" points=\"" + pts + "\"/>\n";
    const double ly = mt + 16.0 * static_cast<double>(s);
    svg += "<line x1=\"" + fmt_num(ml + pw + 10) + "\" y1=\"" + fmt_num(ly) + "\" x2=\"" +
           fmt_num(ml + pw + 30) + "\" y2=\"" + fmt_num(ly) + "\" stroke=\"" + color +
           "\" stroke-width=\"2\"/>\n";
    svg += "<text x=\"" + fmt_num(ml + pw + 36) + "\" y=\"" + fmt_num(ly + 4) +
           "\" font-size=\"11\" font-family=\"sans-serif\">" + series[s].label + "</text>\n";
  }
  svg += "</svg>\n";
  std::ofstream out(path, std::ios::binary);
  out << svg;
}

struct CurveRowIn {
  std::size_t round = 0, epoch = 0;
  std::string split;
  std::map<std::string, double> cells;
};

std::vector<CurveRowIn> read_curves(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw mil::MissingArtifactError("missing curves.csv: " + path.string());
  auto split_line = [](const std::string& line) {
    std::vector<std::string> cells;
    std::size_t at = 0;
    while (true) {
      const std::size_t comma = line.find(',', at);
      cells.push_back(line.substr(at, comma == std::string::npos ? comma : comma - at));
      if (comma == std::string::npos) break;
      at = comma + 1;
    }
    return cells;
  };
  std::string line;
  if (!std::getline(in, line)) throw mil::FormatError("empty curves.csv");
  const std::vector<std::string> header = split_line(line);
  std::vector<CurveRowIn> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::vector<std::string> cells = split_line(line);
    if (cells.size() != header.size()) throw mil::FormatError("ragged curves.csv row");
    CurveRowIn row;
    row.round = std::stoul(cells[0]);
    row.epoch = std::stoul(cells[1]);
    row.split = cells[2];
    for (std::size_t i = 3; i < cells.size(); ++i) {
      row.cells[header[i]] = std::strtod(cells[i].c_str(), nullptr);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

int cmd_synth(const fs::path& config_path, const fs::path& out, std::optional<std::uint64_t> seed) {
  const json root = load_json(config_path);
  mil::data::SynthConfig cfg = parse_synth(root);
  if (seed) cfg.seed = *seed;
  cfg.validate();

  ManifestWriter manifest("synth", synth_to_json(cfg), cfg.seed);
  manifest.add_input("config", config_path);
  const mil::data::Dataset ds = mil::data::gen_synthetic(cfg);
  mil::data::save_dataset(ds, out);
  write_config_snapshot(synth_to_json(cfg), out);
  manifest.add_output("features", out / "features.milf");
  manifest.add_output("manifest", out / "dataset.json");
  manifest.write(out);

  for (auto split : {mil::data::Split::train, mil::data::Split::val, mil::data::Split::test}) {
    std::printf("%s witness rate: %.4f\n", mil::data::split_name(split),
                realized_witness_rate(ds, split));
  }
  std::printf("wrote %zu bags, %zu instances to %s\n", ds.bags.size(), ds.instance_count(),
              out.string().c_str());
  return 0;
}

int cmd_train(const std::string& mode, const fs::path& dataset_dir, const fs::path& config_path,
              const fs::path& out, std::optional<std::uint64_t> seed, std::optional<bool> iterative,
              std::optional<std::size_t> threads, const fs::path& encoder_path) {
  const json root = load_json(config_path);
  mil::pipeline::TrainConfig cfg = parse_train(root);
  if (seed) cfg.seed = *seed;
  if (threads) {
    cfg.threads = *threads;
  } else if (const char* env = std::getenv("MILLAB_THREADS")) {
    cfg.threads = static_cast<std::size_t>(std::max(1L, std::atol(env)));
  }
  if (iterative) cfg.iterative = *iterative;
  cfg.validate();

  const mil::data::Dataset ds = mil::data::load_dataset(dataset_dir);

  ManifestWriter manifest("train --mode " + mode, train_to_json(cfg, cfg.aggregator_kind),
                          cfg.seed);
  manifest.add_input("dataset", dataset_dir);
  manifest.add_input("config", config_path);

  if (mode == "pretrain") {
    const mil::pipeline::PretrainResult result = mil::pipeline::run_cssl_pretrain(ds, cfg);
    fs::create_directories(out / "checkpoints");
    write_config_snapshot(train_to_json(cfg, cfg.aggregator_kind), out);
    mil::encoder::save_checkpoint(result.params, out / "checkpoints" / "encoder_pretrain.mile");
    mil::pipeline::write_pretrain_loss_csv(result.epoch_loss, out / "pretrain_loss.csv");
    manifest.add_output("encoder", out / "checkpoints" / "encoder_pretrain.mile");
    manifest.write(out);
    std::printf("pretrained %zu epochs, final loss %.6f\n", result.epoch_loss.size(),
                result.epoch_loss.empty() ? 0.0 : result.epoch_loss.back());
    return 0;
  }

  // All finetuning modes start from a pretrained encoder checkpoint.
  fs::path enc_path = encoder_path;
  if (enc_path.empty()) {
    const std::string from_cfg =
        root.value("train", json::object()).value("encoder_checkpoint", std::string());
    if (from_cfg.empty()) {
      throw mil::MissingArtifactError("mode " + mode +
                                      " needs --encoder or train.encoder_checkpoint");
    }
    enc_path = from_cfg;
  }
  const mil::encoder::EncoderParams pretrained = load_encoder_or_die(enc_path);
  manifest.add_input("encoder", enc_path);

  if (mode == "gt" && !ds.has_instance_labels()) {
    throw mil::MissingArtifactError("mode gt needs ground-truth instance labels in the dataset");
  }

  mil::pipeline::RunArtifacts artifacts;
  if (mode == "its2clr") {
    artifacts = mil::pipeline::run_its2clr(ds, cfg, pretrained);
  } else if (mode == "ce" || mode == "ce-iter") {
    const bool iter = mode == "ce-iter" || (iterative ? *iterative : false);
    artifacts = mil::pipeline::run_ce_finetune(ds, cfg, pretrained, iter);
  } else if (mode == "gt") {
    artifacts = mil::pipeline::run_groundtruth_finetune(ds, cfg, pretrained);
  } else if (mode == "e2e") {
    artifacts = mil::pipeline::run_end2end(ds, cfg, pretrained);
  } else if (mode == "agg-only") {
    artifacts = mil::pipeline::run_aggregator_only(ds, cfg, pretrained);
  } else {
    throw mil::ConfigError("unknown mode: " + mode);
  }

  write_config_snapshot(train_to_json(cfg, cfg.aggregator_kind), out);
  mil::pipeline::write_run_artifacts(artifacts, ds, out);
  manifest.add_output("curves", out / "curves.csv");
  manifest.add_output("report", out / "report.csv");
  manifest.add_output("best_encoder", out / "checkpoints" / "encoder_best.mile");
  manifest.add_output("best_aggregator", out / "checkpoints" / "aggregator_best.mila");
  manifest.write(out);

  std::printf("mode %s: best round %zu, val bag AUC %.4f, test bag AUC %.4f\n", mode.c_str(),
              artifacts.best_round, artifacts.round_val_auc[artifacts.best_round],
              artifacts.reports.test.bag_auc);
  return 0;
}

int cmd_eval(const fs::path& run_dir, const fs::path& dataset_dir, std::vector<std::string> kinds,
             bool linear_eval, const fs::path& out, std::uint64_t seed,
             const fs::path& config_path) {
  const json root = config_path.empty() ? json::object() : load_json(config_path);
  mil::pipeline::TrainConfig cfg = parse_train(root);
  const mil::data::Dataset ds = mil::data::load_dataset(dataset_dir);
  const fs::path enc_path = find_run_encoder(run_dir);
  const mil::encoder::EncoderParams enc = mil::encoder::load_checkpoint(enc_path);

  ManifestWriter manifest("eval", train_to_json(cfg, cfg.aggregator_kind), seed);
  manifest.add_input("run", run_dir);
  manifest.add_input("dataset", dataset_dir);
  manifest.add_input("encoder", enc_path);
  fs::create_directories(out);

  const std::size_t retrains = 5;  // mean/std over five aggregator retrains
  std::string report = "context,split,metric,mean,std,n\n";
  auto add_row = [&](const std::string& ctx, const char* metric, std::span<const double> vals) {
    double mean = 0.0;
    for (double v : vals) mean += v;
    mean /= static_cast<double>(vals.size());
    double var = 0.0;
    for (double v : vals) var += (v - mean) * (v - mean);
    const double stdev =
        vals.size() > 1 ? std::sqrt(var / static_cast<double>(vals.size() - 1)) : 0.0;
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s,test,%s,%.10g,%.10g,%zu\n", ctx.c_str(), metric, mean,
                  stdev, vals.size());
    report += buf;
  };

  for (const std::string& kind_name : kinds) {
    const mil::agg::Kind kind = mil::agg::kind_from_name(kind_name);
    mil::pipeline::TrainConfig kc = cfg;
    kc.aggregator_kind = kind;
    if (kind_name == "attention_instance") {
      kc.aggregator.attention_mode = mil::agg::AttentionMode::instance;
    }
    std::vector<double> bag_auc, inst_auc, inst_auprc, inst_f1;
    for (std::size_t i = 0; i < retrains; ++i) {
      kc.seed = mil::seed_stream(seed, mil::mix64(static_cast<std::uint64_t>(kind)), i);
      const auto artifacts = mil::pipeline::run_aggregator_only(ds, kc, enc);
      bag_auc.push_back(artifacts.reports.test.bag_auc);
      if (!std::isnan(artifacts.reports.test.instance_auc)) {
        inst_auc.push_back(artifacts.reports.test.instance_auc);
        inst_auprc.push_back(artifacts.reports.test.instance_auprc);
        inst_f1.push_back(artifacts.reports.test.instance_max_f1);
      }
    }
    add_row(kind_name, "bag_auc", bag_auc);
    if (!inst_auc.empty()) {
      add_row(kind_name, "instance_auc", inst_auc);
      add_row(kind_name, "instance_auprc", inst_auprc);
      add_row(kind_name, "instance_max_f1", inst_f1);
    }
    std::printf("eval %s: done (%zu retrains)\n", kind_name.c_str(), retrains);
  }

  if (linear_eval) {
    if (!ds.has_instance_labels()) {
      throw mil::MissingArtifactError("--linear-eval needs ground-truth instance labels");
    }
    const mil::num::Matrix h_all = mil::pipeline::embed_all(enc, ds.features, cfg.threads);
    auto view_of = [&](mil::data::Split s) {
      std::vector<std::uint32_t> ids;
      std::vector<std::uint8_t> truth;
      for (const mil::data::Bag* b : ds.bags_in(s)) {
        for (std::uint32_t i = b->start; i < b->end; ++i) {
          ids.push_back(i);
          truth.push_back(b->instance_labels[i - b->start]);
        }
      }
      mil::num::Matrix h(ids.size(), h_all.cols());
      for (std::size_t i = 0; i < ids.size(); ++i) {
        std::copy_n(h_all.row_span(ids[i]).data(), h_all.cols(), h.row_span(i).data());
      }
      return std::pair(std::move(h), std::move(truth));
    };
    auto [h_train, y_train] = view_of(mil::data::Split::train);
    auto [h_val, y_val] = view_of(mil::data::Split::val);
    auto [h_test, y_test] = view_of(mil::data::Split::test);
    const mil::agg::LinearProbe probe = mil::agg::train_linear_probe(h_train, y_train);
    const std::vector<double> s_test = mil::agg::probe_scores(probe, h_test);
    const std::vector<double> s_val = mil::agg::probe_scores(probe, h_val);

    const double v_auc[] = {mil::metrics::roc_auc(y_test, s_test)};
    add_row("linear_probe", "instance_auc", v_auc);
    const double v_pr[] = {mil::metrics::aupr(y_test, s_test)};
    add_row("linear_probe", "instance_auprc", v_pr);
    const double v_f1[] = {mil::metrics::max_f1(y_test, s_test).f1};
    add_row("linear_probe", "instance_max_f1", v_f1);
    const double v_dice[] = {mil::metrics::dice_calibrated(y_test, s_test, y_val, s_val).first};
    add_row("linear_probe", "dice", v_dice);

    // Bag-level prediction from the probe by max pooling its instance scores.
    std::vector<std::uint8_t> bag_labels;
    std::vector<double> bag_max;
    for (const mil::data::Bag* b : ds.bags_in(mil::data::Split::test)) {
      bag_labels.push_back(b->label ? 1 : 0);
      mil::num::Matrix h(b->size(), h_all.cols());
      for (std::uint32_t i = b->start; i < b->end; ++i) {
        std::copy_n(h_all.row_span(i).data(), h_all.cols(), h.row_span(i - b->start).data());
      }
      const std::vector<double> s = mil::agg::probe_scores(probe, h);
      bag_max.push_back(*std::max_element(s.begin(), s.end()));
    }
    const double v_bag[] = {mil::metrics::roc_auc(bag_labels, bag_max)};
    add_row("linear_probe", "bag_auc_maxpool", v_bag);
    std::printf("eval linear_probe: done\n");
  }

  std::ofstream(out / "report.csv", std::ios::binary) << report;
  manifest.add_output("report", out / "report.csv");
  manifest.write(out);
  return 0;
}

int cmd_plot(const std::vector<fs::path>& run_dirs, const fs::path& out_svg,
             const std::string& split) {
  std::vector<Series> series;
  double x_max = 0.0;
  std::string tsv = "run\tmetric\tepoch\tvalue\n";
  const char* metric_names[] = {"bag_auc", "inst_auc", "inst_max_f1"};
  for (const fs::path& dir : run_dirs) {
    const std::vector<CurveRowIn> rows = read_curves(dir / "curves.csv");
    for (const char* metric : metric_names) {
      Series s;
      s.label = dir.filename().string() + ":" + metric;
      for (const auto& row : rows) {
        if (row.split != split) continue;
        const auto it = row.cells.find(metric);
        if (it == row.cells.end() || std::isnan(it->second)) continue;
        s.points.emplace_back(static_cast<double>(row.epoch), it->second);
        x_max = std::max(x_max, static_cast<double>(row.epoch));
        tsv += dir.filename().string() + "\t" + metric + "\t" + std::to_string(row.epoch) + "\t" +
               fmt_num(it->second) + "\n";
      }
      if (!s.points.empty()) series.push_back(std::move(s));
    }
  }
  if (series.empty()) throw mil::FormatError("no plottable rows for split " + split);
  write_svg(series, x_max, out_svg);
  fs::path tsv_path = out_svg;
  tsv_path.replace_extension(".tsv");
  std::ofstream(tsv_path, std::ios::binary) << tsv;
  std::printf("wrote %s and %s\n", out_svg.string().c_str(), tsv_path.string().c_str());
  return 0;
}

int cmd_sweep_wr(const fs::path& config_path, const fs::path& out, const std::vector<double>& wrs,
                 std::size_t n_seeds, const std::vector<std::string>& modes,
                 std::optional<std::size_t> threads) {
  const json root = load_json(config_path);
  fs::create_directories(out);
  ManifestWriter manifest("sweep-wr", root, parse_train(root).seed);
  manifest.add_input("config", config_path);

  std::string sweep = "witness_rate,mode,seed,test_bag_auc\n";
  for (double wr : wrs) {
    mil::data::SynthConfig synth_cfg = parse_synth(root);
    synth_cfg.witness_rate = wr;
    char wr_name[32];
    std::snprintf(wr_name, sizeof wr_name, "wr_%04d", static_cast<int>(wr * 1000.0 + 0.5));
    const fs::path ds_dir = out / wr_name / "dataset";
    mil::data::save_dataset(mil::data::gen_synthetic(synth_cfg), ds_dir);
    const mil::data::Dataset ds = mil::data::load_dataset(ds_dir);

    for (std::size_t s = 0; s < n_seeds; ++s) {
      mil::pipeline::TrainConfig cfg = parse_train(root);
      cfg.seed = mil::seed_stream(cfg.seed, static_cast<std::uint64_t>(wr * 1e6), s);
      if (threads) cfg.threads = *threads;
      const mil::pipeline::PretrainResult pre = mil::pipeline::run_cssl_pretrain(ds, cfg);
      for (const std::string& mode : modes) {
        mil::pipeline::RunArtifacts artifacts;
        if (mode == "its2clr") {
          artifacts = mil::pipeline::run_its2clr(ds, cfg, pre.params);
        } else if (mode == "ce-iter") {
          artifacts = mil::pipeline::run_ce_finetune(ds, cfg, pre.params, true);
        } else if (mode == "ce") {
          artifacts = mil::pipeline::run_ce_finetune(ds, cfg, pre.params, false);
        } else if (mode == "gt") {
          artifacts = mil::pipeline::run_groundtruth_finetune(ds, cfg, pre.params);
        } else {
          throw mil::ConfigError("sweep-wr: unsupported mode " + mode);
        }
        char row[96];
        std::snprintf(row, sizeof row, "%.4f,%s,%zu,%.10g\n", wr, mode.c_str(), s,
                      artifacts.reports.test.bag_auc);
        sweep += row;
        const fs::path run_dir = out / wr_name / (mode + "_seed" + std::to_string(s));
        mil::pipeline::write_run_artifacts(artifacts, ds, run_dir);
        std::printf("sweep wr=%.3f mode=%s seed=%zu test bag AUC %.4f\n", wr, mode.c_str(), s,
                    artifacts.reports.test.bag_auc);
      }
    }
  }
  std::ofstream(out / "sweep.csv", std::ios::binary) << sweep;
  manifest.add_output("sweep", out / "sweep.csv");
  manifest.write(out);
  return 0;
}

int dispatch(int argc, char** argv) {
  CLI::App app{"millab: a desk-scale multiple-instance-learning laboratory"};
  app.require_subcommand(1);

  std::string config_path, out_path, mode = "its2clr", split = "train", encoder_path;
  std::string eval_dataset;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::optional<bool> iterative;
  std::vector<std::string> run_dirs;
  std::vector<std::string> kinds{"max", "topk", "attention", "ds_mil", "transformer"};
  std::vector<double> wrs{0.05, 0.45};
  std::vector<std::string> sweep_modes{"its2clr", "ce-iter"};
  std::size_t n_seeds = 5;
  bool linear_eval = false;

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  synth->add_option("--config", config_path, "JSON config")->required();
  synth->add_option("--out", out_path, "output dataset directory")->required();
  synth->add_option("--seed", seed, "override synth.seed");

  auto* train = app.add_subcommand("train", "train one pipeline mode");
  train->add_option("--mode", mode, "pretrain | its2clr | ce | ce-iter | gt | e2e | agg-only")
      ->required();
  train->add_option("--dataset", run_dirs, "dataset directory")->expected(1)->required();
  train->add_option("--config", config_path, "JSON config")->required();
  train->add_option("--out", out_path, "run directory")->required();
  train->add_option("--seed", seed, "override train.seed");
  train->add_option("--threads", threads, "worker threads (default 1; env MILLAB_THREADS)");
  train->add_option("--encoder", encoder_path, "pretrained encoder checkpoint");
  train->add_flag("--iterative,!--no-iterative", iterative, "toggle pseudo-label refresh");

  auto* eval = app.add_subcommand("eval", "retrain aggregators on frozen features");
  eval->add_option("--run", run_dirs, "run directory with an encoder checkpoint")
      ->expected(1)
      ->required();
  eval->add_option("--dataset", eval_dataset, "dataset directory")->required();
  eval->add_option("--out", out_path, "output directory")->required();
  eval->add_option("--aggregators", kinds, "aggregator kinds")->delimiter(',');
  eval->add_option("--config", config_path, "JSON config (aggregator settings)");
  eval->add_option("--seed", seed, "base seed for the retrains");
  eval->add_flag("--linear-eval", linear_eval, "also fit a logistic probe on frozen features");

  auto* plot = app.add_subcommand("plot", "emit an SVG learning-curve chart");
  plot->add_option("runs", run_dirs, "run directories with curves.csv")->required();
  plot->add_option("--out", out_path, "output .svg path")->required();
  plot->add_option("--split", split, "split to plot (train/val/test)");

  auto* sweep = app.add_subcommand("sweep-wr", "witness-rate study");
  sweep->add_option("--config", config_path, "JSON config")->required();
  sweep->add_option("--out", out_path, "output directory")->required();
  sweep->add_option("--wr", wrs, "witness rates")->delimiter(',');
  sweep->add_option("--seeds", n_seeds, "seeds per cell");
  sweep->add_option("--modes", sweep_modes, "modes to compare")->delimiter(',');
  sweep->add_option("--threads", threads, "worker threads");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 2;
  }

  if (synth->parsed()) return cmd_synth(config_path, out_path, seed);
  if (train->parsed()) {
    return cmd_train(mode, run_dirs.at(0), config_path, out_path, seed, iterative, threads,
                     encoder_path);
  }
  if (eval->parsed()) {
    return cmd_eval(run_dirs.at(0), eval_dataset, kinds, linear_eval, out_path, seed.value_or(0),
                    config_path);
  }
  if (plot->parsed()) {
    std::vector<fs::path> dirs(run_dirs.begin(), run_dirs.end());
    return cmd_plot(dirs, out_path, split);
  }
  if (sweep->parsed()) {
    return cmd_sweep_wr(config_path, out_path, wrs, n_seeds, sweep_modes, threads);
  }
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return dispatch(argc, argv);
  } catch (const mil::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const mil::FormatError& e) {
    std::fprintf(stderr, "format error: %s\n", e.what());
    return 2;
  } catch (const mil::UndefinedMetricError& e) {
    std::fprintf(stderr, "metric error: %s\n", e.what());
    return 2;
  } catch (const mil::MissingArtifactError& e) {
    std::fprintf(stderr, "missing artifact: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  }
}
