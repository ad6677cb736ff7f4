#include <cmath>
#include <cstdio>
#include <string>

#include "binio.hpp"
#include "mil/errors.hpp"
#include "mil/pipeline.hpp"

namespace mil::pipeline {

namespace {

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

void save_text(const std::string& text, const std::filesystem::path& path) {
  io::Writer w;
  w.put_bytes(text.data(), text.size());
  w.save(path);
}

void append_report(std::string& text, const char* split, const metrics::MetricsReport& r) {
  const std::pair<const char*, double> rows[] = {
      {"bag_auc", r.bag_auc},
      {"instance_auc", r.instance_auc},
      {"instance_auprc", r.instance_auprc},
      {"instance_max_f1", r.instance_max_f1},
      {"dice", r.dice},
      {"iou", r.iou},
      {"inter_class_distance", r.inter_class_distance},
      {"intra_class_deviation_pos", r.intra_class_deviation_pos},
      {"intra_class_deviation_neg", r.intra_class_deviation_neg},
      {"pseudo_precision", r.pseudo_label_precision},
      {"pseudo_recall", r.pseudo_label_recall},
  };
  for (const auto& [name, value] : rows) {
    text += std::string("final,") + split + "," + name + "," + fmt(value) + ",0,1\n";
  }
}

}  // namespace

void write_curves_csv(std::span<const CurveRow> curves, const std::filesystem::path& path) {
  std::string text = "round,epoch,split,bag_auc,inst_auc,inst_max_f1,pseudo_precision,pseudo_recall\n";
  for (const CurveRow& row : curves) {
    text += std::to_string(row.round) + "," + std::to_string(row.epoch) + "," +
            data::split_name(row.split) + "," + fmt(row.bag_auc) + "," + fmt(row.inst_auc) + "," +
            fmt(row.inst_max_f1) + "," + fmt(row.pseudo_precision) + "," +
            fmt(row.pseudo_recall) + "\n";
  }
  save_text(text, path);
}

void write_report_csv(const SplitReports& reports, const std::filesystem::path& path) {
  std::string text = "context,split,metric,mean,std,n\n";
  append_report(text, "train", reports.train);
  append_report(text, "val", reports.val);
  append_report(text, "test", reports.test);
  save_text(text, path);
}

void write_pseudo_labels_csv(const PseudoLabelState& state,
                             std::span<const std::uint32_t> train_instance_ids,
                             const std::filesystem::path& path) {
  if (state.labels.size() != train_instance_ids.size()) {
    throw ShapeError("write_pseudo_labels_csv: id/label count mismatch");
  }
  std::string text = "instance_id,score,label\n";
  for (std::size_t i = 0; i < train_instance_ids.size(); ++i) {
    const double score = i < state.scores.size() ? state.scores[i] : std::nan("");
    text += std::to_string(train_instance_ids[i]) + "," + fmt(score) + "," +
            std::to_string(static_cast<int>(state.labels[i])) + "\n";
  }
  save_text(text, path);
}

void write_pretrain_loss_csv(std::span<const double> epoch_loss,
                             const std::filesystem::path& path) {
  std::string text = "epoch,loss\n";
  for (std::size_t e = 0; e < epoch_loss.size(); ++e) {
    text += std::to_string(e + 1) + "," + fmt(epoch_loss[e]) + "\n";
  }
  save_text(text, path);
}

void write_run_artifacts(const RunArtifacts& artifacts, const data::Dataset& ds,
                         const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "checkpoints");
  write_curves_csv(artifacts.curves, dir / "curves.csv");
  write_report_csv(artifacts.reports, dir / "report.csv");

  char name[64];
  for (std::size_t r = 0; r < artifacts.round_encoders.size(); ++r) {
    std::snprintf(name, sizeof name, "encoder_round_%03zu.mile", r);
    encoder::save_checkpoint(artifacts.round_encoders[r], dir / "checkpoints" / name);
    std::snprintf(name, sizeof name, "aggregator_round_%03zu.mila", r);
    agg::save_checkpoint(artifacts.round_aggregators[r], dir / "checkpoints" / name);
  }
  encoder::save_checkpoint(artifacts.final_encoder, dir / "checkpoints" / "encoder_best.mile");
  agg::save_checkpoint(artifacts.final_aggregator, dir / "checkpoints" / "aggregator_best.mila");

  if (!artifacts.pseudo.labels.empty()) {
    std::vector<std::uint32_t> train_ids;
    for (const data::Bag* b : ds.bags_in(data::Split::train)) {
      for (std::uint32_t i = b->start; i < b->end; ++i) train_ids.push_back(i);
    }
    write_pseudo_labels_csv(artifacts.pseudo, train_ids, dir / "pseudo_labels.csv");
  }
}

}  // namespace mil::pipeline
