#pragma once

#include <iostream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "latseg/checkpoint.hpp"
#include "latseg/mean_shift.hpp"
#include "latseg/metrics.hpp"
#include "latseg/optimizer.hpp"
#include "latseg/synthetic.hpp"

namespace latseg {

// Glue between datasets, models and the CLI: scene construction, the
// training loop, evaluation reports and inference.

struct RunOptions {
  int dim = 3;
  int levels = 2;
  std::vector<int> widths = {64, 128};
  int embed_dim = 8;
  std::vector<double> sigma;  // empty -> auto from points_per_vertex
  double points_per_vertex = 30.0;
  int steps = 200;
  uint64_t seed = 0;
  int window = 0;  // 0 = dataset default
  DiscriminativeMargins margins;
  bool offset_reg = false;
  OptimizerConfig optimizer;
  int eval_every = 10;
  bool quiet = false;
};

using Report = std::vector<std::pair<std::string, std::string>>;

inline void append_metric(Report& report, const std::string& name, double value) {
  report.emplace_back(name, format_real(value));
}

inline void write_report(std::ostream& out, const Report& report) {
  for (const auto& [k, v] : report) out << k << '\t' << v << '\n';
}

// A dataset held in memory: either loaded from a generated directory or
// produced directly by the generators (train/eval --task without --data).
struct LoadedDataset {
  std::string task;
  int classes = 0;
  int window = 1;
  std::vector<PointCloud> clouds;                 // non-temporal tasks
  std::vector<std::vector<PointCloud>> sequences;  // motion
};

inline LoadedDataset load_dataset(const DatasetIndex& index) {
  LoadedDataset data;
  data.task = index.task;
  data.classes = index.classes;
  data.window = index.window;
  for (const auto& path : index.clouds) data.clouds.push_back(load_cloud(path));
  for (const auto& manifest_path : index.sequences) {
    auto manifest = load_manifest(manifest_path);
    std::vector<PointCloud> steps;
    for (const auto& path : manifest.cloud_paths) steps.push_back(load_cloud(path));
    data.sequences.push_back(std::move(steps));
  }
  return data;
}

// Deterministic in-memory generation, matching `gen` with the same seed.
inline LoadedDataset make_dataset(const GenParams& params) {
  LoadedDataset data;
  data.task = params.task;
  if (params.task == "semantic-parts") {
    data.classes = 3;
    for (int s = 0; s < params.scenes; ++s)
      data.clouds.push_back(gen_semantic_parts_cloud(params.seed + static_cast<uint64_t>(s), params.points));
  } else if (params.task == "instances") {
    data.classes = 1;
    for (int s = 0; s < params.scenes; ++s)
      data.clouds.push_back(gen_instances_cloud(params.seed + static_cast<uint64_t>(s), params.blobs, params.per_blob));
  } else if (params.task == "motion") {
    data.classes = 2;
    data.window = params.window;
    int pairs = std::max(1, params.scenes / 2);
    for (int k = 0; k < pairs; ++k) {
      auto pair = gen_motion_pair(params.seed + static_cast<uint64_t>(k), params.per_blob, params.window);
      for (auto& scene : pair) data.sequences.push_back(std::move(scene.steps));
    }
  } else {
    throw config_error("unknown task: " + params.task);
  }
  return data;
}

inline ModelConfig config_for_dataset(const LoadedDataset& data, const RunOptions& opts) {
  ModelConfig cfg;
  cfg.dim = opts.dim;
  cfg.levels = opts.levels;
  cfg.widths = opts.widths;
  cfg.embed_dim = opts.embed_dim;
  cfg.sigma = opts.sigma;
  cfg.points_per_vertex = opts.points_per_vertex;
  cfg.seed = opts.seed;
  cfg.use_offset_reg = opts.offset_reg;
  if (data.task == "semantic-parts") {
    cfg.head = HeadKind::Semantic;
    cfg.classes = data.classes;
  } else if (data.task == "instances") {
    cfg.head = HeadKind::Instance;
  } else if (data.task == "motion") {
    cfg.head = HeadKind::Motion;
    cfg.classes = data.classes;
    cfg.temporal_window = opts.window > 0 ? opts.window : data.window;
  } else {
    throw config_error("unknown task: " + data.task);
  }
  return cfg;
}

// Builds every scene's geometry context. For motion, the window override
// (e.g. 1) keeps only the trailing clouds of each sequence.
inline std::vector<SceneContext> build_scenes(const LoadedDataset& data, const ModelConfig& cfg) {
  std::vector<SceneContext> scenes;
  if (data.task == "motion") {
    for (const auto& steps : data.sequences) {
      std::vector<Tensor> positions, features;
      std::vector<int> labels;
      int keep = std::min<int>(cfg.temporal_window, static_cast<int>(steps.size()));
      size_t first = steps.size() - static_cast<size_t>(keep);
      for (size_t i = first; i < steps.size(); ++i) {
        positions.push_back(steps[i].positions);
        features.push_back(steps[i].features);
        if (i + 1 == steps.size()) labels = steps[i].semantic;
      }
      scenes.push_back(make_scene_context(cfg, positions, features, std::move(labels)));
    }
  } else {
    for (const auto& cloud : data.clouds) {
      std::vector<int> labels = cfg.head == HeadKind::Instance ? cloud.instance : cloud.semantic;
      scenes.push_back(make_scene_context(cfg, {cloud.positions}, {cloud.features},
                                          std::move(labels)));
    }
  }
  if (scenes.empty()) throw invalid_input("dataset has no scenes");
  return scenes;
}

// First training cloud of the dataset (used to resolve sigma).
inline Tensor first_positions(const LoadedDataset& data) {
  if (data.task == "motion") return data.sequences.at(0).back().positions;
  return data.clouds.at(0).positions;
}

inline Model train_on_dataset(const LoadedDataset& data, const RunOptions& opts,
                              std::ostream& log) {
  ModelConfig cfg = config_for_dataset(data, opts);
  if (cfg.head == HeadKind::Instance) check_margins(opts.margins);
  Model model(cfg);
  model.resolve_sigma(first_positions(data));
  auto scenes = build_scenes(data, model.config());

  Optimizer opt(opts.optimizer);
  double window_loss = 0;
  int window_count = 0;
  for (int step = 0; step < opts.steps; ++step) {
    const SceneContext& scene = scenes[static_cast<size_t>(step) % scenes.size()];
    double loss = train_step(model, scene, opt, opts.margins);
    window_loss += loss;
    ++window_count;
    if ((step + 1) % opts.eval_every == 0) {
      double avg = window_loss / window_count;
      bool dropped = opt.observe_eval(avg);
      if (!opts.quiet)
        log << "step " << (step + 1) << " loss " << format_real(avg)
            << (dropped ? " (lr dropped)" : "") << '\n';
      window_loss = 0;
      window_count = 0;
    }
  }
  return model;
}

// Forward pass without gradients; returns the raw head output for the last
// step of the scene.
inline Tensor infer_scene(const Model& model, const SceneContext& scene) {
  Tape tape;
  auto params = model.bind(tape);
  auto fwd = model.forward(tape, scene, params);
  return tape.val(fwd.output);
}

inline std::vector<int> argmax_rows(const Tensor& scores) {
  std::vector<int> out(static_cast<size_t>(scores.rows()));
  for (int i = 0; i < scores.rows(); ++i) {
    int best = 0;
    for (int j = 1; j < scores.cols(); ++j)
      if (scores(i, j) > scores(i, best)) best = j;
    out[static_cast<size_t>(i)] = best;
  }
  return out;
}

inline std::vector<int> cluster_embeddings(const Tensor& embeddings,
                                           const DiscriminativeMargins& margins) {
  MeanShiftConfig ms;
  ms.bandwidth = margins.delta_v;  // trained embeddings lie within delta_v
  ms.merge_radius = margins.delta_v / 2;
  ms.convergence_eps = margins.delta_v / 100;
  return mean_shift(embeddings, ms).assignment;
}

inline Report evaluate(const Model& model, const LoadedDataset& data, const RunOptions& opts) {
  auto scenes = build_scenes(data, model.config());
  Report report;
  if (model.config().head == HeadKind::Instance) {
    double total_sbd = 0;
    for (auto& scene : scenes) {
      Tensor emb = infer_scene(model, scene);
      auto pred = cluster_embeddings(emb, opts.margins);
      total_sbd += sbd(pred, scene.labels);
    }
    append_metric(report, "sbd", total_sbd / scenes.size());
  } else {
    std::vector<int> all_pred, all_gt;
    for (auto& scene : scenes) {
      auto pred = argmax_rows(infer_scene(model, scene));
      all_pred.insert(all_pred.end(), pred.begin(), pred.end());
      all_gt.insert(all_gt.end(), scene.labels.begin(), scene.labels.end());
    }
    int K = model.config().classes;
    append_metric(report, "accuracy", accuracy(all_pred, all_gt));
    auto iou = miou(all_pred, all_gt, K);
    append_metric(report, "miou", iou.mean);
    for (int c = 0; c < K; ++c)
      append_metric(report, "iou_" + std::to_string(c), iou.per_class[static_cast<size_t>(c)]);
    if (model.config().head == HeadKind::Motion)
      append_metric(report, "accuracy_moving", class_accuracy(all_pred, all_gt, 1));
  }
  return report;
}

// Labels for a single input cloud/sequence, per the model's head.
inline std::vector<int> infer_labels(const Model& model, const std::vector<Tensor>& positions,
                                     const std::vector<Tensor>& features,
                                     const DiscriminativeMargins& margins) {
  auto scene = make_scene_context(model.config(), positions, features, {});
  Tensor out = infer_scene(model, scene);
  if (model.config().head == HeadKind::Instance) return cluster_embeddings(out, margins);
  return argmax_rows(out);
}

}  // namespace latseg
