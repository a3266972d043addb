#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "latseg/losses.hpp"
#include "latseg/nn.hpp"

namespace latseg {

// U-Net model over the lattice hierarchy. Level 0 is the finest lattice;
// level l is built from the scaled positions divided by 2^l. The decoder
// concatenates encoder skip features, so decoder blocks run at twice the
// level width.

enum class HeadKind { Semantic, Instance, Motion };

inline const char* head_name(HeadKind h) {
  switch (h) {
    case HeadKind::Semantic: return "semantic";
    case HeadKind::Instance: return "instance";
    case HeadKind::Motion: return "motion";
  }
  return "?";
}

struct ModelConfig {
  int dim = 3;
  int levels = 2;                   // shallow = 2, deep = 3
  std::vector<int> widths = {64, 128};
  HeadKind head = HeadKind::Semantic;
  int classes = 3;                  // semantic/motion output classes
  int embed_dim = 8;                // instance embedding dimension
  int temporal_window = 1;
  std::vector<double> sigma;        // empty -> resolved from points_per_vertex
  double points_per_vertex = 30.0;
  int feature_dim = 0;              // per-point input features f_d
  int gn_groups = 32;
  double gn_eps = 1e-5;
  bool use_offset_reg = false;
  double offset_reg_weight = 1.0;
  uint64_t seed = 0;

  int out_dim() const { return head == HeadKind::Instance ? embed_dim : classes; }

  void validate() const {
    if (dim < 1) throw config_error("model: dim must be >= 1");
    if (levels < 1) throw config_error("model: levels must be >= 1");
    if (static_cast<int>(widths.size()) != levels)
      throw config_error("model: need one width per level");
    if (temporal_window < 1) throw config_error("model: temporal window must be >= 1");
    if (head == HeadKind::Motion && levels < 2)
      throw config_error("model: the recurrent variant needs at least 2 levels");
    if (out_dim() < 1) throw config_error("model: empty head output");
    for (int w : widths) effective_groups(w, gn_groups);
    effective_groups(2 * widths[0], gn_groups);  // decoder concat width
  }
};

// Resnet blocks per encoder level: one at the finest level, two elsewhere
// (the bottleneck counts as the last level). The decoder mirrors this.
inline int encoder_blocks(int level) { return level == 0 ? 1 : 2; }
inline int decoder_blocks(int level) { return encoder_blocks(level); }

// --------------------------------------------------------------------------
// Geometry context: everything about a scene that does not depend on
// parameters. Lattices are shared and append-only across a sequence.

struct StepGeometry {
  std::shared_ptr<const SimplexFootprint> footprint;  // finest level
  std::vector<int> n_rows;                            // row-count snapshot per level
  std::vector<std::shared_ptr<const Adjacency>> ring;  // same-level, per level
  std::vector<std::shared_ptr<const Adjacency>> down;  // fine l -> coarse l+1 (levels-1 entries)
  std::vector<std::shared_ptr<const Adjacency>> up;    // coarse l+1 -> fine l
  std::shared_ptr<const DistributedBundle> bundle;
  std::shared_ptr<const Segments> segments;
  int n_points = 0;
};

struct SceneContext {
  std::vector<std::shared_ptr<SparseLattice>> lattices;  // per level
  std::vector<StepGeometry> steps;                       // temporal steps, oldest first
  std::vector<int> labels;                               // labels of the last step's cloud

  const StepGeometry& last_step() const { return steps.back(); }
};

// Builds the geometry for a (possibly temporal) scene. `clouds` are raw
// (unscaled) point clouds in a common frame, oldest first.
inline SceneContext make_scene_context(const ModelConfig& cfg,
                                       const std::vector<Tensor>& positions_seq,
                                       const std::vector<Tensor>& features_seq,
                                       std::vector<int> labels) {
  if (positions_seq.empty()) throw invalid_input("scene context: empty sequence");
  if (cfg.sigma.empty()) throw config_error("scene context: sigma not resolved");
  SceneContext ctx;
  ctx.labels = std::move(labels);
  for (int l = 0; l < cfg.levels; ++l)
    ctx.lattices.push_back(std::make_shared<SparseLattice>(cfg.dim));

  for (size_t s = 0; s < positions_seq.size(); ++s) {
    ScaledCloud scaled = scale_cloud(positions_seq[s], cfg.sigma,
                                     s < features_seq.size() ? features_seq[s] : Tensor{});
    StepGeometry step;
    step.n_points = scaled.size();
    auto fp = std::make_shared<SimplexFootprint>(
        build_footprint(*ctx.lattices[0], scaled.positions));
    step.footprint = fp;
    for (int l = 1; l < cfg.levels; ++l)
      build_footprint(*ctx.lattices[static_cast<size_t>(l)], scaled.positions, std::pow(2.0, l));

    step.n_rows.resize(static_cast<size_t>(cfg.levels));
    for (int l = 0; l < cfg.levels; ++l) step.n_rows[static_cast<size_t>(l)] = ctx.lattices[static_cast<size_t>(l)]->size();

    for (int l = 0; l < cfg.levels; ++l)
      step.ring.push_back(std::make_shared<Adjacency>(
          same_level_adjacency(*ctx.lattices[static_cast<size_t>(l)], step.n_rows[static_cast<size_t>(l)])));
    for (int l = 0; l + 1 < cfg.levels; ++l) {
      step.down.push_back(std::make_shared<Adjacency>(
          coarsen_adjacency(*ctx.lattices[static_cast<size_t>(l)], *ctx.lattices[static_cast<size_t>(l) + 1],
                            step.n_rows[static_cast<size_t>(l)], step.n_rows[static_cast<size_t>(l) + 1])));
      step.up.push_back(std::make_shared<Adjacency>(
          upsample_adjacency(*ctx.lattices[static_cast<size_t>(l) + 1], *ctx.lattices[static_cast<size_t>(l)],
                             step.n_rows[static_cast<size_t>(l) + 1], step.n_rows[static_cast<size_t>(l)])));
    }
    auto bundle = std::make_shared<DistributedBundle>(
        distribute(scaled, *fp, step.n_rows[0]));
    step.bundle = bundle;
    auto segs = std::make_shared<Segments>();
    segs->begin = bundle->seg_begin;
    step.segments = segs;
    ctx.steps.push_back(std::move(step));
  }
  return ctx;
}

// --------------------------------------------------------------------------
// Parameter registry.

class Model {
 public:
  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    init_parameters();
  }

  const ModelConfig& config() const { return cfg_; }
  ModelConfig& mutable_config() { return cfg_; }

  // Fixes sigma from data if the config left it to the points-per-vertex
  // target. Must happen before building contexts.
  void resolve_sigma(const Tensor& positions) {
    if (cfg_.sigma.empty()) cfg_.sigma = auto_sigma(positions, cfg_.points_per_vertex);
  }

  int parameter_count() const { return static_cast<int>(names_.size()); }
  const std::string& parameter_name(int i) const { return names_[static_cast<size_t>(i)]; }
  Tensor& parameter(int i) { return values_[static_cast<size_t>(i)]; }
  const Tensor& parameter(int i) const { return values_[static_cast<size_t>(i)]; }

  int parameter_index(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? -1 : it->second;
  }

  int64_t scalar_parameter_count() const {
    int64_t n = 0;
    for (const auto& v : values_) n += v.numel();
    return n;
  }

  uint64_t parameter_checksum() const {
    uint64_t h = 1469598103934665603ull;
    for (size_t i = 0; i < values_.size(); ++i) {
      h = fnv1a_str(names_[i], h);
      h = fnv1a(values_[i].data.data(), values_[i].data.size() * sizeof(double), h);
    }
    return h;
  }

  // Registers every parameter as a tape leaf, in registry order.
  std::vector<Var> bind(Tape& t) const {
    std::vector<Var> vars;
    vars.reserve(values_.size());
    for (const auto& v : values_) vars.push_back(t.leaf(v));
    return vars;
  }

  struct ForwardOut {
    Var output;   // m x K scores or m x E embeddings (last step)
    Var offsets;  // m x (d+1) barycentric offsets from the head
  };

  // Full forward over all steps of the scene; output is for the last step.
  ForwardOut forward(Tape& t, const SceneContext& ctx, const std::vector<Var>& params) const {
    if (ctx.steps.empty()) throw invalid_input("forward: empty sequence");
    bool fuse = cfg_.head == HeadKind::Motion;
    // Histories for the three fusion points (invalid = zero history).
    Var hist_pointnet, hist_encoder, hist_decoder;
    ForwardOut out;
    for (size_t s = 0; s < ctx.steps.size(); ++s) {
      const StepGeometry& step = ctx.steps[s];
      Var rows = t.leaf(step.bundle->rows);
      Var x = pointnet_encode(t, rows, step.segments, pointnet_vars(params), cfg_.gn_groups,
                              cfg_.gn_eps);

      Var next_hist_pointnet, next_hist_encoder, next_hist_decoder;
      if (fuse) {
        next_hist_pointnet = x;
        x = temporal_fuse(t, hist_pointnet.valid() ? hist_pointnet : t.leaf(Tensor({0, cfg_.widths[0]})),
                          x, p(params, "fuse_pointnet.w"), p(params, "fuse_pointnet.b"));
      }

      // Encoder.
      std::vector<Var> skips(static_cast<size_t>(cfg_.levels));
      for (int l = 0; l < cfg_.levels; ++l) {
        if (l > 0)
          x = conv_op(t, x, p(params, key("down", l, ".w")), p(params, key("down", l, ".b")),
                      step.down[static_cast<size_t>(l) - 1]);
        for (int bi = 0; bi < encoder_blocks(l); ++bi)
          x = resnet_block(t, x, step.ring[static_cast<size_t>(l)],
                           resnet_vars(params, key("enc", l, ".res" + std::to_string(bi))),
                           cfg_.gn_groups, cfg_.gn_eps);
        if (l == 0 && fuse) {
          next_hist_encoder = x;
          x = temporal_fuse(t, hist_encoder.valid() ? hist_encoder : t.leaf(Tensor({0, cfg_.widths[0]})),
                            x, p(params, "fuse_encoder.w"), p(params, "fuse_encoder.b"));
        }
        skips[static_cast<size_t>(l)] = x;
      }

      // Decoder with skip concatenation.
      for (int l = cfg_.levels - 2; l >= 0; --l) {
        x = conv_op(t, x, p(params, key("up", l, ".w")), p(params, key("up", l, ".b")),
                    step.up[static_cast<size_t>(l)]);
        x = concat_cols(t, skips[static_cast<size_t>(l)], x);
        if (l == 0 && fuse) {
          next_hist_decoder = x;
          x = temporal_fuse(t, hist_decoder.valid() ? hist_decoder : t.leaf(Tensor({0, 2 * cfg_.widths[0]})),
                            x, p(params, "fuse_decoder.w"), p(params, "fuse_decoder.b"));
        }
        for (int bi = 0; bi < decoder_blocks(l); ++bi)
          x = resnet_block(t, x, step.ring[static_cast<size_t>(l)],
                           resnet_vars(params, key("dec", l, ".res" + std::to_string(bi))),
                           cfg_.gn_groups, cfg_.gn_eps);
      }

      if (fuse) {
        hist_pointnet = next_hist_pointnet;
        hist_encoder = next_hist_encoder;
        hist_decoder = next_hist_decoder;
      }

      if (s + 1 == ctx.steps.size()) {
        auto fp = step.footprint;
        Var q = gather_op(t, x, fp);
        out.offsets = deform_offset_head(t, q, p(params, "head.offset.w"), p(params, "head.offset.b"));
        Var feat = deform_slice_op(t, x, out.offsets, fp);
        out.output = linear(t, feat, p(params, "head.out.w"), p(params, "head.out.b"));
      }
    }
    return out;
  }

  // Loss for the scene under the model's head.
  Var loss(Tape& t, const SceneContext& ctx, const ForwardOut& fwd,
           const DiscriminativeMargins& margins) const {
    auto labels = std::make_shared<const std::vector<int>>(ctx.labels);
    Var total;
    if (cfg_.head == HeadKind::Instance) {
      Var terms = discriminative_loss(t, fwd.output, labels, margins);
      total = index_scalar(t, terms, 0);
    } else {
      total = semantic_loss(t, fwd.output, labels);
    }
    if (cfg_.use_offset_reg) {
      Var reg = offset_regularizer(t, fwd.offsets);
      total = add(t, total, scale(t, reg, cfg_.offset_reg_weight));
    }
    return total;
  }

 private:
  static std::string key(const char* base, int level, const std::string& rest) {
    return std::string(base) + std::to_string(level) + rest;
  }

  Var p(const std::vector<Var>& params, const std::string& name) const {
    int idx = parameter_index(name);
    if (idx < 0) throw config_error("unknown parameter " + name);
    return params[static_cast<size_t>(idx)];
  }

  PointNetVars pointnet_vars(const std::vector<Var>& params) const {
    PointNetVars vars;
    for (int s = 0; s < 3; ++s) {
      PointNetVars::Stage stage;
      std::string base = "pointnet.stage" + std::to_string(s);
      if (parameter_index(base + ".gn.gamma") >= 0) {
        stage.gn_gamma = p(params, base + ".gn.gamma");
        stage.gn_beta = p(params, base + ".gn.beta");
      }
      stage.w = p(params, base + ".w");
      stage.b = p(params, base + ".b");
      vars.stages.push_back(stage);
    }
    return vars;
  }

  ResnetVars resnet_vars(const std::vector<Var>& params, const std::string& base) const {
    ResnetVars vars;
    vars.gn1_gamma = p(params, base + ".gn1.gamma");
    vars.gn1_beta = p(params, base + ".gn1.beta");
    vars.w1 = p(params, base + ".conv1.w");
    vars.b1 = p(params, base + ".conv1.b");
    vars.gn2_gamma = p(params, base + ".gn2.gamma");
    vars.gn2_beta = p(params, base + ".gn2.beta");
    vars.w2 = p(params, base + ".conv2.w");
    vars.b2 = p(params, base + ".conv2.b");
    return vars;
  }

  void add_param(const std::string& name, Tensor value) {
    index_[name] = static_cast<int>(names_.size());
    names_.push_back(name);
    values_.push_back(std::move(value));
  }

  void add_linear(std::mt19937_64& rng, const std::string& base, int c_in, int c_out,
                  double w_scale = -1.0) {
    double s = w_scale > 0 ? w_scale : std::sqrt(2.0 / c_in);
    add_param(base + ".w", random_normal({c_in, c_out}, rng, s));
    add_param(base + ".b", Tensor({c_out}));
  }

  void add_conv(std::mt19937_64& rng, const std::string& base, int c_in, int c_out) {
    int taps = kernel_taps(cfg_.dim);
    add_param(base + ".w", random_normal({taps, c_in, c_out}, rng, std::sqrt(2.0 / (taps * c_in))));
    add_param(base + ".b", Tensor({c_out}));
  }

  void add_gn(const std::string& base, int channels) {
    Tensor gamma({channels});
    for (double& v : gamma.data) v = 1.0;
    add_param(base + ".gamma", std::move(gamma));
    add_param(base + ".beta", Tensor({channels}));
  }

  void add_resnet(std::mt19937_64& rng, const std::string& base, int width) {
    add_gn(base + ".gn1", width);
    add_conv(rng, base + ".conv1", width, width);
    add_gn(base + ".gn2", width);
    add_conv(rng, base + ".conv2", width, width);
  }

  void init_parameters() {
    std::mt19937_64 rng(cfg_.seed);
    // PointNet stages 16, 32, 64; the first stage skips normalization when
    // the input width is below the group count.
    int in_w = cfg_.dim + cfg_.feature_dim;
    const int stage_w[3] = {16, 32, 64};
    for (int s = 0; s < 3; ++s) {
      std::string base = "pointnet.stage" + std::to_string(s);
      if (!(s == 0 && in_w < cfg_.gn_groups)) add_gn(base + ".gn", in_w);
      add_linear(rng, base, in_w, stage_w[s]);
      in_w = stage_w[s];
    }
    if (cfg_.widths[0] != 64)
      throw config_error("model: first level width must match the PointNet output (64)");

    if (cfg_.head == HeadKind::Motion) {
      add_linear(rng, "fuse_pointnet", 2 * cfg_.widths[0], cfg_.widths[0]);
      add_linear(rng, "fuse_encoder", 2 * cfg_.widths[0], cfg_.widths[0]);
      add_linear(rng, "fuse_decoder", 4 * cfg_.widths[0], 2 * cfg_.widths[0]);
    }

    for (int l = 0; l < cfg_.levels; ++l) {
      if (l > 0)
        add_conv(rng, key("down", l, ""), cfg_.widths[static_cast<size_t>(l) - 1],
                 cfg_.widths[static_cast<size_t>(l)]);
      for (int bi = 0; bi < encoder_blocks(l); ++bi)
        add_resnet(rng, key("enc", l, ".res" + std::to_string(bi)), cfg_.widths[static_cast<size_t>(l)]);
    }
    for (int l = cfg_.levels - 2; l >= 0; --l) {
      int from_w = (l == cfg_.levels - 2) ? cfg_.widths[static_cast<size_t>(l) + 1] : 2 * cfg_.widths[static_cast<size_t>(l) + 1];
      add_conv(rng, key("up", l, ""), from_w, cfg_.widths[static_cast<size_t>(l)]);
      for (int bi = 0; bi < decoder_blocks(l); ++bi)
        add_resnet(rng, key("dec", l, ".res" + std::to_string(bi)), 2 * cfg_.widths[static_cast<size_t>(l)]);
    }

    int feat_w = cfg_.levels > 1 ? 2 * cfg_.widths[0] : cfg_.widths[0];
    // Near-zero offset head so training starts as plain slicing.
    add_param("head.offset.w", random_normal({feat_w}, rng, 1e-3));
    add_param("head.offset.b", Tensor({1}));
    add_linear(rng, "head.out", feat_w, cfg_.out_dim(), std::sqrt(1.0 / feat_w));
  }

  ModelConfig cfg_;
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::map<std::string, int> index_;
};

}  // namespace latseg
