#pragma once

#include <memory>
#include <vector>

#include "latseg/lattice_ops.hpp"
#include "latseg/tape.hpp"

namespace latseg {

// Tape-level lattice operators and network blocks. Footprints, adjacencies
// and bundles are geometry context captured by the VJP closures; only value
// tensors and parameters flow through the tape.

inline Var splat_op(Tape& t, Var features, std::shared_ptr<const SimplexFootprint> fp,
                    int n_vertices) {
  Tensor out = splat(t.val(features), *fp, n_vertices);
  int m = fp->points;
  (void)m;
  return t.make("splat", std::move(out), [features, fp](Tape& t, const Tensor& g) {
    t.accumulate(features, splat_vjp(g, *fp));
  });
}

inline Var slice_op(Tape& t, Var values, std::shared_ptr<const SimplexFootprint> fp) {
  Tensor out = slice(t.val(values), *fp);
  int n = t.val(values).rows();
  return t.make("slice", std::move(out), [values, fp, n](Tape& t, const Tensor& g) {
    t.accumulate(values, slice_vjp(g, *fp, n));
  });
}

inline Var gather_op(Tape& t, Var values, std::shared_ptr<const SimplexFootprint> fp) {
  Tensor out = gather(t.val(values), *fp);
  int n = t.val(values).rows();
  return t.make("gather", std::move(out), [values, fp, n](Tape& t, const Tensor& g) {
    t.accumulate(values, gather_vjp(g, *fp, n));
  });
}

inline Var deform_slice_op(Tape& t, Var values, Var offsets,
                           std::shared_ptr<const SimplexFootprint> fp) {
  Tensor out = deform_slice(t.val(values), *fp, t.val(offsets));
  int n = t.val(values).rows();
  return t.make("deform_slice", std::move(out), [values, offsets, fp, n](Tape& t, const Tensor& g) {
    t.accumulate(values, deform_slice_vjp_values(g, *fp, t.val(offsets), n));
    t.accumulate(offsets, deform_slice_vjp_offsets(g, *fp, t.val(values)));
  });
}

// Neighborhood convolution (same-level, strided or transposed depending on
// the adjacency). `bias` may be invalid for bias-free kernels.
inline Var conv_op(Tape& t, Var values, Var weights, Var bias,
                   std::shared_ptr<const Adjacency> adj) {
  ConvKernel kernel;
  kernel.weights = t.val(weights);
  if (bias.valid()) kernel.bias = t.val(bias);
  Tensor out = neighborhood_conv(t.val(values), *adj, kernel);
  int n_src = t.val(values).rows();
  return t.make("conv", std::move(out), [values, weights, bias, adj, n_src](Tape& t, const Tensor& g) {
    ConvKernel kernel;
    kernel.weights = t.val(weights);
    t.accumulate(values, neighborhood_conv_vjp_values(g, *adj, kernel, n_src));
    t.accumulate(weights, neighborhood_conv_vjp_weights(g, t.val(values), *adj, kernel.taps()));
    if (bias.valid()) t.accumulate(bias, neighborhood_conv_vjp_bias(g));
  });
}

inline Var linear(Tape& t, Var x, Var w, Var b) {
  Var y = matmul(t, x, w);
  return b.valid() ? add_rowvec(t, y, b) : y;
}

// --------------------------------------------------------------------------
// Group normalization over (rows x channels-in-group).

inline int effective_groups(int channels, int requested) {
  int g = std::min(requested, channels);
  if (g <= 0 || channels % g != 0)
    throw config_error("group_norm: channel count " + std::to_string(channels) +
                       " not divisible by group count " + std::to_string(g));
  return g;
}

inline Var group_norm(Tape& t, Var x, Var gamma, Var beta, int groups, double eps = 1e-5) {
  const Tensor& xv = t.val(x);
  if (xv.rank() != 2) throw invalid_input("group_norm: input must be 2D");
  int n = xv.rows(), c = xv.cols();
  int g = effective_groups(c, groups);
  int cg = c / g;
  if (t.val(gamma).numel() != c || t.val(beta).numel() != c)
    throw invalid_input("group_norm: gain/bias length mismatch");
  if (n == 0) return t.make("group_norm", Tensor({0, c}), [](Tape&, const Tensor&) {});

  auto xhat = std::make_shared<Tensor>(Tensor({n, c}));
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(g));
  Tensor out({n, c});
  const Tensor& gam = t.val(gamma);
  const Tensor& bet = t.val(beta);
  for (int grp = 0; grp < g; ++grp) {
    int c0 = grp * cg;
    double m = 0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < cg; ++j) m += xv(i, c0 + j);
    m /= double(n) * cg;
    double var = 0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < cg; ++j) {
        double dv = xv(i, c0 + j) - m;
        var += dv * dv;
      }
    var /= double(n) * cg;
    double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<size_t>(grp)] = is;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < cg; ++j) {
        double xh = (xv(i, c0 + j) - m) * is;
        (*xhat)(i, c0 + j) = xh;
        out(i, c0 + j) = gam.data[static_cast<size_t>(c0 + j)] * xh + bet.data[static_cast<size_t>(c0 + j)];
      }
  }
  return t.make("group_norm", std::move(out),
                [x, gamma, beta, xhat, inv_std, n, g, cg](Tape& t, const Tensor& gout) {
    const Tensor& gam = t.val(gamma);
    t.accumulate_with(beta, [&](Tensor& gb) {
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < g * cg; ++j) gb.data[static_cast<size_t>(j)] += gout(i, j);
    });
    t.accumulate_with(gamma, [&](Tensor& gg) {
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < g * cg; ++j) gg.data[static_cast<size_t>(j)] += gout(i, j) * (*xhat)(i, j);
    });
    t.accumulate_with(x, [&](Tensor& gx) {
      double count = double(n) * cg;
      for (int grp = 0; grp < g; ++grp) {
        int c0 = grp * cg;
        double sum_gy = 0, sum_gy_xhat = 0;
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < cg; ++j) {
            double gy = gout(i, c0 + j) * gam.data[static_cast<size_t>(c0 + j)];
            sum_gy += gy;
            sum_gy_xhat += gy * (*xhat)(i, c0 + j);
          }
        double mean_gy = sum_gy / count;
        double mean_gy_xhat = sum_gy_xhat / count;
        double is = (*inv_std)[static_cast<size_t>(grp)];
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < cg; ++j) {
            double gy = gout(i, c0 + j) * gam.data[static_cast<size_t>(c0 + j)];
            gx(i, c0 + j) += is * (gy - mean_gy - (*xhat)(i, c0 + j) * mean_gy_xhat);
          }
      }
    });
  });
}

// --------------------------------------------------------------------------
// Segmented max-pool: column-wise max over each vertex's contributor rows.
// Empty segments (vertices with no contributors at this step) produce zeros.

struct Segments {
  std::vector<int32_t> begin;  // n+1 offsets into the row matrix
  int count() const { return static_cast<int>(begin.size()) - 1; }
};

inline Var segmented_maxpool(Tape& t, Var rows, std::shared_ptr<const Segments> segs) {
  const Tensor& rv = t.val(rows);
  int c = rv.cols(), n = segs->count();
  Tensor out({n, c});
  auto argmax = std::make_shared<std::vector<int32_t>>(static_cast<size_t>(n) * c, -1);
  for (int v = 0; v < n; ++v) {
    int b = segs->begin[static_cast<size_t>(v)], e = segs->begin[static_cast<size_t>(v) + 1];
    if (b == e) continue;
    for (int j = 0; j < c; ++j) {
      double best = rv(b, j);
      int best_r = b;
      for (int r = b + 1; r < e; ++r)
        if (rv(r, j) > best) {
          best = rv(r, j);
          best_r = r;
        }
      out(v, j) = best;
      (*argmax)[static_cast<size_t>(v) * c + j] = best_r;
    }
  }
  return t.make("segmented_maxpool", std::move(out), [rows, argmax, n, c](Tape& t, const Tensor& g) {
    t.accumulate_with(rows, [&](Tensor& gr) {
      for (int v = 0; v < n; ++v)
        for (int j = 0; j < c; ++j) {
          int r = (*argmax)[static_cast<size_t>(v) * c + j];
          if (r >= 0) gr(r, j) += g(v, j);
        }
    });
  });
}

// --------------------------------------------------------------------------
// PointNet vertex encoder: three (GroupNorm -> ReLU -> per-row linear)
// stages over contributor rows, then per-vertex max-pool. The first stage
// skips normalization when the input width is below the group count.

struct PointNetVars {
  struct Stage {
    Var gn_gamma, gn_beta;  // invalid when the stage skips normalization
    Var w, b;
  };
  std::vector<Stage> stages;
};

inline Var pointnet_encode(Tape& t, Var rows, std::shared_ptr<const Segments> segs,
                           const PointNetVars& vars, int gn_groups, double gn_eps) {
  Var h = rows;
  for (const auto& stage : vars.stages) {
    if (stage.gn_gamma.valid()) h = group_norm(t, h, stage.gn_gamma, stage.gn_beta, gn_groups, gn_eps);
    h = relu(t, h);
    h = linear(t, h, stage.w, stage.b);
  }
  return segmented_maxpool(t, h, segs);
}

// --------------------------------------------------------------------------
// Pre-activated ResNet block: X + conv(relu(gn(conv(relu(gn(X)))))).

struct ResnetVars {
  Var gn1_gamma, gn1_beta, w1, b1;
  Var gn2_gamma, gn2_beta, w2, b2;
};

inline Var resnet_block(Tape& t, Var x, std::shared_ptr<const Adjacency> adj,
                        const ResnetVars& vars, int gn_groups, double gn_eps) {
  Var h = group_norm(t, x, vars.gn1_gamma, vars.gn1_beta, gn_groups, gn_eps);
  h = relu(t, h);
  h = conv_op(t, h, vars.w1, vars.b1, adj);
  h = group_norm(t, h, vars.gn2_gamma, vars.gn2_beta, gn_groups, gn_eps);
  h = relu(t, h);
  h = conv_op(t, h, vars.w2, vars.b2, adj);
  return add(t, x, h);
}

// --------------------------------------------------------------------------
// Permutation-equivariant offset head for DeformSlice:
//   db_pv = tanh(b + (b_pv x_v - max_{other vertices} b_pd x_d) . W)
// with the max taken elementwise per channel over the other d rows.

inline Var deform_offset_head(Tape& t, Var bundle, Var w, Var b) {
  const Tensor& q = t.val(bundle);
  if (q.rank() != 3) throw invalid_input("deform_offset_head: bundle must be m x (d+1) x c");
  const Tensor& wv = t.val(w);
  int m = q.dim(0), dp1 = q.dim(1), c = q.dim(2);
  if (wv.numel() != c) throw invalid_input("deform_offset_head: weight length != channels");
  if (t.val(b).numel() != 1) throw invalid_input("deform_offset_head: bias must be scalar");
  double bias = t.val(b).data[0];

  Tensor out({m, dp1});
  // argmax over the other rows, per (point, vertex, channel)
  auto arg = std::make_shared<std::vector<int32_t>>(static_cast<size_t>(m) * dp1 * c);
  for (int p = 0; p < m; ++p) {
    for (int k = 0; k < dp1; ++k) {
      double s = bias;
      for (int ch = 0; ch < c; ++ch) {
        double best = -std::numeric_limits<double>::infinity();
        int best_j = -1;
        for (int j = 0; j < dp1; ++j) {
          if (j == k) continue;
          double v = q(p, j, ch);
          if (v > best) {
            best = v;
            best_j = j;
          }
        }
        (*arg)[(static_cast<size_t>(p) * dp1 + k) * c + ch] = best_j;
        s += (q(p, k, ch) - best) * wv.data[static_cast<size_t>(ch)];
      }
      out(p, k) = std::tanh(s);
    }
  }
  auto saved = std::make_shared<Tensor>(out);
  return t.make("deform_offset_head", std::move(out),
                [bundle, w, b, arg, saved, m, dp1, c](Tape& t, const Tensor& g) {
    const Tensor& q = t.val(bundle);
    const Tensor& wv = t.val(w);
    Tensor gq(q.shape);
    Tensor gw({c});
    double gb = 0;
    for (int p = 0; p < m; ++p) {
      for (int k = 0; k < dp1; ++k) {
        double y = (*saved)(p, k);
        double gpre = g(p, k) * (1.0 - y * y);
        if (gpre == 0.0) continue;
        gb += gpre;
        for (int ch = 0; ch < c; ++ch) {
          int j = (*arg)[(static_cast<size_t>(p) * dp1 + k) * c + ch];
          double diff = q(p, k, ch) - q(p, j, ch);
          gw.data[static_cast<size_t>(ch)] += gpre * diff;
          double gd = gpre * wv.data[static_cast<size_t>(ch)];
          gq(p, k, ch) += gd;
          gq(p, j, ch) -= gd;
        }
      }
    }
    t.accumulate(bundle, gq);
    t.accumulate(w, gw);
    t.accumulate_with(b, [&](Tensor& gbias) { gbias.data[0] += gb; });
  });
}

// Mean over points of the squared per-point offset sum; zero exactly when
// every point's offsets sum to zero.
inline Var offset_regularizer(Tape& t, Var offsets) {
  const Tensor& ov = t.val(offsets);
  if (ov.rank() != 2) throw invalid_input("offset_regularizer: offsets must be 2D");
  int m = ov.rows(), k = ov.cols();
  auto row_sums = std::make_shared<std::vector<double>>(static_cast<size_t>(m));
  double loss = 0;
  for (int p = 0; p < m; ++p) {
    double s = 0;
    for (int j = 0; j < k; ++j) s += ov(p, j);
    (*row_sums)[static_cast<size_t>(p)] = s;
    loss += s * s;
  }
  loss /= std::max(1, m);
  return t.make("offset_regularizer", Tensor::scalar(loss),
                [offsets, row_sums, m, k](Tape& t, const Tensor& g) {
    t.accumulate_with(offsets, [&](Tensor& go) {
      double f = 2.0 * g.data[0] / std::max(1, m);
      for (int p = 0; p < m; ++p)
        for (int j = 0; j < k; ++j) go(p, j) += f * (*row_sums)[static_cast<size_t>(p)];
    });
  });
}

// --------------------------------------------------------------------------
// Temporal fusion: zero-pad the previous step's features to the grown vertex
// count, concatenate with the current features and mix through a linear
// layer + ReLU. `x_prev` may have zero rows (first timestep).

inline Var temporal_fuse(Tape& t, Var x_prev, Var x_curr, Var w, Var b) {
  const Tensor& cur = t.val(x_curr);
  const Tensor& prev = t.val(x_prev);
  if (prev.rank() != 2 || cur.rank() != 2 || prev.cols() != cur.cols())
    throw invalid_input("temporal_fuse: width mismatch");
  if (prev.rows() > cur.rows())
    throw invalid_input("temporal_fuse: history has more rows than current step");
  Var padded = pad_rows(t, x_prev, cur.rows());
  Var cat = concat_cols(t, padded, x_curr);
  return relu(t, linear(t, cat, w, b));
}

}  // namespace latseg
