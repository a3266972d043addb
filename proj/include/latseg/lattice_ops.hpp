#pragma once

#include <optional>
#include <vector>

#include "latseg/lattice.hpp"
#include "latseg/tensor.hpp"
#include "latseg/util.hpp"

namespace latseg {

// The lattice operators as pure forward functions plus vector-Jacobian
// products. Missing neighbors always contribute zero, never an error.

// ---------------------------------------------------------------------------
// Convolution kernels and neighbor indexing.
//
// Filter index order is axis-major with the center first:
//   0                  -> the vertex itself
//   1 + 2*axis + 0     -> neighbor at +[-1,...,d,...,-1] (d at `axis`)
//   1 + 2*axis + 1     -> neighbor at -[-1,...,d,...,-1]
// This order is part of the checkpoint format.

inline int kernel_taps(int d) { return 2 * (d + 1) + 1; }

inline int filter_index(int axis, int sign) { return 1 + 2 * axis + (sign > 0 ? 0 : 1); }

struct ConvKernel {
  Tensor weights;              // taps x c_in x c_out
  std::optional<Tensor> bias;  // c_out

  int taps() const { return weights.dim(0); }
  int c_in() const { return weights.dim(1); }
  int c_out() const { return weights.dim(2); }
};

// Rows of source-lattice indices feeding each target vertex; -1 = absent.
struct Adjacency {
  int targets = 0;
  int taps = 0;
  std::vector<int32_t> idx;  // targets x taps

  int at(int t, int k) const { return idx[static_cast<size_t>(t) * taps + k]; }
};

// 1-hop ring adjacency of a lattice with itself. `n_rows` restricts both
// targets and visible sources to a row-count snapshot (-1 = all).
inline Adjacency same_level_adjacency(const SparseLattice& lat, int n_rows = -1) {
  int d = lat.dim();
  int n = n_rows < 0 ? lat.size() : n_rows;
  Adjacency adj;
  adj.targets = n;
  adj.taps = kernel_taps(d);
  adj.idx.assign(static_cast<size_t>(n) * adj.taps, -1);
  for (int v = 0; v < n; ++v) {
    adj.idx[static_cast<size_t>(v) * adj.taps] = v;
    for (int axis = 0; axis <= d; ++axis) {
      for (int sign : {+1, -1}) {
        auto nk = neighbor_key(lat.key(v), axis, sign);
        adj.idx[static_cast<size_t>(v) * adj.taps + filter_index(axis, sign)] =
            static_cast<int32_t>(lat.find(nk, n));
      }
    }
  }
  return adj;
}

// Adjacency for the strided convolution: each coarse vertex c reads the fine
// lattice at 2*c and its 1-hop ring.
inline Adjacency coarsen_adjacency(const SparseLattice& fine, const SparseLattice& coarse,
                                   int n_fine = -1, int n_coarse = -1) {
  int d = fine.dim();
  int nc = n_coarse < 0 ? coarse.size() : n_coarse;
  Adjacency adj;
  adj.targets = nc;
  adj.taps = kernel_taps(d);
  adj.idx.assign(static_cast<size_t>(nc) * adj.taps, -1);
  LatticeKey center(static_cast<size_t>(d) + 1);
  for (int v = 0; v < nc; ++v) {
    const auto& ck = coarse.key(v);
    for (int i = 0; i <= d; ++i) center[static_cast<size_t>(i)] = 2 * ck[static_cast<size_t>(i)];
    adj.idx[static_cast<size_t>(v) * adj.taps] = static_cast<int32_t>(fine.find(center, n_fine));
    for (int axis = 0; axis <= d; ++axis)
      for (int sign : {+1, -1})
        adj.idx[static_cast<size_t>(v) * adj.taps + filter_index(axis, sign)] =
            static_cast<int32_t>(fine.find(neighbor_key(center, axis, sign), n_fine));
  }
  return adj;
}

// Adjacency for the transposed convolution: each fine vertex v reads the
// coarse lattice at v/2 and at (v +- offset)/2, skipping fractional
// candidates (odd coordinate sums after the shift).
inline Adjacency upsample_adjacency(const SparseLattice& coarse, const SparseLattice& fine,
                                    int n_coarse = -1, int n_fine = -1) {
  int d = fine.dim();
  int nf = n_fine < 0 ? fine.size() : n_fine;
  Adjacency adj;
  adj.targets = nf;
  adj.taps = kernel_taps(d);
  adj.idx.assign(static_cast<size_t>(nf) * adj.taps, -1);
  LatticeKey half(static_cast<size_t>(d) + 1);
  auto try_half = [&](const LatticeKey& k) -> int {
    for (size_t i = 0; i < k.size(); ++i) {
      if (k[i] % 2 != 0) return -1;
      half[i] = k[i] / 2;
    }
    return coarse.find(half, n_coarse);
  };
  for (int v = 0; v < nf; ++v) {
    const auto& fk = fine.key(v);
    adj.idx[static_cast<size_t>(v) * adj.taps] = static_cast<int32_t>(try_half(fk));
    for (int axis = 0; axis <= d; ++axis)
      for (int sign : {+1, -1})
        adj.idx[static_cast<size_t>(v) * adj.taps + filter_index(axis, sign)] =
            static_cast<int32_t>(try_half(neighbor_key(fk, axis, sign)));
  }
  return adj;
}

// ---------------------------------------------------------------------------
// Shared neighborhood convolution. convolve / coarsen / upsample are this
// primitive with different adjacencies.

inline Tensor neighborhood_conv(const Tensor& x_src, const Adjacency& adj, const ConvKernel& kernel) {
  if (x_src.rank() != 2 || x_src.cols() != kernel.c_in())
    throw invalid_input("neighborhood_conv: value/kernel channel mismatch");
  if (kernel.weights.rank() != 3 || kernel.taps() != adj.taps)
    throw invalid_input("neighborhood_conv: kernel tap count mismatch");
  if (kernel.bias && kernel.bias->numel() != kernel.c_out())
    throw invalid_input("neighborhood_conv: bias length mismatch");
  int cin = kernel.c_in(), cout = kernel.c_out();
  Tensor out({adj.targets, cout});
  parallel_for(adj.targets, [&](int64_t b, int64_t e, int) {
    for (int64_t t = b; t < e; ++t) {
      double* o = &out.data[static_cast<size_t>(t) * cout];
      if (kernel.bias)
        for (int j = 0; j < cout; ++j) o[j] = kernel.bias->data[static_cast<size_t>(j)];
      for (int k = 0; k < adj.taps; ++k) {
        int src = adj.at(static_cast<int>(t), k);
        if (src < 0) continue;
        const double* xv = &x_src.data[static_cast<size_t>(src) * cin];
        const double* wk = &kernel.weights.data[static_cast<size_t>(k) * cin * cout];
        for (int ci = 0; ci < cin; ++ci) {
          double xi = xv[ci];
          if (xi == 0.0) continue;
          const double* wrow = wk + static_cast<size_t>(ci) * cout;
          for (int j = 0; j < cout; ++j) o[j] += xi * wrow[j];
        }
      }
    }
  });
  return out;
}

inline Tensor neighborhood_conv_vjp_values(const Tensor& gout, const Adjacency& adj,
                                           const ConvKernel& kernel, int n_src) {
  int cin = kernel.c_in(), cout = kernel.c_out();
  Tensor gx({n_src, cin});
  for (int t = 0; t < adj.targets; ++t) {
    const double* g = &gout.data[static_cast<size_t>(t) * cout];
    for (int k = 0; k < adj.taps; ++k) {
      int src = adj.at(t, k);
      if (src < 0) continue;
      double* gxr = &gx.data[static_cast<size_t>(src) * cin];
      const double* wk = &kernel.weights.data[static_cast<size_t>(k) * cin * cout];
      for (int ci = 0; ci < cin; ++ci) {
        const double* wrow = wk + static_cast<size_t>(ci) * cout;
        double s = 0;
        for (int j = 0; j < cout; ++j) s += wrow[j] * g[j];
        gxr[ci] += s;
      }
    }
  }
  return gx;
}

inline Tensor neighborhood_conv_vjp_weights(const Tensor& gout, const Tensor& x_src,
                                            const Adjacency& adj, int taps) {
  int cin = x_src.cols(), cout = gout.cols();
  Tensor gw({taps, cin, cout});
  for (int t = 0; t < adj.targets; ++t) {
    const double* g = &gout.data[static_cast<size_t>(t) * cout];
    for (int k = 0; k < taps; ++k) {
      int src = adj.at(t, k);
      if (src < 0) continue;
      const double* xv = &x_src.data[static_cast<size_t>(src) * cin];
      double* gwk = &gw.data[static_cast<size_t>(k) * cin * cout];
      for (int ci = 0; ci < cin; ++ci) {
        double xi = xv[ci];
        if (xi == 0.0) continue;
        double* grow = gwk + static_cast<size_t>(ci) * cout;
        for (int j = 0; j < cout; ++j) grow[j] += xi * g[j];
      }
    }
  }
  return gw;
}

inline Tensor neighborhood_conv_vjp_bias(const Tensor& gout) {
  Tensor gb({gout.cols()});
  for (int t = 0; t < gout.rows(); ++t)
    for (int j = 0; j < gout.cols(); ++j) gb(j) += gout(t, j);
  return gb;
}

// ---------------------------------------------------------------------------
// Splat / slice / gather / deform-slice (footprint-indexed).

// x_v = sum_{p in J_v} b_pv f_p
inline Tensor splat(const Tensor& features, const SimplexFootprint& fp, int n_vertices) {
  if (features.rank() != 2 || features.rows() != fp.points)
    throw invalid_input("splat: feature rows != footprint points");
  int c = features.cols(), dp1 = fp.dim + 1;
  Tensor out({n_vertices, c});
  int chunks = parallel_chunks(fp.points);
  if (chunks == 1) {
    for (int p = 0; p < fp.points; ++p) {
      const double* f = &features.data[static_cast<size_t>(p) * c];
      for (int k = 0; k < dp1; ++k) {
        double w = fp.w(p, k);
        double* o = &out.data[static_cast<size_t>(fp.row(p, k)) * c];
        for (int j = 0; j < c; ++j) o[j] += w * f[j];
      }
    }
    return out;
  }
  // Deterministic scatter-add: per-chunk buffers merged in chunk order.
  std::vector<Tensor> partial(static_cast<size_t>(chunks), Tensor({n_vertices, c}));
  parallel_for(fp.points, [&](int64_t b, int64_t e, int chunk) {
    Tensor& acc = partial[static_cast<size_t>(chunk)];
    for (int64_t p = b; p < e; ++p) {
      const double* f = &features.data[static_cast<size_t>(p) * c];
      for (int k = 0; k < dp1; ++k) {
        double w = fp.w(static_cast<int>(p), k);
        double* o = &acc.data[static_cast<size_t>(fp.row(static_cast<int>(p), k)) * c];
        for (int j = 0; j < c; ++j) o[j] += w * f[j];
      }
    }
  });
  for (const auto& acc : partial) out += acc;
  return out;
}

inline Tensor splat_vjp(const Tensor& gout, const SimplexFootprint& fp) {
  int c = gout.cols(), dp1 = fp.dim + 1;
  Tensor gf({fp.points, c});
  parallel_for(fp.points, [&](int64_t b, int64_t e, int) {
    for (int64_t p = b; p < e; ++p) {
      double* g = &gf.data[static_cast<size_t>(p) * c];
      for (int k = 0; k < dp1; ++k) {
        double w = fp.w(static_cast<int>(p), k);
        const double* go = &gout.data[static_cast<size_t>(fp.row(static_cast<int>(p), k)) * c];
        for (int j = 0; j < c; ++j) g[j] += w * go[j];
      }
    }
  });
  return gf;
}

// f_p = sum_{v in I_p} b_pv x_v  (the adjoint of splat)
inline Tensor slice(const Tensor& x, const SimplexFootprint& fp) {
  fp.check_values(x, "slice");
  int c = x.cols(), dp1 = fp.dim + 1;
  Tensor out({fp.points, c});
  parallel_for(fp.points, [&](int64_t b, int64_t e, int) {
    for (int64_t p = b; p < e; ++p) {
      double* o = &out.data[static_cast<size_t>(p) * c];
      for (int k = 0; k < dp1; ++k) {
        double w = fp.w(static_cast<int>(p), k);
        const double* xv = &x.data[static_cast<size_t>(fp.row(static_cast<int>(p), k)) * c];
        for (int j = 0; j < c; ++j) o[j] += w * xv[j];
      }
    }
  });
  return out;
}

inline Tensor slice_vjp(const Tensor& gout, const SimplexFootprint& fp, int n_vertices) {
  // Gradient of slice w.r.t. vertex values is a splat of the output gradient.
  return splat(gout, fp, n_vertices);
}

// q_p rows: b_pv * x_v in footprint vertex order. Output m x (d+1) x c.
inline Tensor gather(const Tensor& x, const SimplexFootprint& fp) {
  fp.check_values(x, "gather");
  int c = x.cols(), dp1 = fp.dim + 1;
  Tensor out({fp.points, dp1, c});
  parallel_for(fp.points, [&](int64_t b, int64_t e, int) {
    for (int64_t p = b; p < e; ++p) {
      for (int k = 0; k < dp1; ++k) {
        double w = fp.w(static_cast<int>(p), k);
        const double* xv = &x.data[static_cast<size_t>(fp.row(static_cast<int>(p), k)) * c];
        double* o = &out.data[(static_cast<size_t>(p) * dp1 + k) * c];
        for (int j = 0; j < c; ++j) o[j] = w * xv[j];
      }
    }
  });
  return out;
}

inline Tensor gather_vjp(const Tensor& gout, const SimplexFootprint& fp, int n_vertices) {
  int dp1 = fp.dim + 1, c = gout.dim(2);
  Tensor gx({n_vertices, c});
  for (int p = 0; p < fp.points; ++p) {
    for (int k = 0; k < dp1; ++k) {
      double w = fp.w(p, k);
      double* g = &gx.data[static_cast<size_t>(fp.row(p, k)) * c];
      const double* go = &gout.data[(static_cast<size_t>(p) * dp1 + k) * c];
      for (int j = 0; j < c; ++j) g[j] += w * go[j];
    }
  }
  return gx;
}

// f_p = sum_v (b_pv + db_pv) x_v; reduces to slice at db = 0.
inline Tensor deform_slice(const Tensor& x, const SimplexFootprint& fp, const Tensor& offsets) {
  fp.check_values(x, "deform_slice");
  int dp1 = fp.dim + 1;
  if (offsets.rank() != 2 || offsets.rows() != fp.points || offsets.cols() != dp1)
    throw invalid_input("deform_slice: offsets must be m x (d+1)");
  int c = x.cols();
  Tensor out({fp.points, c});
  parallel_for(fp.points, [&](int64_t b, int64_t e, int) {
    for (int64_t p = b; p < e; ++p) {
      double* o = &out.data[static_cast<size_t>(p) * c];
      for (int k = 0; k < dp1; ++k) {
        double w = fp.w(static_cast<int>(p), k) + offsets(static_cast<int>(p), k);
        const double* xv = &x.data[static_cast<size_t>(fp.row(static_cast<int>(p), k)) * c];
        for (int j = 0; j < c; ++j) o[j] += w * xv[j];
      }
    }
  });
  return out;
}

inline Tensor deform_slice_vjp_values(const Tensor& gout, const SimplexFootprint& fp,
                                      const Tensor& offsets, int n_vertices) {
  int c = gout.cols(), dp1 = fp.dim + 1;
  Tensor gx({n_vertices, c});
  for (int p = 0; p < fp.points; ++p) {
    const double* g = &gout.data[static_cast<size_t>(p) * c];
    for (int k = 0; k < dp1; ++k) {
      double w = fp.w(p, k) + offsets(p, k);
      double* gxr = &gx.data[static_cast<size_t>(fp.row(p, k)) * c];
      for (int j = 0; j < c; ++j) gxr[j] += w * g[j];
    }
  }
  return gx;
}

inline Tensor deform_slice_vjp_offsets(const Tensor& gout, const SimplexFootprint& fp,
                                       const Tensor& x) {
  int c = gout.cols(), dp1 = fp.dim + 1;
  Tensor gb({fp.points, dp1});
  parallel_for(fp.points, [&](int64_t b, int64_t e, int) {
    for (int64_t p = b; p < e; ++p) {
      const double* g = &gout.data[static_cast<size_t>(p) * c];
      for (int k = 0; k < dp1; ++k) {
        const double* xv = &x.data[static_cast<size_t>(fp.row(static_cast<int>(p), k)) * c];
        double s = 0;
        for (int j = 0; j < c; ++j) s += xv[j] * g[j];
        gb(static_cast<int>(p), k) = s;
      }
    }
  });
  return gb;
}

// ---------------------------------------------------------------------------
// Distribute: per-vertex lists of mean-centered coordinates and raw features.

struct DistributedBundle {
  int n_vertices = 0;
  int d = 0;
  int f_d = 0;
  // Contributor rows, vertex-major: for each vertex its |J_v| rows of
  // [g_p - mu_v ; f_p], concatenated. seg_begin[v]..seg_begin[v+1] indexes
  // rows; point_of[r] is the contributing point of row r.
  Tensor rows;  // R x (d + f_d)
  std::vector<int32_t> seg_begin;
  std::vector<int32_t> point_of;
  Tensor mu;  // n x d

  int total_rows() const { return rows.rows(); }
  int contributors(int v) const { return seg_begin[static_cast<size_t>(v) + 1] - seg_begin[static_cast<size_t>(v)]; }
};

inline DistributedBundle distribute(const ScaledCloud& cloud, const SimplexFootprint& fp,
                                    int n_vertices) {
  if (cloud.size() != fp.points) throw invalid_input("distribute: cloud/footprint mismatch");
  int d = fp.dim, f_d = cloud.feature_dim(), dp1 = d + 1;
  DistributedBundle bundle;
  bundle.n_vertices = n_vertices;
  bundle.d = d;
  bundle.f_d = f_d;

  std::vector<int32_t> counts(static_cast<size_t>(n_vertices), 0);
  for (int p = 0; p < fp.points; ++p)
    for (int k = 0; k < dp1; ++k) counts[static_cast<size_t>(fp.row(p, k))]++;

  bundle.seg_begin.assign(static_cast<size_t>(n_vertices) + 1, 0);
  for (int v = 0; v < n_vertices; ++v)
    bundle.seg_begin[static_cast<size_t>(v) + 1] =
        bundle.seg_begin[static_cast<size_t>(v)] + counts[static_cast<size_t>(v)];
  int total = bundle.seg_begin[static_cast<size_t>(n_vertices)];

  bundle.rows = Tensor({total, d + f_d});
  bundle.point_of.assign(static_cast<size_t>(total), 0);
  bundle.mu = Tensor({n_vertices, d});

  std::vector<int32_t> cursor(bundle.seg_begin.begin(), bundle.seg_begin.end() - 1);
  for (int p = 0; p < fp.points; ++p) {
    for (int k = 0; k < dp1; ++k) {
      int v = fp.row(p, k);
      int r = cursor[static_cast<size_t>(v)]++;
      bundle.point_of[static_cast<size_t>(r)] = p;
      for (int j = 0; j < d; ++j) bundle.rows(r, j) = cloud.positions(p, j);
      for (int j = 0; j < f_d; ++j) bundle.rows(r, d + j) = cloud.features(p, j);
    }
  }
  for (int v = 0; v < n_vertices; ++v) {
    int b = bundle.seg_begin[static_cast<size_t>(v)], e = bundle.seg_begin[static_cast<size_t>(v) + 1];
    if (b == e) continue;
    for (int j = 0; j < d; ++j) {
      double s = 0;
      for (int r = b; r < e; ++r) s += bundle.rows(r, j);
      double mean = s / (e - b);
      bundle.mu(v, j) = mean;
      for (int r = b; r < e; ++r) bundle.rows(r, j) -= mean;
    }
  }
  return bundle;
}

// Gradient of the bundle rows w.r.t. the raw point features.
inline Tensor distribute_vjp_features(const Tensor& g_rows, const DistributedBundle& bundle,
                                      int m) {
  Tensor gf({m, bundle.f_d});
  for (int r = 0; r < bundle.total_rows(); ++r) {
    int p = bundle.point_of[static_cast<size_t>(r)];
    for (int j = 0; j < bundle.f_d; ++j) gf(p, j) += g_rows(r, bundle.d + j);
  }
  return gf;
}

// Gradient of the bundle rows w.r.t. the scaled positions (through the
// mean-centering).
inline Tensor distribute_vjp_positions(const Tensor& g_rows, const DistributedBundle& bundle,
                                       int m) {
  Tensor gg({m, bundle.d});
  for (int v = 0; v < bundle.n_vertices; ++v) {
    int b = bundle.seg_begin[static_cast<size_t>(v)], e = bundle.seg_begin[static_cast<size_t>(v) + 1];
    if (b == e) continue;
    double inv = 1.0 / (e - b);
    for (int j = 0; j < bundle.d; ++j) {
      double seg_sum = 0;
      for (int r = b; r < e; ++r) seg_sum += g_rows(r, j);
      for (int r = b; r < e; ++r) {
        int p = bundle.point_of[static_cast<size_t>(r)];
        gg(p, j) += g_rows(r, j) - seg_sum * inv;
      }
    }
  }
  return gg;
}

}  // namespace latseg
