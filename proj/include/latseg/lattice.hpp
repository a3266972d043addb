#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "latseg/tensor.hpp"
#include "latseg/util.hpp"

namespace latseg {

// Geometry of the d-dimensional permutohedral lattice: the projection of the
// scaled grid (d+1)Z^{d+1} onto the hyperplane where coordinates sum to zero.
// Vertex coordinates are integer vectors of length d+1 that sum to zero and
// are congruent to a common remainder mod (d+1).

using LatticeKey = std::vector<int32_t>;

inline constexpr double kHyperplaneTol = 1e-9;
inline constexpr double kWeightSumTol = 1e-9;

inline bool key_is_valid(const LatticeKey& key) {
  int d = static_cast<int>(key.size()) - 1;
  if (d < 1) return false;
  int64_t sum = 0;
  for (int32_t v : key) sum += v;
  if (sum != 0) return false;
  auto rem = [d](int32_t v) {
    int r = v % (d + 1);
    return r < 0 ? r + d + 1 : r;
  };
  int r0 = rem(key[0]);
  for (int32_t v : key)
    if (rem(v) != r0) return false;
  return true;
}

// Per-component scales that make the elevated grid tessellate into uniform
// simplices: s_j = (d+1)/sqrt((j+1)(j+2)).
inline std::vector<double> elevation_scales(int d) {
  std::vector<double> s(static_cast<size_t>(d));
  for (int j = 0; j < d; ++j)
    s[static_cast<size_t>(j)] = (d + 1) / std::sqrt(double(j + 1) * double(j + 2));
  return s;
}

// Linear embedding of a scaled position onto the zero-sum hyperplane H_d.
inline std::vector<double> elevate(const std::vector<double>& position) {
  int d = static_cast<int>(position.size());
  if (d < 1) throw invalid_input("elevate: empty position");
  for (double v : position)
    if (!std::isfinite(v)) throw invalid_input("elevate: non-finite position");
  auto s = elevation_scales(d);
  std::vector<double> e(static_cast<size_t>(d) + 1);
  double running = 0.0;
  for (int i = d; i > 0; --i) {
    double cf = position[static_cast<size_t>(i - 1)] * s[static_cast<size_t>(i - 1)];
    e[static_cast<size_t>(i)] = running - i * cf;
    running += cf;
  }
  e[0] = running;
  return e;
}

// The matrix of the elevation map (d+1 rows, d cols); elevate(y) == E*y.
inline std::vector<double> elevation_matrix(int d) {
  std::vector<double> mat(static_cast<size_t>(d + 1) * d, 0.0);
  for (int j = 0; j < d; ++j) {
    std::vector<double> unit(static_cast<size_t>(d), 0.0);
    unit[static_cast<size_t>(j)] = 1.0;
    auto col = elevate(unit);
    for (int i = 0; i <= d; ++i) mat[static_cast<size_t>(i) * d + j] = col[static_cast<size_t>(i)];
  }
  return mat;
}

struct SimplexVertices {
  // keys[k] is vertex k of the enclosing simplex (remainder-k vertex),
  // weights[k] its barycentric coordinate. k = 0..d.
  std::vector<LatticeKey> keys;
  std::vector<double> weights;
};

// Enclosing-simplex rounding: round each coordinate to the nearest multiple
// of (d+1), fix up off-hyperplane rounding via residual ranks, and derive the
// barycentric weights from consecutive differences of the sorted residuals.
inline SimplexVertices enclosing_simplex(const std::vector<double>& elevated) {
  int d = static_cast<int>(elevated.size()) - 1;
  if (d < 1) throw invalid_input("enclosing_simplex: need at least 2 coordinates");
  double total = 0.0;
  for (double v : elevated) {
    if (!std::isfinite(v)) throw invalid_input("enclosing_simplex: non-finite input");
    total += v;
  }
  if (std::fabs(total) > kHyperplaneTol)
    throw invalid_input("enclosing_simplex: input not on the zero-sum hyperplane");

  const int dp1 = d + 1;
  std::vector<int64_t> rem0(static_cast<size_t>(dp1));
  std::vector<int> rank(static_cast<size_t>(dp1), 0);

  int64_t sum = 0;
  for (int i = 0; i <= d; ++i) {
    double v = elevated[static_cast<size_t>(i)] / dp1;
    double up = std::ceil(v) * dp1;
    double down = std::floor(v) * dp1;
    double x = elevated[static_cast<size_t>(i)];
    rem0[static_cast<size_t>(i)] = static_cast<int64_t>((up - x < x - down) ? up : down);
    sum += rem0[static_cast<size_t>(i)];
  }
  sum /= dp1;

  // Rank i = number of coordinates with a larger residual (descending order).
  for (int i = 0; i < d; ++i) {
    double ri = elevated[static_cast<size_t>(i)] - rem0[static_cast<size_t>(i)];
    for (int j = i + 1; j <= d; ++j) {
      double rj = elevated[static_cast<size_t>(j)] - rem0[static_cast<size_t>(j)];
      if (ri < rj)
        rank[static_cast<size_t>(i)]++;
      else
        rank[static_cast<size_t>(j)]++;
    }
  }

  // If the rounded point is off the hyperplane, shift the coordinates with
  // extreme residuals back onto it.
  for (int i = 0; i <= d; ++i) {
    rank[static_cast<size_t>(i)] += static_cast<int>(sum);
    if (rank[static_cast<size_t>(i)] < 0) {
      rank[static_cast<size_t>(i)] += dp1;
      rem0[static_cast<size_t>(i)] += dp1;
    } else if (rank[static_cast<size_t>(i)] > d) {
      rank[static_cast<size_t>(i)] -= dp1;
      rem0[static_cast<size_t>(i)] -= dp1;
    }
  }

  std::vector<double> bary(static_cast<size_t>(dp1) + 1, 0.0);
  for (int i = 0; i <= d; ++i) {
    double v = (elevated[static_cast<size_t>(i)] - rem0[static_cast<size_t>(i)]) / dp1;
    bary[static_cast<size_t>(d - rank[static_cast<size_t>(i)])] += v;
    bary[static_cast<size_t>(d - rank[static_cast<size_t>(i)] + 1)] -= v;
  }
  bary[0] += 1.0 + bary[static_cast<size_t>(dp1)];

  SimplexVertices out;
  out.keys.assign(static_cast<size_t>(dp1), LatticeKey(static_cast<size_t>(dp1)));
  out.weights.assign(static_cast<size_t>(dp1), 0.0);
  for (int k = 0; k <= d; ++k) {
    for (int i = 0; i <= d; ++i) {
      int off = (rank[static_cast<size_t>(i)] <= d - k) ? k : k - dp1;
      out.keys[static_cast<size_t>(k)][static_cast<size_t>(i)] =
          static_cast<int32_t>(rem0[static_cast<size_t>(i)] + off);
    }
    out.weights[static_cast<size_t>(k)] = bary[static_cast<size_t>(k)];
  }
  return out;
}

// The 2(d+1) immediate neighbors are offset by +-[-1,...,-1,d,-1,...,-1].
inline LatticeKey neighbor_key(const LatticeKey& key, int axis, int sign) {
  int d = static_cast<int>(key.size()) - 1;
  if (axis < 0 || axis > d) throw invalid_input("neighbor_key: axis out of range");
  if (sign != 1 && sign != -1) throw invalid_input("neighbor_key: sign must be +-1");
  LatticeKey out = key;
  for (int i = 0; i <= d; ++i)
    out[static_cast<size_t>(i)] += static_cast<int32_t>(sign * (i == axis ? d : -1));
  return out;
}

struct KeyHash {
  size_t operator()(const LatticeKey& k) const noexcept {
    // Hashes only the first d coordinates; the last is implied by zero-sum.
    uint64_t h = 1469598103934665603ull;
    for (size_t i = 0; i + 1 < k.size(); ++i) {
      uint64_t x = static_cast<uint64_t>(static_cast<uint32_t>(k[i])) * 2654435761u;
      h ^= x;
      h *= 1099511628211ull;
    }
    return static_cast<size_t>(h);
  }
};

struct KeyEq {
  bool operator()(const LatticeKey& a, const LatticeKey& b) const noexcept {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i + 1 < a.size(); ++i)
      if (a[i] != b[i]) return false;
    return true;
  }
};

// Hash-stored vertex set V=(C, X). Rows are assigned in first-insertion
// order; the table never shrinks, so row indices are stable as the lattice
// grows (needed for temporal fusion across a sequence).
class SparseLattice {
 public:
  explicit SparseLattice(int dim) : d_(dim) {
    if (dim < 1) throw invalid_input("SparseLattice: dim must be >= 1");
  }

  int dim() const { return d_; }
  int size() const { return static_cast<int>(keys_.size()); }

  // Returns the row for the key, inserting it if new.
  int insert(const LatticeKey& key) {
    auto it = table_.find(key);
    if (it != table_.end()) return it->second;
    int row = static_cast<int>(keys_.size());
    keys_.push_back(key);
    table_.emplace(keys_.back(), row);
    return row;
  }

  // Returns the row or -1 if absent. If max_row >= 0, rows at or beyond it
  // are treated as absent (snapshot view of a grown lattice).
  int find(const LatticeKey& key, int max_row = -1) const {
    auto it = table_.find(key);
    if (it == table_.end()) return -1;
    if (max_row >= 0 && it->second >= max_row) return -1;
    return it->second;
  }

  const LatticeKey& key(int row) const { return keys_[static_cast<size_t>(row)]; }
  const std::vector<LatticeKey>& keys() const { return keys_; }

  // Integer coordinate matrix C (n x (d+1)).
  Tensor coords() const {
    Tensor c({size(), d_ + 1});
    for (int i = 0; i < size(); ++i)
      for (int j = 0; j <= d_; ++j) c(i, j) = keys_[static_cast<size_t>(i)][static_cast<size_t>(j)];
    return c;
  }

 private:
  int d_;
  std::vector<LatticeKey> keys_;
  std::unordered_map<LatticeKey, int, KeyHash, KeyEq> table_;
};

// Per point: the d+1 (vertex row, barycentric weight) pairs of its enclosing
// simplex, in canonical (remainder) vertex order.
struct SimplexFootprint {
  int dim = 0;
  int points = 0;
  int max_vertex = -1;          // largest referenced lattice row
  std::vector<int32_t> vertex;  // points x (d+1)
  std::vector<double> weight;   // points x (d+1)

  int row(int p, int k) const { return vertex[static_cast<size_t>(p) * (dim + 1) + k]; }
  double w(int p, int k) const { return weight[static_cast<size_t>(p) * (dim + 1) + k]; }

  void check_values(const Tensor& x, const char* op) const {
    if (x.rank() != 2 || x.rows() <= max_vertex)
      throw invalid_input(std::string(op) + ": value matrix does not cover the footprint");
  }
};

// Point cloud scaled into lattice units (positions already divided by sigma).
struct ScaledCloud {
  Tensor positions;           // m x d
  std::vector<double> sigma;  // length d, strictly positive
  Tensor features;            // m x f_d (f_d may be 0)

  int size() const { return positions.rank() == 2 ? positions.rows() : 0; }
  int dim() const { return positions.rank() == 2 ? positions.cols() : 0; }
  int feature_dim() const { return features.rank() == 2 ? features.cols() : 0; }
};

inline ScaledCloud scale_cloud(const Tensor& positions, const std::vector<double>& sigma,
                               Tensor features = {}) {
  if (positions.rank() != 2) throw invalid_input("scale_cloud: positions must be m x d");
  int d = positions.cols();
  if (static_cast<int>(sigma.size()) != d) throw invalid_input("scale_cloud: sigma length != d");
  for (double s : sigma)
    if (!(s > 0.0)) throw invalid_input("scale_cloud: sigma entries must be positive");
  ScaledCloud cloud;
  cloud.positions = positions;
  for (int i = 0; i < positions.rows(); ++i)
    for (int j = 0; j < d; ++j) cloud.positions(i, j) /= sigma[static_cast<size_t>(j)];
  cloud.sigma = sigma;
  if (features.numel() > 0) {
    if (features.rank() != 2 || features.rows() != positions.rows())
      throw invalid_input("scale_cloud: feature rows != position rows");
    cloud.features = std::move(features);
  } else {
    cloud.features = Tensor({positions.rows(), 0});
  }
  return cloud;
}

// Allocates exactly the union of enclosing-simplex vertices over all points
// into `lattice` (which may already contain vertices from earlier clouds) and
// returns the per-point footprint. Positions may be divided by `scale_div`
// (used for coarser hierarchy levels).
inline SimplexFootprint build_footprint(SparseLattice& lattice, const Tensor& positions,
                                        double scale_div = 1.0) {
  int d = lattice.dim();
  if (positions.numel() > 0 && positions.cols() != d)
    throw invalid_input("build_footprint: position dim != lattice dim");
  SimplexFootprint fp;
  fp.dim = d;
  fp.points = positions.rank() == 2 ? positions.rows() : 0;
  fp.vertex.assign(static_cast<size_t>(fp.points) * (d + 1), 0);
  fp.weight.assign(static_cast<size_t>(fp.points) * (d + 1), 0.0);

  std::vector<double> pos(static_cast<size_t>(d));
  for (int p = 0; p < fp.points; ++p) {
    for (int j = 0; j < d; ++j) {
      double v = positions(p, j) / scale_div;
      if (!std::isfinite(v)) throw invalid_input("build_footprint: non-finite coordinates");
      pos[static_cast<size_t>(j)] = v;
    }
    auto simplex = enclosing_simplex(elevate(pos));
    for (int k = 0; k <= d; ++k) {
      int row = lattice.insert(simplex.keys[static_cast<size_t>(k)]);
      fp.vertex[static_cast<size_t>(p) * (d + 1) + k] = row;
      fp.weight[static_cast<size_t>(p) * (d + 1) + k] = simplex.weights[static_cast<size_t>(k)];
      fp.max_vertex = std::max(fp.max_vertex, row);
    }
  }
  return fp;
}

struct BuiltLattice {
  SparseLattice lattice;
  SimplexFootprint footprint;
};

inline BuiltLattice build_lattice(const ScaledCloud& cloud) {
  BuiltLattice out{SparseLattice(cloud.dim() > 0 ? cloud.dim() : 1), {}};
  if (cloud.size() == 0) {
    out.footprint.dim = out.lattice.dim();
    return out;
  }
  out.footprint = build_footprint(out.lattice, cloud.positions);
  return out;
}

// Picks a scalar sigma so that the built lattice averages roughly
// `target_points_per_vertex` points per vertex. Bisection on log sigma.
inline std::vector<double> auto_sigma(const Tensor& positions, double target_points_per_vertex = 30.0) {
  if (positions.rank() != 2 || positions.rows() == 0)
    throw invalid_input("auto_sigma: need a nonempty m x d position matrix");
  if (!(target_points_per_vertex > 0)) throw invalid_input("auto_sigma: target must be positive");
  int d = positions.cols();
  int m = positions.rows();
  auto vertex_count = [&](double sigma) {
    SparseLattice lat(d);
    std::vector<double> pos(static_cast<size_t>(d));
    for (int p = 0; p < m; ++p) {
      for (int j = 0; j < d; ++j) pos[static_cast<size_t>(j)] = positions(p, j) / sigma;
      auto simplex = enclosing_simplex(elevate(pos));
      for (auto& k : simplex.keys) lat.insert(k);
    }
    return lat.size();
  };
  double target_vertices = std::max(1.0, m / target_points_per_vertex);
  double lo = 1e-4, hi = 1e4;
  for (int it = 0; it < 40; ++it) {
    double mid = std::sqrt(lo * hi);
    if (vertex_count(mid) > target_vertices)
      lo = mid;  // too many vertices -> coarsen
    else
      hi = mid;
  }
  double sigma = std::sqrt(lo * hi);
  return std::vector<double>(static_cast<size_t>(d), sigma);
}

}  // namespace latseg
