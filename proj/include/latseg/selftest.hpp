#pragma once

#include <random>
#include <set>
#include <string>
#include <vector>

#include "latseg/lattice_ops.hpp"
#include "latseg/losses.hpp"
#include "latseg/nn.hpp"
#include "latseg/runner.hpp"

namespace latseg {

// Built-in verification suites behind `selftest`: lattice geometry,
// splat/slice adjointness and gradient checks of the differentiable ops.

struct SuiteResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

namespace selftest_detail {

inline Tensor rand_t(std::vector<int> shape, uint64_t seed) {
  std::mt19937_64 rng(seed);
  return random_normal(std::move(shape), rng);
}

inline SuiteResult geometry_suite(int d, int points) {
  SuiteResult res{"geometry", true, ""};
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> dist(-4.0, 4.0);
  std::vector<double> pos(static_cast<size_t>(d));
  for (int t = 0; t < points && res.pass; ++t) {
    for (auto& v : pos) v = dist(rng);
    auto elevated = elevate(pos);
    double sum = 0;
    for (double v : elevated) sum += v;
    if (std::fabs(sum) > 1e-9) {
      res.pass = false;
      res.detail = "elevation off the zero-sum hyperplane";
      break;
    }
    auto simplex = enclosing_simplex(elevated);
    double wsum = 0;
    for (int k = 0; k <= d; ++k) {
      double w = simplex.weights[static_cast<size_t>(k)];
      if (w < -1e-12 || w > 1 + 1e-12) {
        res.pass = false;
        res.detail = "barycentric weight out of [0,1]";
      }
      wsum += w;
      if (!key_is_valid(simplex.keys[static_cast<size_t>(k)])) {
        res.pass = false;
        res.detail = "invalid simplex key";
      }
    }
    if (std::fabs(wsum - 1) > 1e-9) {
      res.pass = false;
      res.detail = "weights do not sum to 1";
    }
    for (int i = 0; i <= d && res.pass; ++i) {
      double r = 0;
      for (int k = 0; k <= d; ++k)
        r += simplex.weights[static_cast<size_t>(k)] * simplex.keys[static_cast<size_t>(k)][static_cast<size_t>(i)];
      if (std::fabs(r - elevated[static_cast<size_t>(i)]) > 1e-9) {
        res.pass = false;
        res.detail = "barycentric reconstruction error";
      }
    }
    // Neighbor structure of the first vertex.
    if (res.pass && t % 100 == 0) {
      std::set<LatticeKey> seen;
      for (int axis = 0; axis <= d; ++axis)
        for (int sign : {+1, -1}) {
          auto nk = neighbor_key(simplex.keys[0], axis, sign);
          int sum_k = 0;
          for (int32_t v : nk) sum_k += v;
          if (sum_k != 0 || neighbor_key(nk, axis, -sign) != simplex.keys[0]) {
            res.pass = false;
            res.detail = "neighbor offsets broken";
          }
          seen.insert(nk);
        }
      if (static_cast<int>(seen.size()) != 2 * (d + 1)) {
        res.pass = false;
        res.detail = "neighbor count != 2(d+1)";
      }
    }
  }
  return res;
}

inline SuiteResult adjointness_suite(int d) {
  SuiteResult res{"adjointness", true, ""};
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 50; ++trial) {
    int m = 10 + static_cast<int>(rng() % 30);
    Tensor pos({m, d});
    for (auto& v : pos.data) v = std::uniform_real_distribution<double>(-2, 2)(rng);
    SparseLattice lat(d);
    auto fp = build_footprint(lat, pos);
    Tensor f = rand_t({m, 3}, 1000 + trial);
    Tensor x = rand_t({lat.size(), 3}, 2000 + trial);
    double lhs = dot(splat(f, fp, lat.size()), x);
    double rhs = dot(f, slice(x, fp));
    double rel = std::fabs(lhs - rhs) / std::max({1.0, std::fabs(lhs), std::fabs(rhs)});
    if (rel > 1e-12) {
      res.pass = false;
      res.detail = "splat/slice adjoint identity violated";
      break;
    }
  }
  return res;
}

inline SuiteResult gradcheck_suite(int d) {
  SuiteResult res{"gradcheck", true, ""};
  std::mt19937_64 rng(29);
  Tensor pos({12, d});
  for (auto& v : pos.data) v = std::uniform_real_distribution<double>(-1.5, 1.5)(rng);
  SparseLattice lat(d);
  auto fp = std::make_shared<const SimplexFootprint>(build_footprint(lat, pos));
  auto ring = std::make_shared<const Adjacency>(same_level_adjacency(lat));
  int n = lat.size();

  auto check = [&](const char* what, auto build, std::vector<Tensor> inputs) {
    if (!res.pass) return;
    auto rep = grad_check(build, std::move(inputs));
    if (!rep.pass) {
      res.pass = false;
      res.detail = std::string(what) + " gradient check failed";
    }
  };

  check("splat+slice",
        [&](Tape& t, const std::vector<Var>& in) {
          Var y = slice_op(t, splat_op(t, in[0], fp, n), fp);
          return sum(t, mul(t, y, y));
        },
        {rand_t({12, 2}, 3)});
  check("conv",
        [&](Tape& t, const std::vector<Var>& in) {
          Var y = conv_op(t, in[0], in[1], in[2], ring);
          return sum(t, mul(t, y, y));
        },
        {rand_t({n, 2}, 4), rand_t({kernel_taps(d), 2, 2}, 5), rand_t({2}, 6)});
  check("deform_slice",
        [&](Tape& t, const std::vector<Var>& in) {
          Var q = gather_op(t, in[0], fp);
          Var db = deform_offset_head(t, q, in[1], in[2]);
          Var y = deform_slice_op(t, in[0], db, fp);
          return sum(t, mul(t, y, y));
        },
        {rand_t({n, 2}, 7), rand_t({2}, 8), rand_t({1}, 9)});
  check("losses",
        [&](Tape& t, const std::vector<Var>& in) {
          auto labels = std::make_shared<const std::vector<int>>(std::vector<int>{0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2});
          return semantic_loss(t, in[0], labels);
        },
        {rand_t({12, 3}, 10)});
  return res;
}

}  // namespace selftest_detail

inline std::vector<SuiteResult> run_selftest(int d) {
  std::vector<SuiteResult> out;
  out.push_back(selftest_detail::geometry_suite(d, 2000));
  out.push_back(selftest_detail::adjointness_suite(d));
  out.push_back(selftest_detail::gradcheck_suite(d));
  return out;
}

}  // namespace latseg
