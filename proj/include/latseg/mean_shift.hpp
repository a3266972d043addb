#pragma once

#include <cmath>
#include <vector>

#include "latseg/tensor.hpp"
#include "latseg/util.hpp"

namespace latseg {

// Mean-shift mode seeking with a flat (uniform-ball) kernel, used to recover
// instances from embedding space.

struct MeanShiftConfig {
  double bandwidth = 0.5;  // defaults to the variance margin delta_v
  int max_iters = 100;
  double convergence_eps = 1e-3;
  double merge_radius = 0.25;
};

inline void validate(const MeanShiftConfig& cfg) {
  if (!(cfg.bandwidth > 0)) throw invalid_input("mean_shift: bandwidth must be positive");
  if (!(cfg.convergence_eps > 0) || cfg.convergence_eps >= cfg.bandwidth)
    throw invalid_input("mean_shift: need 0 < eps < bandwidth");
  if (cfg.merge_radius > cfg.bandwidth)
    throw invalid_input("mean_shift: merge radius must be <= bandwidth");
}

struct MeanShiftResult {
  Tensor modes;                // k x E
  std::vector<int> assignment; // m, instance ids 0..k-1
};

inline MeanShiftResult mean_shift(const Tensor& embeddings, const MeanShiftConfig& cfg) {
  validate(cfg);
  if (embeddings.rank() != 2 || embeddings.rows() < 1)
    throw invalid_input("mean_shift: need m x E embeddings with m >= 1");
  if (!embeddings.all_finite()) throw invalid_input("mean_shift: non-finite embeddings");
  int m = embeddings.rows(), e = embeddings.cols();
  double h2 = cfg.bandwidth * cfg.bandwidth;

  Tensor traj = embeddings;  // every point is a seed
  parallel_for(m, [&](int64_t b, int64_t end, int) {
    std::vector<double> y(static_cast<size_t>(e)), next(static_cast<size_t>(e));
    for (int64_t pi = b; pi < end; ++pi) {
      int p = static_cast<int>(pi);
      for (int j = 0; j < e; ++j) y[static_cast<size_t>(j)] = traj(p, j);
      for (int it = 0; it < cfg.max_iters; ++it) {
        std::fill(next.begin(), next.end(), 0.0);
        int inside = 0;
        for (int q = 0; q < m; ++q) {
          double d2 = 0;
          for (int j = 0; j < e; ++j) {
            double dv = embeddings(q, j) - y[static_cast<size_t>(j)];
            d2 += dv * dv;
          }
          if (d2 <= h2) {
            ++inside;
            for (int j = 0; j < e; ++j) next[static_cast<size_t>(j)] += embeddings(q, j);
          }
        }
        // The seed itself is always inside, so inside >= 1.
        double shift2 = 0;
        for (int j = 0; j < e; ++j) {
          next[static_cast<size_t>(j)] /= inside;
          double dv = next[static_cast<size_t>(j)] - y[static_cast<size_t>(j)];
          shift2 += dv * dv;
        }
        y = next;
        if (shift2 < cfg.convergence_eps * cfg.convergence_eps) break;
      }
      for (int j = 0; j < e; ++j) traj(p, j) = y[static_cast<size_t>(j)];
    }
  });

  // Merge converged trajectories within the merge radius, in point order.
  MeanShiftResult res;
  res.assignment.assign(static_cast<size_t>(m), -1);
  std::vector<std::vector<double>> modes;
  double r2 = cfg.merge_radius * cfg.merge_radius;
  for (int p = 0; p < m; ++p) {
    int found = -1;
    for (size_t k = 0; k < modes.size(); ++k) {
      double d2 = 0;
      for (int j = 0; j < e; ++j) {
        double dv = modes[k][static_cast<size_t>(j)] - traj(p, j);
        d2 += dv * dv;
      }
      if (d2 <= r2) {
        found = static_cast<int>(k);
        break;
      }
    }
    if (found < 0) {
      found = static_cast<int>(modes.size());
      std::vector<double> mode(static_cast<size_t>(e));
      for (int j = 0; j < e; ++j) mode[static_cast<size_t>(j)] = traj(p, j);
      modes.push_back(std::move(mode));
    }
    res.assignment[static_cast<size_t>(p)] = found;
  }
  res.modes = Tensor({static_cast<int>(modes.size()), e});
  for (size_t k = 0; k < modes.size(); ++k)
    for (int j = 0; j < e; ++j) res.modes(static_cast<int>(k), j) = modes[k][static_cast<size_t>(j)];
  return res;
}

// Runs mean-shift per "thing" semantic class and assigns globally unique
// instance ids; points of other ("stuff") classes get id -1.
struct InstanceAssignConfig {
  MeanShiftConfig mean_shift;
  std::vector<int> thing_classes;
};

inline std::vector<int> assign_instances(const std::vector<int>& semantic_labels,
                                         const Tensor& embeddings,
                                         const InstanceAssignConfig& cfg) {
  if (static_cast<size_t>(embeddings.rows()) != semantic_labels.size())
    throw invalid_input("assign_instances: label/embedding mismatch");
  std::vector<int> out(semantic_labels.size(), -1);
  int next_id = 0;
  int e = embeddings.cols();
  for (int cls : cfg.thing_classes) {
    std::vector<int> idx;
    for (size_t i = 0; i < semantic_labels.size(); ++i)
      if (semantic_labels[i] == cls) idx.push_back(static_cast<int>(i));
    if (idx.empty()) continue;
    Tensor sub({static_cast<int>(idx.size()), e});
    for (size_t r = 0; r < idx.size(); ++r)
      for (int j = 0; j < e; ++j) sub(static_cast<int>(r), j) = embeddings(idx[r], j);
    auto res = mean_shift(sub, cfg.mean_shift);
    int k = res.modes.rows();
    for (size_t r = 0; r < idx.size(); ++r)
      out[static_cast<size_t>(idx[r])] = next_id + res.assignment[r];
    next_id += k;
  }
  return out;
}

}  // namespace latseg
