#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "latseg/util.hpp"

namespace latseg {

// Evaluation metrics. Ground-truth label -1 means "ignore".

struct IouReport {
  std::vector<double> per_class;  // -1 for classes absent from gt and pred
  double mean = 0.0;
};

inline IouReport miou(const std::vector<int>& pred, const std::vector<int>& gt, int num_classes) {
  if (pred.size() != gt.size()) throw invalid_input("miou: size mismatch");
  std::vector<int64_t> tp(static_cast<size_t>(num_classes), 0);
  std::vector<int64_t> fp(static_cast<size_t>(num_classes), 0);
  std::vector<int64_t> fn(static_cast<size_t>(num_classes), 0);
  for (size_t i = 0; i < gt.size(); ++i) {
    int g = gt[i];
    if (g < 0) continue;
    int p = pred[i];
    if (p == g)
      tp[static_cast<size_t>(g)]++;
    else {
      fn[static_cast<size_t>(g)]++;
      if (p >= 0 && p < num_classes) fp[static_cast<size_t>(p)]++;
    }
  }
  IouReport rep;
  rep.per_class.assign(static_cast<size_t>(num_classes), -1.0);
  double total = 0;
  int counted = 0;
  for (int c = 0; c < num_classes; ++c) {
    int64_t denom = tp[static_cast<size_t>(c)] + fp[static_cast<size_t>(c)] + fn[static_cast<size_t>(c)];
    if (denom == 0) continue;  // absent from both gt and prediction
    rep.per_class[static_cast<size_t>(c)] = double(tp[static_cast<size_t>(c)]) / double(denom);
    total += rep.per_class[static_cast<size_t>(c)];
    ++counted;
  }
  rep.mean = counted > 0 ? total / counted : 0.0;
  return rep;
}

inline double accuracy(const std::vector<int>& pred, const std::vector<int>& gt) {
  if (pred.size() != gt.size()) throw invalid_input("accuracy: size mismatch");
  int64_t correct = 0, counted = 0;
  for (size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] < 0) continue;
    ++counted;
    if (pred[i] == gt[i]) ++correct;
  }
  return counted > 0 ? double(correct) / double(counted) : 0.0;
}

// Per-class accuracy (recall) of a single class.
inline double class_accuracy(const std::vector<int>& pred, const std::vector<int>& gt, int cls) {
  int64_t correct = 0, counted = 0;
  for (size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] != cls) continue;
    ++counted;
    if (pred[i] == cls) ++correct;
  }
  return counted > 0 ? double(correct) / double(counted) : 0.0;
}

// Symmetric Best Dice between two instance partitions. Points unlabeled
// (-1) on either side are excluded from both partitions.
inline double sbd(const std::vector<int>& pred, const std::vector<int>& gt) {
  if (pred.size() != gt.size()) throw invalid_input("sbd: size mismatch");
  std::map<int, std::vector<int>> a_sets, b_sets;
  for (size_t i = 0; i < gt.size(); ++i) {
    if (pred[i] < 0 || gt[i] < 0) continue;
    a_sets[pred[i]].push_back(static_cast<int>(i));
    b_sets[gt[i]].push_back(static_cast<int>(i));
  }
  if (a_sets.empty() || b_sets.empty()) throw invalid_input("sbd: empty partition");

  auto directed = [](const std::map<int, std::vector<int>>& from,
                     const std::map<int, std::vector<int>>& to) {
    double total = 0;
    for (const auto& [ida, pa] : from) {
      double best = 0;
      for (const auto& [idb, pb] : to) {
        // |a ∩ b| via sorted merge (indices are ascending by construction).
        size_t i = 0, j = 0;
        int64_t inter = 0;
        while (i < pa.size() && j < pb.size()) {
          if (pa[i] < pb[j])
            ++i;
          else if (pa[i] > pb[j])
            ++j;
          else {
            ++inter;
            ++i;
            ++j;
          }
        }
        double dice = 2.0 * double(inter) / double(pa.size() + pb.size());
        best = std::max(best, dice);
      }
      total += best;
    }
    return total / double(from.size());
  };
  return std::min(directed(a_sets, b_sets), directed(b_sets, a_sets));
}

}  // namespace latseg
