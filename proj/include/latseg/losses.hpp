#pragma once

#include <algorithm>
#include <cmath>
#include <iostream>
#include <memory>
#include <numeric>
#include <vector>

#include "latseg/tape.hpp"

namespace latseg {

// Training losses. Each is a fused tape op with a hand-written VJP; the
// formulas are also exposed as pure helpers where tests need exact values on
// hard predictions.

// --------------------------------------------------------------------------
// Cross-entropy over per-point class scores with ignore index -1.

inline Var cross_entropy(Tape& t, Var scores, std::shared_ptr<const std::vector<int>> labels) {
  const Tensor& s = t.val(scores);
  if (s.rank() != 2 || static_cast<size_t>(s.rows()) != labels->size())
    throw invalid_input("cross_entropy: scores/labels mismatch");
  int m = s.rows(), k = s.cols();
  auto probs = std::make_shared<Tensor>(Tensor({m, k}));
  double loss = 0;
  int counted = 0;
  for (int i = 0; i < m; ++i) {
    double mx = s(i, 0);
    for (int j = 1; j < k; ++j) mx = std::max(mx, s(i, j));
    double z = 0;
    for (int j = 0; j < k; ++j) z += std::exp(s(i, j) - mx);
    for (int j = 0; j < k; ++j) (*probs)(i, j) = std::exp(s(i, j) - mx) / z;
    int label = (*labels)[static_cast<size_t>(i)];
    if (label < 0) continue;
    if (label >= k) throw invalid_input("cross_entropy: label out of range");
    loss += -(s(i, label) - mx - std::log(z));
    ++counted;
  }
  if (counted == 0) {
    std::cerr << "warning: cross_entropy: all points ignored, loss defined as 0\n";
    return t.make("cross_entropy", Tensor::scalar(0.0), [](Tape&, const Tensor&) {});
  }
  loss /= counted;
  return t.make("cross_entropy", Tensor::scalar(loss),
                [scores, labels, probs, m, k, counted](Tape& t, const Tensor& g) {
    t.accumulate_with(scores, [&](Tensor& gs) {
      double f = g.data[0] / counted;
      for (int i = 0; i < m; ++i) {
        int label = (*labels)[static_cast<size_t>(i)];
        if (label < 0) continue;
        for (int j = 0; j < k; ++j)
          gs(i, j) += f * ((*probs)(i, j) - (j == label ? 1.0 : 0.0));
      }
    });
  });
}

// --------------------------------------------------------------------------
// Lovasz-softmax: the Lovasz extension of the per-class Jaccard loss,
// averaged over the classes present in the labels.

namespace detail {

struct LovaszClassPlan {
  int cls = 0;
  std::vector<int> order;     // point indices sorted by descending error
  std::vector<double> jac;    // cumulative Jaccard loss along the sorted prefix
};

// loss_c = sum_i jac[i] * (e_sorted[i] - e_sorted[i+1]); on hard 0/1
// predictions this telescopes to exactly 1 - IoU of class c.
inline double lovasz_class_loss(const std::vector<double>& errors, const std::vector<char>& is_gt,
                                LovaszClassPlan& plan) {
  int n = static_cast<int>(errors.size());
  plan.order.resize(static_cast<size_t>(n));
  std::iota(plan.order.begin(), plan.order.end(), 0);
  std::stable_sort(plan.order.begin(), plan.order.end(),
                   [&](int a, int b) { return errors[static_cast<size_t>(a)] > errors[static_cast<size_t>(b)]; });
  double gts = 0;
  for (char v : is_gt) gts += v;
  plan.jac.resize(static_cast<size_t>(n));
  double cum_gt = 0, cum_fp = 0;
  for (int i = 0; i < n; ++i) {
    int idx = plan.order[static_cast<size_t>(i)];
    if (is_gt[static_cast<size_t>(idx)])
      cum_gt += 1;
    else
      cum_fp += 1;
    double inter = gts - cum_gt;
    double uni = gts + cum_fp;
    plan.jac[static_cast<size_t>(i)] = 1.0 - inter / uni;
  }
  double loss = 0;
  for (int i = 0; i < n; ++i) {
    double e_i = errors[static_cast<size_t>(plan.order[static_cast<size_t>(i)])];
    double e_next = i + 1 < n ? errors[static_cast<size_t>(plan.order[static_cast<size_t>(i) + 1])] : 0.0;
    loss += plan.jac[static_cast<size_t>(i)] * (e_i - e_next);
  }
  return loss;
}

}  // namespace detail

// Pure evaluation on probabilities (rows sum to 1; hard 0/1 rows allowed).
inline double lovasz_softmax_from_probs(const Tensor& probs, const std::vector<int>& labels) {
  int m = probs.rows(), k = probs.cols();
  std::vector<char> present(static_cast<size_t>(k), 0);
  for (int i = 0; i < m; ++i) {
    int label = labels[static_cast<size_t>(i)];
    if (label >= 0 && label < k) present[static_cast<size_t>(label)] = 1;
  }
  std::vector<int> keep;
  for (int i = 0; i < m; ++i)
    if (labels[static_cast<size_t>(i)] >= 0) keep.push_back(i);
  double total = 0;
  int n_present = 0;
  std::vector<double> errors(keep.size());
  std::vector<char> is_gt(keep.size());
  for (int c = 0; c < k; ++c) {
    if (!present[static_cast<size_t>(c)]) continue;
    ++n_present;
    for (size_t r = 0; r < keep.size(); ++r) {
      int i = keep[r];
      bool gt = labels[static_cast<size_t>(i)] == c;
      is_gt[r] = gt;
      errors[r] = gt ? 1.0 - probs(i, c) : probs(i, c);
    }
    detail::LovaszClassPlan plan;
    total += detail::lovasz_class_loss(errors, is_gt, plan);
  }
  return n_present > 0 ? total / n_present : 0.0;
}

inline Var lovasz_softmax(Tape& t, Var scores, std::shared_ptr<const std::vector<int>> labels) {
  const Tensor& s = t.val(scores);
  if (s.rank() != 2 || static_cast<size_t>(s.rows()) != labels->size())
    throw invalid_input("lovasz_softmax: scores/labels mismatch");
  int m = s.rows(), k = s.cols();

  auto probs = std::make_shared<Tensor>(Tensor({m, k}));
  for (int i = 0; i < m; ++i) {
    double mx = s(i, 0);
    for (int j = 1; j < k; ++j) mx = std::max(mx, s(i, j));
    double z = 0;
    for (int j = 0; j < k; ++j) z += std::exp(s(i, j) - mx);
    for (int j = 0; j < k; ++j) (*probs)(i, j) = std::exp(s(i, j) - mx) / z;
  }

  auto keep = std::make_shared<std::vector<int>>();
  std::vector<char> present(static_cast<size_t>(k), 0);
  for (int i = 0; i < m; ++i) {
    int label = (*labels)[static_cast<size_t>(i)];
    if (label >= 0) {
      keep->push_back(i);
      if (label < k) present[static_cast<size_t>(label)] = 1;
    }
  }
  auto plans = std::make_shared<std::vector<detail::LovaszClassPlan>>();
  double total = 0;
  std::vector<double> errors(keep->size());
  std::vector<char> is_gt(keep->size());
  for (int c = 0; c < k; ++c) {
    if (!present[static_cast<size_t>(c)]) continue;
    for (size_t r = 0; r < keep->size(); ++r) {
      int i = (*keep)[r];
      bool gt = (*labels)[static_cast<size_t>(i)] == c;
      is_gt[r] = gt;
      errors[r] = gt ? 1.0 - (*probs)(i, c) : (*probs)(i, c);
    }
    detail::LovaszClassPlan plan;
    plan.cls = c;
    total += detail::lovasz_class_loss(errors, is_gt, plan);
    plans->push_back(std::move(plan));
  }
  int n_present = static_cast<int>(plans->size());
  double loss = n_present > 0 ? total / n_present : 0.0;

  return t.make("lovasz_softmax", Tensor::scalar(loss),
                [scores, labels, probs, keep, plans, m, k, n_present](Tape& t, const Tensor& g) {
    if (n_present == 0) return;
    t.accumulate_with(scores, [&](Tensor& gs) {
      double f = g.data[0] / n_present;
      // dL/dp accumulated over classes, then pushed through softmax rows.
      Tensor gp({m, k});
      for (const auto& plan : *plans) {
        int c = plan.cls;
        for (size_t pos = 0; pos < plan.order.size(); ++pos) {
          int r = plan.order[pos];
          int i = (*keep)[static_cast<size_t>(r)];
          double grad_e = plan.jac[pos] - (pos > 0 ? plan.jac[pos - 1] : 0.0);
          bool gt = (*labels)[static_cast<size_t>(i)] == c;
          gp(i, c) += f * (gt ? -grad_e : grad_e);
        }
      }
      for (int i = 0; i < m; ++i) {
        double inner = 0;
        for (int c = 0; c < k; ++c) inner += gp(i, c) * (*probs)(i, c);
        for (int j = 0; j < k; ++j) gs(i, j) += (*probs)(i, j) * (gp(i, j) - inner);
      }
    });
  });
}

// Equal-part combination of cross-entropy and Lovasz.
inline Var semantic_loss(Tape& t, Var scores, std::shared_ptr<const std::vector<int>> labels) {
  Var ce = cross_entropy(t, scores, labels);
  Var ls = lovasz_softmax(t, scores, labels);
  return add(t, scale(t, ce, 0.5), scale(t, ls, 0.5));
}

// --------------------------------------------------------------------------
// Discriminative instance loss over embeddings (variance pull, distance
// push, center regularization). Both bracket terms are hinged.

struct DiscriminativeMargins {
  double delta_v = 0.5;
  double delta_d = 1.5;
  double alpha = 1.0;
  double beta = 1.0;
  double gamma = 0.001;
};

inline void check_margins(const DiscriminativeMargins& m) {
  if (m.delta_v < 0 || m.delta_d < 0) throw invalid_input("margins must be non-negative");
  if (m.delta_d <= 2 * m.delta_v)
    std::cerr << "warning: delta_d <= 2*delta_v; variance and distance hinges may overlap\n";
}

// Output tensor {L, L_var, L_dist, L_reg}.
inline Var discriminative_loss(Tape& t, Var embeddings,
                               std::shared_ptr<const std::vector<int>> instance_labels,
                               DiscriminativeMargins margins) {
  const Tensor& x = t.val(embeddings);
  if (x.rank() != 2 || static_cast<size_t>(x.rows()) != instance_labels->size())
    throw invalid_input("discriminative_loss: embeddings/labels mismatch");
  int m = x.rows(), e = x.cols();

  // Cluster ids in order of first appearance; label -1 is ignored.
  auto cluster_of = std::make_shared<std::vector<int>>(static_cast<size_t>(m), -1);
  std::vector<int> cluster_label;
  for (int i = 0; i < m; ++i) {
    int label = (*instance_labels)[static_cast<size_t>(i)];
    if (label < 0) continue;
    int c = -1;
    for (size_t j = 0; j < cluster_label.size(); ++j)
      if (cluster_label[j] == label) c = static_cast<int>(j);
    if (c < 0) {
      c = static_cast<int>(cluster_label.size());
      cluster_label.push_back(label);
    }
    (*cluster_of)[static_cast<size_t>(i)] = c;
  }
  int n_clusters = static_cast<int>(cluster_label.size());
  if (n_clusters == 0) throw invalid_input("discriminative_loss: no instances");

  auto mu = std::make_shared<Tensor>(Tensor({n_clusters, e}));
  auto counts = std::make_shared<std::vector<int>>(static_cast<size_t>(n_clusters), 0);
  for (int i = 0; i < m; ++i) {
    int c = (*cluster_of)[static_cast<size_t>(i)];
    if (c < 0) continue;
    (*counts)[static_cast<size_t>(c)]++;
    for (int j = 0; j < e; ++j) (*mu)(c, j) += x(i, j);
  }
  for (int c = 0; c < n_clusters; ++c)
    for (int j = 0; j < e; ++j) (*mu)(c, j) /= (*counts)[static_cast<size_t>(c)];

  double l_var = 0;
  for (int i = 0; i < m; ++i) {
    int c = (*cluster_of)[static_cast<size_t>(i)];
    if (c < 0) continue;
    double n2 = 0;
    for (int j = 0; j < e; ++j) {
      double dv = (*mu)(c, j) - x(i, j);
      n2 += dv * dv;
    }
    double hinge = std::max(std::sqrt(n2) - margins.delta_v, 0.0);
    l_var += hinge * hinge / (*counts)[static_cast<size_t>(c)];
  }
  l_var /= n_clusters;

  double l_dist = 0;
  if (n_clusters > 1) {
    for (int a = 0; a < n_clusters; ++a)
      for (int b = 0; b < n_clusters; ++b) {
        if (a == b) continue;
        double n2 = 0;
        for (int j = 0; j < e; ++j) {
          double dv = (*mu)(a, j) - (*mu)(b, j);
          n2 += dv * dv;
        }
        double hinge = std::max(2 * margins.delta_d - std::sqrt(n2), 0.0);
        l_dist += hinge * hinge;
      }
    l_dist /= double(n_clusters) * (n_clusters - 1);
  }

  double l_reg = 0;
  for (int c = 0; c < n_clusters; ++c) {
    double n2 = 0;
    for (int j = 0; j < e; ++j) n2 += (*mu)(c, j) * (*mu)(c, j);
    l_reg += std::sqrt(n2);
  }
  l_reg /= n_clusters;

  Tensor out({4});
  out(1) = l_var;
  out(2) = l_dist;
  out(3) = l_reg;
  out(0) = margins.alpha * l_var + margins.beta * l_dist + margins.gamma * l_reg;

  return t.make("discriminative_loss", std::move(out),
                [embeddings, cluster_of, mu, counts, margins, m, e, n_clusters](Tape& t, const Tensor& g) {
    const Tensor& x = t.val(embeddings);
    double gv = g(0) * margins.alpha + g(1);
    double gd = g(0) * margins.beta + g(2);
    double gr = g(0) * margins.gamma + g(3);
    Tensor gx({m, e});
    Tensor gmu({n_clusters, e});  // gradient routed through the cluster means

    if (gv != 0.0) {
      for (int i = 0; i < m; ++i) {
        int c = (*cluster_of)[static_cast<size_t>(i)];
        if (c < 0) continue;
        double n2 = 0;
        for (int j = 0; j < e; ++j) {
          double dv = (*mu)(c, j) - x(i, j);
          n2 += dv * dv;
        }
        double norm = std::sqrt(n2);
        double hinge = norm - margins.delta_v;
        if (hinge <= 0 || norm == 0) continue;
        double f = gv * 2.0 * hinge / (norm * (*counts)[static_cast<size_t>(c)] * n_clusters);
        for (int j = 0; j < e; ++j) {
          double dir = (*mu)(c, j) - x(i, j);
          gx(i, j) += -f * dir;
          gmu(c, j) += f * dir;
        }
      }
    }
    if (gd != 0.0 && n_clusters > 1) {
      double denom = double(n_clusters) * (n_clusters - 1);
      for (int a = 0; a < n_clusters; ++a)
        for (int b = 0; b < n_clusters; ++b) {
          if (a == b) continue;
          double n2 = 0;
          for (int j = 0; j < e; ++j) {
            double dv = (*mu)(a, j) - (*mu)(b, j);
            n2 += dv * dv;
          }
          double norm = std::sqrt(n2);
          double hinge = 2 * margins.delta_d - norm;
          if (hinge <= 0 || norm == 0) continue;
          double f = gd * (-2.0) * hinge / (norm * denom);
          for (int j = 0; j < e; ++j) {
            double dir = (*mu)(a, j) - (*mu)(b, j);
            gmu(a, j) += f * dir;
            gmu(b, j) -= f * dir;
          }
        }
    }
    if (gr != 0.0) {
      for (int c = 0; c < n_clusters; ++c) {
        double n2 = 0;
        for (int j = 0; j < e; ++j) n2 += (*mu)(c, j) * (*mu)(c, j);
        double norm = std::sqrt(n2);
        if (norm == 0) continue;
        for (int j = 0; j < e; ++j) gmu(c, j) += gr * (*mu)(c, j) / (norm * n_clusters);
      }
    }
    // mu_c is the mean of its members.
    for (int i = 0; i < m; ++i) {
      int c = (*cluster_of)[static_cast<size_t>(i)];
      if (c < 0) continue;
      for (int j = 0; j < e; ++j) gx(i, j) += gmu(c, j) / (*counts)[static_cast<size_t>(c)];
    }
    t.accumulate(embeddings, gx);
  });
}

inline Var index_scalar(Tape& t, Var v, int idx) {
  return t.make("index", Tensor::scalar(t.val(v)(idx)), [v, idx](Tape& t, const Tensor& g) {
    t.accumulate_with(v, [&](Tensor& gv) { gv(idx) += g.data[0]; });
  });
}

}  // namespace latseg
