#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "latseg/tensor.hpp"
#include "latseg/util.hpp"

namespace latseg {

// Minimal reverse-mode tape over dense tensors. Nodes are created in
// topological order (an op may only reference earlier nodes), so backward is
// a single reverse sweep. One tape per training thread; never shared.

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Tape {
 public:
  using VjpFn = std::function<void(Tape&, const Tensor& gout)>;

  struct Node {
    Tensor value;
    VjpFn vjp;  // empty for leaves
    const char* op = "leaf";
  };

  Var leaf(Tensor value) {
    nodes_.push_back(Node{std::move(value), nullptr, "leaf"});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Var make(const char* op, Tensor value, VjpFn vjp) {
    nodes_.push_back(Node{std::move(value), std::move(vjp), op});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  const Tensor& val(Var v) const { return nodes_[static_cast<size_t>(v.id)].value; }
  const char* op_name(Var v) const { return nodes_[static_cast<size_t>(v.id)].op; }
  int size() const { return static_cast<int>(nodes_.size()); }

  // Gradient accumulator for a node, allocated on first touch.
  Tensor& grad(Var v) {
    if (grads_.size() < nodes_.size()) grads_.resize(nodes_.size());
    if (touched_.size() < nodes_.size()) touched_.resize(nodes_.size(), 0);
    auto& slot = grads_[static_cast<size_t>(v.id)];
    if (slot.shape.empty()) slot = Tensor(nodes_[static_cast<size_t>(v.id)].value.shape);
    return slot;
  }

  // Reverse sweep from a scalar root. Nodes not reachable from the root keep
  // zero gradients.
  void backward(Var root) {
    if (!root.valid() || val(root).numel() != 1)
      throw invalid_input("backward: root must be a scalar");
    grads_.assign(nodes_.size(), Tensor{});
    touched_.assign(nodes_.size(), 0);
    grad(root).data[0] = 1.0;
    touched_[static_cast<size_t>(root.id)] = 1;
    for (int i = root.id; i >= 0; --i) {
      if (!touched_[static_cast<size_t>(i)]) continue;
      auto& node = nodes_[static_cast<size_t>(i)];
      if (node.vjp) node.vjp(*this, grads_[static_cast<size_t>(i)]);
    }
  }

  // Marks a node as reached during backward; called by VJPs via accumulate().
  void accumulate(Var v, const Tensor& g) {
    Tensor& acc = grad(v);
    acc += g;
    touched_[static_cast<size_t>(v.id)] = 1;
  }

  template <typename Fn>
  void accumulate_with(Var v, Fn&& fn) {
    fn(grad(v));
    touched_[static_cast<size_t>(v.id)] = 1;
  }

  // Name of the first node (in creation order) whose value contains a NaN,
  // or empty if none. Used for training diagnostics.
  std::string first_nan_op() const {
    for (const auto& node : nodes_) {
      for (double v : node.value.data)
        if (std::isnan(v)) return node.op;
    }
    return {};
  }

  void reset() {
    nodes_.clear();
    grads_.clear();
    touched_.clear();
  }

 private:
  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::vector<char> touched_;
};

// --------------------------------------------------------------------------
// Elementwise and dense primitives.

inline Var add(Tape& t, Var a, Var b) {
  if (!t.val(a).same_shape(t.val(b))) throw invalid_input("add: shape mismatch");
  Tensor out = t.val(a);
  out += t.val(b);
  return t.make("add", std::move(out), [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

inline Var sub(Tape& t, Var a, Var b) {
  if (!t.val(a).same_shape(t.val(b))) throw invalid_input("sub: shape mismatch");
  Tensor out = t.val(a);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= t.val(b).data[i];
  return t.make("sub", std::move(out), [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    t.accumulate_with(b, [&](Tensor& gb) {
      for (size_t i = 0; i < g.data.size(); ++i) gb.data[i] -= g.data[i];
    });
  });
}

inline Var scale(Tape& t, Var a, double s) {
  Tensor out = t.val(a);
  out *= s;
  return t.make("scale", std::move(out), [a, s](Tape& t, const Tensor& g) {
    t.accumulate_with(a, [&](Tensor& ga) {
      for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += s * g.data[i];
    });
  });
}

inline Var mul(Tape& t, Var a, Var b) {
  if (!t.val(a).same_shape(t.val(b))) throw invalid_input("mul: shape mismatch");
  Tensor out = t.val(a);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= t.val(b).data[i];
  return t.make("mul", std::move(out), [a, b](Tape& t, const Tensor& g) {
    t.accumulate_with(a, [&](Tensor& ga) {
      const Tensor& bv = t.val(b);
      for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * bv.data[i];
    });
    t.accumulate_with(b, [&](Tensor& gb) {
      const Tensor& av = t.val(a);
      for (size_t i = 0; i < g.data.size(); ++i) gb.data[i] += g.data[i] * av.data[i];
    });
  });
}

inline Var matmul(Tape& t, Var a, Var b) {
  Tensor out = matmul(t.val(a), t.val(b));
  return t.make("matmul", std::move(out), [a, b](Tape& t, const Tensor& g) {
    const Tensor& av = t.val(a);
    const Tensor& bv = t.val(b);
    t.accumulate_with(a, [&](Tensor& ga) {
      // ga += g * b^T
      int r = av.rows(), k = av.cols(), c = bv.cols();
      for (int i = 0; i < r; ++i)
        for (int kk = 0; kk < k; ++kk) {
          double s = 0;
          for (int j = 0; j < c; ++j) s += g(i, j) * bv(kk, j);
          ga(i, kk) += s;
        }
    });
    t.accumulate_with(b, [&](Tensor& gb) {
      // gb += a^T * g
      int r = av.rows(), k = av.cols(), c = bv.cols();
      for (int kk = 0; kk < k; ++kk)
        for (int i = 0; i < r; ++i) {
          double av_ik = av(i, kk);
          if (av_ik == 0.0) continue;
          for (int j = 0; j < c; ++j) gb(kk, j) += av_ik * g(i, j);
        }
    });
  });
}

// Adds a length-c row vector to every row of a 2D tensor.
inline Var add_rowvec(Tape& t, Var a, Var v) {
  const Tensor& av = t.val(a);
  const Tensor& vv = t.val(v);
  if (av.rank() != 2 || vv.numel() != av.cols()) throw invalid_input("add_rowvec: shape mismatch");
  Tensor out = av;
  int c = av.cols();
  for (int i = 0; i < av.rows(); ++i)
    for (int j = 0; j < c; ++j) out(i, j) += vv.data[static_cast<size_t>(j)];
  return t.make("add_rowvec", std::move(out), [a, v](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    t.accumulate_with(v, [&](Tensor& gv) {
      for (int i = 0; i < g.rows(); ++i)
        for (int j = 0; j < g.cols(); ++j) gv.data[static_cast<size_t>(j)] += g(i, j);
    });
  });
}

inline Var relu(Tape& t, Var a) {
  Tensor out = t.val(a);
  for (double& x : out.data) x = x > 0 ? x : 0.0;
  return t.make("relu", std::move(out), [a](Tape& t, const Tensor& g) {
    t.accumulate_with(a, [&](Tensor& ga) {
      const Tensor& av = t.val(a);
      for (size_t i = 0; i < g.data.size(); ++i)
        if (av.data[i] > 0) ga.data[i] += g.data[i];
    });
  });
}

inline Var tanh_op(Tape& t, Var a) {
  Tensor out = t.val(a);
  for (double& x : out.data) x = std::tanh(x);
  Tensor saved = out;
  return t.make("tanh", std::move(out), [a, saved](Tape& t, const Tensor& g) {
    t.accumulate_with(a, [&](Tensor& ga) {
      for (size_t i = 0; i < g.data.size(); ++i)
        ga.data[i] += g.data[i] * (1.0 - saved.data[i] * saved.data[i]);
    });
  });
}

inline Var sum(Tape& t, Var a) {
  double s = 0;
  for (double v : t.val(a).data) s += v;
  return t.make("sum", Tensor::scalar(s), [a](Tape& t, const Tensor& g) {
    t.accumulate_with(a, [&](Tensor& ga) {
      for (double& v : ga.data) v += g.data[0];
    });
  });
}

inline Var mean(Tape& t, Var a) {
  int64_t n = t.val(a).numel();
  if (n == 0) throw invalid_input("mean: empty tensor");
  double s = 0;
  for (double v : t.val(a).data) s += v;
  return t.make("mean", Tensor::scalar(s / n), [a, n](Tape& t, const Tensor& g) {
    t.accumulate_with(a, [&](Tensor& ga) {
      double gi = g.data[0] / n;
      for (double& v : ga.data) v += gi;
    });
  });
}

inline Var dot(Tape& t, Var a, Var b) {
  if (t.val(a).numel() != t.val(b).numel()) throw invalid_input("dot: size mismatch");
  return t.make("dot", Tensor::scalar(dot(t.val(a), t.val(b))), [a, b](Tape& t, const Tensor& g) {
    double gs = g.data[0];
    t.accumulate_with(a, [&](Tensor& ga) {
      const Tensor& bv = t.val(b);
      for (size_t i = 0; i < ga.data.size(); ++i) ga.data[i] += gs * bv.data[i];
    });
    t.accumulate_with(b, [&](Tensor& gb) {
      const Tensor& av = t.val(a);
      for (size_t i = 0; i < gb.data.size(); ++i) gb.data[i] += gs * av.data[i];
    });
  });
}

// Appends zero rows to a 2D tensor so it has `rows` rows; `a` may have zero
// rows. Shrinking is rejected.
inline Var pad_rows(Tape& t, Var a, int rows) {
  const Tensor& av = t.val(a);
  if (av.rank() != 2) throw invalid_input("pad_rows: need a 2D tensor");
  if (av.rows() > rows) throw invalid_input("pad_rows: would shrink");
  int c = av.cols(), old_rows = av.rows();
  Tensor out({rows, c});
  std::copy(av.data.begin(), av.data.end(), out.data.begin());
  return t.make("pad_rows", std::move(out), [a, old_rows, c](Tape& t, const Tensor& g) {
    t.accumulate_with(a, [&](Tensor& ga) {
      for (int64_t i = 0; i < int64_t(old_rows) * c; ++i) ga.data[static_cast<size_t>(i)] += g.data[static_cast<size_t>(i)];
    });
  });
}

inline Var concat_cols(Tape& t, Var a, Var b) {
  const Tensor& av = t.val(a);
  const Tensor& bv = t.val(b);
  if (av.rank() != 2 || bv.rank() != 2 || av.rows() != bv.rows())
    throw invalid_input("concat_cols: row mismatch");
  int ca = av.cols(), cb = bv.cols();
  Tensor out({av.rows(), ca + cb});
  for (int i = 0; i < av.rows(); ++i) {
    for (int j = 0; j < ca; ++j) out(i, j) = av(i, j);
    for (int j = 0; j < cb; ++j) out(i, ca + j) = bv(i, j);
  }
  return t.make("concat_cols", std::move(out), [a, b, ca, cb](Tape& t, const Tensor& g) {
    t.accumulate_with(a, [&](Tensor& ga) {
      for (int i = 0; i < ga.rows(); ++i)
        for (int j = 0; j < ca; ++j) ga(i, j) += g(i, j);
    });
    t.accumulate_with(b, [&](Tensor& gb) {
      for (int i = 0; i < gb.rows(); ++i)
        for (int j = 0; j < cb; ++j) gb(i, j) += g(i, ca + j);
    });
  });
}

// --------------------------------------------------------------------------
// Finite-difference gradient checking.

struct GradCheckReport {
  bool pass = false;
  double max_rel_err = 0.0;
  std::vector<double> per_input_max;
  std::string note;  // failure location (e.g. NaN op) if any
};

// Checks the tape gradient of `build` (a scalar-graph builder over leaves
// created from `inputs`) against central finite differences. When
// max_entries_per_input > 0, only a deterministic sample of entries per input
// is probed (used for large parameter sets).
template <typename BuildFn>
GradCheckReport grad_check(BuildFn&& build, std::vector<Tensor> inputs, double step = 1e-6,
                           double tolerance = 1e-4, int max_entries_per_input = 0) {
  GradCheckReport report;
  report.per_input_max.assign(inputs.size(), 0.0);

  auto eval = [&](const std::vector<Tensor>& vals, std::vector<Tensor>* grads) -> double {
    Tape tape;
    std::vector<Var> leaves;
    leaves.reserve(vals.size());
    for (const auto& v : vals) leaves.push_back(tape.leaf(v));
    Var root = build(tape, leaves);
    double out = tape.val(root).data[0];
    if (std::isnan(out)) {
      report.note = "NaN in forward pass at op " + tape.first_nan_op();
      return out;
    }
    if (grads) {
      tape.backward(root);
      grads->clear();
      for (Var leaf : leaves) grads->push_back(tape.grad(leaf));
    }
    return out;
  };

  std::vector<Tensor> analytic;
  double base = eval(inputs, &analytic);
  if (std::isnan(base)) return report;
  (void)base;

  std::mt19937_64 pick_rng(12345);
  double worst = 0.0;
  for (size_t i = 0; i < inputs.size(); ++i) {
    int64_t n = inputs[i].numel();
    std::vector<int64_t> entries;
    if (max_entries_per_input > 0 && n > max_entries_per_input) {
      std::uniform_int_distribution<int64_t> dist(0, n - 1);
      for (int k = 0; k < max_entries_per_input; ++k) entries.push_back(dist(pick_rng));
    } else {
      entries.resize(static_cast<size_t>(n));
      for (int64_t k = 0; k < n; ++k) entries[static_cast<size_t>(k)] = k;
    }
    for (int64_t e : entries) {
      double saved = inputs[i].data[static_cast<size_t>(e)];
      double h = step * std::max(1.0, std::fabs(saved));
      inputs[i].data[static_cast<size_t>(e)] = saved + h;
      double fp = eval(inputs, nullptr);
      inputs[i].data[static_cast<size_t>(e)] = saved - h;
      double fm = eval(inputs, nullptr);
      inputs[i].data[static_cast<size_t>(e)] = saved;
      if (std::isnan(fp) || std::isnan(fm)) return report;
      double g_fd = (fp - fm) / (2 * h);
      double g_ad = analytic[i].numel() > 0 ? analytic[i].data[static_cast<size_t>(e)] : 0.0;
      double rel = std::fabs(g_ad - g_fd) / std::max({1.0, std::fabs(g_ad), std::fabs(g_fd)});
      report.per_input_max[i] = std::max(report.per_input_max[i], rel);
      worst = std::max(worst, rel);
    }
  }
  report.max_rel_err = worst;
  report.pass = worst <= tolerance;
  return report;
}

}  // namespace latseg
