#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "latseg/losses.hpp"
#include "latseg/metrics.hpp"
#include "oracles.hpp"

using namespace latseg;

namespace {

Tensor rand_t(std::vector<int> shape, uint64_t seed) {
  std::mt19937_64 rng(seed);
  return random_normal(std::move(shape), rng);
}

auto labels_ptr(std::vector<int> v) {
  return std::make_shared<const std::vector<int>>(std::move(v));
}

double eval_scalar(std::function<Var(Tape&)> build) {
  Tape t;
  return t.val(build(t)).data[0];
}

// Direct per-point cross-entropy summation.
double ce_oracle(const Tensor& scores, const std::vector<int>& labels) {
  double total = 0;
  int counted = 0;
  for (int i = 0; i < scores.rows(); ++i) {
    if (labels[static_cast<size_t>(i)] < 0) continue;
    double z = 0;
    for (int j = 0; j < scores.cols(); ++j) z += std::exp(scores(i, j));
    total += -std::log(std::exp(scores(i, labels[static_cast<size_t>(i)])) / z);
    ++counted;
  }
  return total / counted;
}

// 1 - IoU per class present in gt, averaged; for hard predictions only.
double hard_jaccard_loss(const std::vector<int>& pred, const std::vector<int>& gt, int k) {
  double total = 0;
  int present = 0;
  for (int c = 0; c < k; ++c) {
    int64_t inter = 0, uni = 0;
    bool in_gt = false;
    for (size_t i = 0; i < gt.size(); ++i) {
      bool pg = gt[i] == c, pp = pred[i] == c;
      if (pg) in_gt = true;
      if (pg && pp) ++inter;
      if (pg || pp) ++uni;
    }
    if (!in_gt) continue;
    ++present;
    total += 1.0 - double(inter) / double(uni);
  }
  return present ? total / present : 0.0;
}

// Direct loop evaluation of the three discriminative terms.
struct DiscOracle {
  double l_var, l_dist, l_reg, total;
};

DiscOracle disc_oracle(const Tensor& x, const std::vector<int>& inst,
                       const DiscriminativeMargins& m) {
  std::vector<int> ids;
  for (int v : inst)
    if (v >= 0 && std::find(ids.begin(), ids.end(), v) == ids.end()) ids.push_back(v);
  int C = static_cast<int>(ids.size());
  int E = x.cols();
  std::vector<std::vector<double>> mu(static_cast<size_t>(C), std::vector<double>(static_cast<size_t>(E), 0.0));
  std::vector<int> nc(static_cast<size_t>(C), 0);
  for (size_t i = 0; i < inst.size(); ++i) {
    for (int c = 0; c < C; ++c)
      if (inst[i] == ids[static_cast<size_t>(c)]) {
        nc[static_cast<size_t>(c)]++;
        for (int j = 0; j < E; ++j) mu[static_cast<size_t>(c)][static_cast<size_t>(j)] += x(static_cast<int>(i), j);
      }
  }
  for (int c = 0; c < C; ++c)
    for (int j = 0; j < E; ++j) mu[static_cast<size_t>(c)][static_cast<size_t>(j)] /= nc[static_cast<size_t>(c)];

  DiscOracle out{0, 0, 0, 0};
  for (int c = 0; c < C; ++c) {
    double term = 0;
    for (size_t i = 0; i < inst.size(); ++i) {
      if (inst[i] != ids[static_cast<size_t>(c)]) continue;
      double n2 = 0;
      for (int j = 0; j < E; ++j) {
        double d = mu[static_cast<size_t>(c)][static_cast<size_t>(j)] - x(static_cast<int>(i), j);
        n2 += d * d;
      }
      double h = std::max(std::sqrt(n2) - m.delta_v, 0.0);
      term += h * h;
    }
    out.l_var += term / nc[static_cast<size_t>(c)];
  }
  out.l_var /= C;
  if (C > 1) {
    for (int a = 0; a < C; ++a)
      for (int b = 0; b < C; ++b) {
        if (a == b) continue;
        double n2 = 0;
        for (int j = 0; j < E; ++j) {
          double d = mu[static_cast<size_t>(a)][static_cast<size_t>(j)] - mu[static_cast<size_t>(b)][static_cast<size_t>(j)];
          n2 += d * d;
        }
        double h = std::max(2 * m.delta_d - std::sqrt(n2), 0.0);
        out.l_dist += h * h;
      }
    out.l_dist /= double(C) * (C - 1);
  }
  for (int c = 0; c < C; ++c) {
    double n2 = 0;
    for (int j = 0; j < E; ++j) n2 += mu[static_cast<size_t>(c)][static_cast<size_t>(j)] * mu[static_cast<size_t>(c)][static_cast<size_t>(j)];
    out.l_reg += std::sqrt(n2);
  }
  out.l_reg /= C;
  out.total = m.alpha * out.l_var + m.beta * out.l_dist + m.gamma * out.l_reg;
  return out;
}

}  // namespace

TEST_CASE("cross_entropy: confident correct prediction approaches zero") {
  Tensor scores({4, 3});
  std::vector<int> labels = {0, 1, 2, 1};
  for (int i = 0; i < 4; ++i) scores(i, labels[static_cast<size_t>(i)]) = 50.0;
  double loss = eval_scalar([&](Tape& t) { return cross_entropy(t, t.leaf(scores), labels_ptr(labels)); });
  CHECK(loss <= 1e-12);
}

TEST_CASE("cross_entropy: uniform scores give ln K") {
  Tensor scores({6, 4});
  double loss = eval_scalar([&](Tape& t) {
    return cross_entropy(t, t.leaf(scores), labels_ptr({0, 1, 2, 3, 0, 1}));
  });
  CHECK(loss == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("cross_entropy matches direct summation") {
  Tensor scores = rand_t({50, 5}, 3);
  std::vector<int> labels(50);
  std::mt19937_64 rng(4);
  for (auto& v : labels) v = static_cast<int>(rng() % 6) - 1;  // includes ignores
  double got = eval_scalar([&](Tape& t) { return cross_entropy(t, t.leaf(scores), labels_ptr(labels)); });
  CHECK(oracles::rel_err(got, ce_oracle(scores, labels)) <= 1e-12);
}

TEST_CASE("cross_entropy: all ignored is zero with a warning") {
  Tensor scores = rand_t({3, 2}, 5);
  double loss = eval_scalar([&](Tape& t) {
    return cross_entropy(t, t.leaf(scores), labels_ptr({-1, -1, -1}));
  });
  CHECK(loss == 0.0);
}

TEST_CASE("cross_entropy gradient") {
  std::vector<int> labels = {0, 2, 1, -1, 2};
  auto rep = grad_check(
      [&](Tape& t, const std::vector<Var>& in) { return cross_entropy(t, in[0], labels_ptr(labels)); },
      {rand_t({5, 3}, 6)});
  CHECK(rep.pass);
}

TEST_CASE("lovasz: perfect hard prediction gives zero") {
  Tensor probs({5, 2});
  std::vector<int> labels = {0, 1, 0, 1, 1};
  for (int i = 0; i < 5; ++i) probs(i, labels[static_cast<size_t>(i)]) = 1.0;
  CHECK(lovasz_softmax_from_probs(probs, labels) == 0.0);
}

TEST_CASE("lovasz: all-wrong hard prediction with a single class present gives 1") {
  Tensor probs({4, 2});
  for (int i = 0; i < 4; ++i) probs(i, 1) = 1.0;
  std::vector<int> labels = {0, 0, 0, 0};
  CHECK(lovasz_softmax_from_probs(probs, labels) == 1.0);
}

TEST_CASE("lovasz equals 1 - Jaccard on all hard binary masks up to length 8") {
  for (int len = 1; len <= 8; ++len) {
    for (int gt_mask = 0; gt_mask < (1 << len); ++gt_mask) {
      for (int pred_mask = 0; pred_mask < (1 << len); ++pred_mask) {
        std::vector<int> gt(static_cast<size_t>(len)), pred(static_cast<size_t>(len));
        Tensor probs({len, 2});
        for (int i = 0; i < len; ++i) {
          gt[static_cast<size_t>(i)] = (gt_mask >> i) & 1;
          pred[static_cast<size_t>(i)] = (pred_mask >> i) & 1;
          probs(i, pred[static_cast<size_t>(i)]) = 1.0;
        }
        double got = lovasz_softmax_from_probs(probs, gt);
        double expect = hard_jaccard_loss(pred, gt, 2);
        REQUIRE(got == expect);  // exact: hard errors telescope the extension
      }
    }
  }
}

TEST_CASE("lovasz_softmax tape op agrees with the probs form and differentiates") {
  Tensor scores = rand_t({20, 3}, 7);
  std::vector<int> labels(20);
  std::mt19937_64 rng(8);
  for (auto& v : labels) v = static_cast<int>(rng() % 3);
  double via_op = eval_scalar([&](Tape& t) { return lovasz_softmax(t, t.leaf(scores), labels_ptr(labels)); });
  Tensor probs({20, 3});
  for (int i = 0; i < 20; ++i) {
    double z = 0;
    for (int j = 0; j < 3; ++j) z += std::exp(scores(i, j));
    for (int j = 0; j < 3; ++j) probs(i, j) = std::exp(scores(i, j)) / z;
  }
  CHECK(oracles::rel_err(via_op, lovasz_softmax_from_probs(probs, labels)) <= 1e-12);

  auto rep = grad_check(
      [&](Tape& t, const std::vector<Var>& in) { return lovasz_softmax(t, in[0], labels_ptr(labels)); },
      {scores});
  CHECK(rep.pass);
}

TEST_CASE("semantic_loss is the equal-part combination") {
  Tensor scores = rand_t({15, 4}, 9);
  std::vector<int> labels(15);
  std::mt19937_64 rng(10);
  for (auto& v : labels) v = static_cast<int>(rng() % 4);
  double ce = eval_scalar([&](Tape& t) { return cross_entropy(t, t.leaf(scores), labels_ptr(labels)); });
  double ls = eval_scalar([&](Tape& t) { return lovasz_softmax(t, t.leaf(scores), labels_ptr(labels)); });
  double sem = eval_scalar([&](Tape& t) { return semantic_loss(t, t.leaf(scores), labels_ptr(labels)); });
  CHECK(oracles::rel_err(sem, 0.5 * ce + 0.5 * ls) <= 1e-12);

  // Perfect hard-confident prediction drives it to zero.
  Tensor perfect({6, 3});
  std::vector<int> pl = {0, 1, 2, 0, 1, 2};
  for (int i = 0; i < 6; ++i) perfect(i, pl[static_cast<size_t>(i)]) = 60.0;
  double zero = eval_scalar([&](Tape& t) { return semantic_loss(t, t.leaf(perfect), labels_ptr(pl)); });
  CHECK(zero <= 1e-12);
}

TEST_CASE("discriminative: margins satisfied leaves only the regularizer") {
  // Two tight clusters far apart.
  DiscriminativeMargins m;
  Tensor x({6, 2});
  for (int i = 0; i < 3; ++i) {
    x(i, 0) = 5.0;
    x(i, 1) = 0.0;
  }
  for (int i = 3; i < 6; ++i) {
    x(i, 0) = -5.0;
    x(i, 1) = 0.0;
  }
  std::vector<int> inst = {0, 0, 0, 1, 1, 1};
  Tape t;
  Var terms = discriminative_loss(t, t.leaf(x), labels_ptr(inst), m);
  CHECK(t.val(terms)(1) == 0.0);  // variance
  CHECK(t.val(terms)(2) == 0.0);  // distance
  CHECK(t.val(terms)(3) == doctest::Approx(5.0));
  CHECK(t.val(terms)(0) == doctest::Approx(m.gamma * 5.0));
}

TEST_CASE("discriminative: identical centers give the full distance hinge") {
  DiscriminativeMargins m;
  Tensor x({4, 2});
  std::vector<int> inst = {0, 0, 1, 1};
  Tape t;
  Var terms = discriminative_loss(t, t.leaf(x), labels_ptr(inst), m);
  CHECK(t.val(terms)(2) == doctest::Approx(4.0 * m.delta_d * m.delta_d));
}

TEST_CASE("discriminative matches the direct loop oracle") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor x = rand_t({20, 2}, 100 + trial);
    std::vector<int> inst(20);
    for (auto& v : inst) v = static_cast<int>(rng() % 4);
    DiscriminativeMargins m;
    m.delta_v = 0.3;
    m.delta_d = 1.0;
    Tape t;
    Var terms = discriminative_loss(t, t.leaf(x), labels_ptr(inst), m);
    auto oracle = disc_oracle(x, inst, m);
    CHECK(oracles::rel_err(t.val(terms)(0), oracle.total) <= 1e-12);
    CHECK(oracles::rel_err(t.val(terms)(1), oracle.l_var) <= 1e-12);
    CHECK(oracles::rel_err(t.val(terms)(2), oracle.l_dist) <= 1e-12);
    CHECK(oracles::rel_err(t.val(terms)(3), oracle.l_reg) <= 1e-12);
  }
}

TEST_CASE("discriminative rejects zero instances") {
  Tape t;
  CHECK_THROWS_AS(
      discriminative_loss(t, t.leaf(rand_t({3, 2}, 12)), labels_ptr({-1, -1, -1}), {}),
      invalid_input);
}

TEST_CASE("discriminative gradient away from hinge kinks") {
  std::mt19937_64 rng(13);
  DiscriminativeMargins m;
  m.delta_v = 0.2;
  m.delta_d = 0.8;
  // Spread-out clusters so hinges are comfortably active or inactive.
  Tensor x({12, 2});
  std::vector<int> inst(12);
  for (int i = 0; i < 12; ++i) {
    int c = i / 4;
    inst[static_cast<size_t>(i)] = c;
    x(i, 0) = 2.0 * c + 0.6 * std::normal_distribution<double>()(rng);
    x(i, 1) = 0.6 * std::normal_distribution<double>()(rng);
  }
  auto rep = grad_check(
      [&](Tape& t, const std::vector<Var>& in) {
        return index_scalar(t, discriminative_loss(t, in[0], labels_ptr(inst), m), 0);
      },
      {x});
  CHECK(rep.pass);
}

TEST_CASE("losses are non-negative on random inputs") {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor scores = rand_t({12, 3}, 900 + trial);
    std::vector<int> labels(12);
    for (auto& v : labels) v = static_cast<int>(rng() % 3);
    double sem = eval_scalar([&](Tape& t) { return semantic_loss(t, t.leaf(scores), labels_ptr(labels)); });
    CHECK(sem >= 0.0);

    Tensor emb = rand_t({12, 2}, 950 + trial);
    std::vector<int> inst(12);
    for (auto& v : inst) v = static_cast<int>(rng() % 3);
    Tape t;
    Var terms = discriminative_loss(t, t.leaf(emb), labels_ptr(inst), {});
    for (int k = 0; k < 4; ++k) CHECK(t.val(terms)(k) >= 0.0);
  }
}

TEST_CASE("miou: perfect and disjoint predictions") {
  std::vector<int> gt = {0, 0, 1, 1, 2, 2};
  CHECK(miou(gt, gt, 3).mean == doctest::Approx(1.0));

  std::vector<int> pred = {1, 1, 0, 0, 2, 2};
  auto rep = miou(pred, gt, 3);
  CHECK(rep.per_class[0] == doctest::Approx(0.0));
  CHECK(rep.per_class[1] == doctest::Approx(0.0));
  CHECK(rep.per_class[2] == doctest::Approx(1.0));
}

TEST_CASE("miou matches a confusion-matrix hand computation") {
  std::vector<int> gt =   {0, 0, 0, 1, 1, 2, 2, 2, 2, -1};
  std::vector<int> pred = {0, 1, 0, 1, 2, 2, 2, 0, 2, 0};
  // class 0: tp=2 fp=1 fn=1 -> 2/4; class 1: tp=1 fp=1 fn=1 -> 1/3;
  // class 2: tp=3 fp=1 fn=1 -> 3/5
  auto rep = miou(pred, gt, 3);
  CHECK(rep.per_class[0] == doctest::Approx(0.5));
  CHECK(rep.per_class[1] == doctest::Approx(1.0 / 3));
  CHECK(rep.per_class[2] == doctest::Approx(0.6));
  CHECK(rep.mean == doctest::Approx((0.5 + 1.0 / 3 + 0.6) / 3));
}

TEST_CASE("miou is invariant under consistent relabeling") {
  std::mt19937_64 rng(14);
  std::vector<int> gt(40), pred(40);
  for (auto& v : gt) v = static_cast<int>(rng() % 3);
  for (auto& v : pred) v = static_cast<int>(rng() % 3);
  auto base = miou(pred, gt, 3);
  // Relabel 0->2, 1->0, 2->1 on both.
  auto relabel = [](std::vector<int> v) {
    for (auto& x : v) x = (x + 2) % 3;
    return v;
  };
  auto swapped = miou(relabel(pred), relabel(gt), 3);
  CHECK(base.mean == doctest::Approx(swapped.mean).epsilon(1e-12));
}

TEST_CASE("sbd: identical partitions give 1") {
  std::vector<int> inst = {0, 0, 1, 1, 2};
  CHECK(sbd(inst, inst) == doctest::Approx(1.0));
  std::vector<int> singletons = {0, 1, 2, 3};
  CHECK(sbd(singletons, singletons) == doctest::Approx(1.0));
}

TEST_CASE("sbd: one merged prediction vs two equal instances gives 2/3") {
  // gt: two instances of size 4 each; pred: one instance covering all 8.
  std::vector<int> gt = {0, 0, 0, 0, 1, 1, 1, 1};
  std::vector<int> pred(8, 0);
  CHECK(sbd(pred, gt) == doctest::Approx(2.0 / 3));
}

TEST_CASE("sbd is symmetric and rejects empty partitions") {
  std::mt19937_64 rng(15);
  std::vector<int> a(30), b(30);
  for (auto& v : a) v = static_cast<int>(rng() % 4);
  for (auto& v : b) v = static_cast<int>(rng() % 3);
  CHECK(sbd(a, b) == doctest::Approx(sbd(b, a)).epsilon(1e-12));
  std::vector<int> empty(30, -1);
  CHECK_THROWS_AS(sbd(empty, b), invalid_input);
}
