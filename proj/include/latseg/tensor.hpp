#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <random>
#include <vector>

#include "latseg/util.hpp"

namespace latseg {

// Dense row-major array of doubles. Rank is usually 1..3; shape {} is a scalar
// stored as one element.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(numel_of(shape)), 0.0);
  }

  static int64_t numel_of(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
  }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

  static Tensor scalar(double v) {
    Tensor t({1});
    t.data[0] = v;
    return t;
  }

  static Tensor from(std::vector<int> s, std::vector<double> v) {
    Tensor t;
    t.shape = std::move(s);
    t.data = std::move(v);
    if (static_cast<int64_t>(t.data.size()) != numel_of(t.shape))
      throw invalid_input("tensor data length does not match shape");
    return t;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  int rows() const { return shape[0]; }
  int cols() const { return shape[1]; }

  double& operator()(int i) { return data[static_cast<size_t>(i)]; }
  double operator()(int i) const { return data[static_cast<size_t>(i)]; }
  double& operator()(int i, int j) { return data[static_cast<size_t>(i) * shape[1] + j]; }
  double operator()(int i, int j) const { return data[static_cast<size_t>(i) * shape[1] + j]; }
  double& operator()(int i, int j, int k) {
    return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
  }
  double operator()(int i, int j, int k) const {
    return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  Tensor& operator+=(const Tensor& o) {
    for (size_t i = 0; i < data.size(); ++i) data[i] += o.data[i];
    return *this;
  }
  Tensor& operator*=(double s) {
    for (double& v : data) v *= s;
    return *this;
  }
};

inline double dot(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (size_t i = 0; i < a.data.size(); ++i) s += a.data[i] * b.data[i];
  return s;
}

inline double max_abs(const Tensor& a) {
  double m = 0;
  for (double v : a.data) m = std::max(m, std::fabs(v));
  return m;
}

// out = A(r_a x k) * B(k x c_b)
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
    throw invalid_input("matmul shape mismatch");
  Tensor out({a.rows(), b.cols()});
  int k = a.cols(), c = b.cols();
  for (int i = 0; i < a.rows(); ++i) {
    const double* ai = &a.data[static_cast<size_t>(i) * k];
    double* oi = &out.data[static_cast<size_t>(i) * c];
    for (int kk = 0; kk < k; ++kk) {
      double av = ai[kk];
      if (av == 0.0) continue;
      const double* bk = &b.data[static_cast<size_t>(kk) * c];
      for (int j = 0; j < c; ++j) oi[j] += av * bk[j];
    }
  }
  return out;
}

inline uint64_t checksum(const Tensor& t) {
  uint64_t h = fnv1a(t.shape.data(), t.shape.size() * sizeof(int));
  return fnv1a(t.data.data(), t.data.size() * sizeof(double), h);
}

inline Tensor random_normal(std::vector<int> shape, std::mt19937_64& rng, double stddev = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.data) v = dist(rng);
  return t;
}

inline Tensor random_uniform(std::vector<int> shape, std::mt19937_64& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (double& v : t.data) v = dist(rng);
  return t;
}

}  // namespace latseg
