#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "kws/common.hpp"

namespace kws::nd {

// Dense row-major 64-bit float tensor. No broadcasting beyond what the
// graph ops implement explicitly; values are expected to stay finite.
struct Tensor {
  std::vector<size_t> shape;
  std::vector<double> data;

  Tensor() = default;

  explicit Tensor(std::vector<size_t> s, double fill = 0.0)
      : shape(std::move(s)), data(count(shape), fill) {}

  static Tensor scalar(double v) {
    Tensor t({1});
    t.data[0] = v;
    return t;
  }

  static Tensor from(std::vector<size_t> s, std::vector<double> values) {
    Tensor t;
    t.shape = std::move(s);
    t.data = std::move(values);
    if (t.data.size() != count(t.shape))
      throw Error("ndmath", "tensor data length does not match shape");
    return t;
  }

  static size_t count(const std::vector<size_t>& s) {
    size_t n = 1;
    for (size_t d : s) n *= d;
    return n;
  }

  size_t numel() const { return data.size(); }
  size_t rank() const { return shape.size(); }

  size_t rows() const { return shape.empty() ? 1 : shape[0]; }
  size_t cols() const { return shape.size() < 2 ? (shape.empty() ? 1 : shape[0]) : shape[1]; }

  double& at(size_t i) { return data[i]; }
  double at(size_t i) const { return data[i]; }
  double& at(size_t r, size_t c) { return data[r * shape[1] + c]; }
  double at(size_t r, size_t c) const { return data[r * shape[1] + c]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  Tensor& fill_uniform(Rng& rng, double lo, double hi) {
    for (double& v : data) v = rng.uniform(lo, hi);
    return *this;
  }

  Tensor& fill_normal(Rng& rng, double mean = 0.0, double stddev = 1.0) {
    for (double& v : data) v = rng.normal(mean, stddev);
    return *this;
  }
};

inline std::string shape_str(const std::vector<size_t>& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// C[MxN] += or = A[MxK] * B[KxN]. The k-ascending accumulation order per
// output element is relied on by the streaming/batch equivalence tests.
inline void gemm(const double* a, size_t m, size_t k, const double* b, size_t n, double* c) {
  for (size_t i = 0; i < m * n; ++i) c[i] = 0.0;
  for (size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (size_t p = 0; p < k; ++p) {
      double av = ai[p];
      const double* bp = b + p * n;
      for (size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C[MxN] = A[MxK] * B[NxK]^T; both operands walk contiguously.
inline void gemm_nt(const double* a, size_t m, size_t k, const double* b, size_t n, double* c) {
  for (size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double acc = 0.0;
      for (size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      c[i * n + j] = acc;
    }
  }
}

// C[KxN] = A[MxK]^T * B[MxN].
inline void gemm_tn(const double* a, size_t m, size_t k, const double* b, size_t n, double* c) {
  for (size_t i = 0; i < k * n; ++i) c[i] = 0.0;
  for (size_t r = 0; r < m; ++r) {
    const double* ar = a + r * k;
    const double* br = b + r * n;
    for (size_t i = 0; i < k; ++i) {
      double av = ar[i];
      double* ci = c + i * n;
      for (size_t j = 0; j < n; ++j) ci[j] += av * br[j];
    }
  }
}

}  // namespace kws::nd
