// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <random>
#include <string>
#include <vector>

#include "moelpr/errors.hpp"

namespace moelpr {

/// Dense row-major 2D array of 64-bit floats. Scalars are 1x1. Everything in
/// the kit (token batches flattened to rows, weight matrices, gate scores)
/// lives in this one shape family.
struct Tensor {
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<double> data;
  bool requires_grad = false;

  Tensor() = default;
  Tensor(int64_t r, int64_t c, double fill = 0.0)
      : rows(r), cols(c), data(static_cast<size_t>(r * c), fill) {
    if (r < 0 || c < 0) throw ShapeError("Tensor: negative dimension");
  }

  static Tensor scalar(double v) {
    Tensor t(1, 1);
    t.data[0] = v;
    return t;
  }

  int64_t numel() const { return rows * cols; }
  bool empty() const { return numel() == 0; }
  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }

  double& at(int64_t r, int64_t c) { return data[static_cast<size_t>(r * cols + c)]; }
  double at(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * cols + c)]; }
  double* row_ptr(int64_t r) { return data.data() + r * cols; }
  const double* row_ptr(int64_t r) const { return data.data() + r * cols; }

  double item() const {
    if (rows != 1 || cols != 1) throw ShapeError("Tensor::item: tensor is not a scalar");
    return data[0];
  }

  void fill(double v) { std::fill(data.begin(), data.end(), v); }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool bit_equal(const Tensor& o) const {
    return same_shape(o) &&
           std::memcmp(data.data(), o.data.data(), data.size() * sizeof(double)) == 0;
  }

  std::string shape_str() const {
    return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
  }
};

inline Tensor randn(int64_t rows, int64_t cols, double stddev, std::mt19937_64& rng) {
  Tensor t(rows, cols);
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.data) v = dist(rng);
  return t;
}

inline Tensor rand_uniform(int64_t rows, int64_t cols, double lo, double hi,
                           std::mt19937_64& rng) {
  Tensor t(rows, cols);
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.data) v = dist(rng);
  return t;
}

// --- GEMM kernels ------------------------------------------------------
//
// Row-major, double precision, single-threaded. The ikj / pki loop orders
// keep the inner loop contiguous so the compiler can vectorize; at the
// desk-scale shapes in this kit that is all the performance we need.

/// C (+)= A * B, A: m x k, B: k x n.
inline void gemm_nn(const Tensor& a, const Tensor& b, Tensor& c, bool accumulate) {
  if (a.cols != b.rows)
    throw ShapeError("gemm_nn: inner dims " + a.shape_str() + " * " + b.shape_str());
  const int64_t m = a.rows, k = a.cols, n = b.cols;
  if (!accumulate) {
    c.rows = m;
    c.cols = n;
    c.data.assign(static_cast<size_t>(m * n), 0.0);
  } else if (c.rows != m || c.cols != n) {
    throw ShapeError("gemm_nn: output shape " + c.shape_str());
  }
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = a.row_ptr(i);
    double* crow = c.row_ptr(i);
    for (int64_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b.row_ptr(p);
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

/// C (+)= A * B^T, A: m x k, B: n x k. B is transposed into a scratch buffer
/// so the accumulation runs through the vectorizable nn kernel; the copy is
/// negligible next to the multiply at these shapes.
inline void gemm_nt(const Tensor& a, const Tensor& b, Tensor& c, bool accumulate) {
  if (a.cols != b.cols)
    throw ShapeError("gemm_nt: inner dims " + a.shape_str() + " * " + b.shape_str() + "^T");
  Tensor bt(b.cols, b.rows);
  for (int64_t i = 0; i < b.rows; ++i) {
    const double* src = b.row_ptr(i);
    for (int64_t j = 0; j < b.cols; ++j) bt.at(j, i) = src[j];
  }
  if (!accumulate) {
    c.rows = a.rows;
    c.cols = b.rows;
    c.data.assign(static_cast<size_t>(a.rows * b.rows), 0.0);
  } else if (c.rows != a.rows || c.cols != b.rows) {
    throw ShapeError("gemm_nt: output shape " + c.shape_str());
  }
  gemm_nn(a, bt, c, true);
}

/// C (+)= A^T * B, A: k x m, B: k x n.
inline void gemm_tn(const Tensor& a, const Tensor& b, Tensor& c, bool accumulate) {
  if (a.rows != b.rows)
    throw ShapeError("gemm_tn: inner dims " + a.shape_str() + "^T * " + b.shape_str());
  const int64_t m = a.cols, k = a.rows, n = b.cols;
  if (!accumulate) {
    c.rows = m;
    c.cols = n;
    c.data.assign(static_cast<size_t>(m * n), 0.0);
  } else if (c.rows != m || c.cols != n) {
    throw ShapeError("gemm_tn: output shape " + c.shape_str());
  }
  for (int64_t p = 0; p < k; ++p) {
    const double* arow = a.row_ptr(p);
    const double* brow = b.row_ptr(p);
    for (int64_t i = 0; i < m; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* crow = c.row_ptr(i);
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace moelpr
