#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "pdprune/errors.hpp"

namespace pdprune {

using Vec = std::vector<double>;

// Dense row-major matrix; shapes here are tiny so plain loops are enough.
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<double> a;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), a(static_cast<std::size_t>(r) * c, 0.0) {}

  double& operator()(int r, int c) { return a[static_cast<std::size_t>(r) * cols + c]; }
  double operator()(int r, int c) const { return a[static_cast<std::size_t>(r) * cols + c]; }

  const double* row(int r) const { return a.data() + static_cast<std::size_t>(r) * cols; }
  double* row(int r) { return a.data() + static_cast<std::size_t>(r) * cols; }

  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
  friend bool operator==(const Mat& x, const Mat& y) {
    return x.rows == y.rows && x.cols == y.cols && x.a == y.a;
  }
};

inline double dot(const double* x, const double* y, int n) {
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += x[i] * y[i];
  return s;
}

// out[r,:] = x[r,:] * w  (x: n×k, w: k×m)
inline Mat matmul(const Mat& x, const Mat& w) {
  Mat out(x.rows, w.cols);
  for (int r = 0; r < x.rows; ++r) {
    for (int k = 0; k < x.cols; ++k) {
      double v = x(r, k);
      if (v == 0.0) continue;
      const double* wr = w.row(k);
      double* or_ = out.row(r);
      for (int c = 0; c < w.cols; ++c) or_[c] += v * wr[c];
    }
  }
  return out;
}

inline double norm2(const double* x, int n) { return std::sqrt(dot(x, x, n)); }

inline double frob_norm(const Mat& m) {
  double s = 0.0;
  for (double v : m.a) s += v * v;
  return std::sqrt(s);
}

inline double cosine(const double* x, const double* y, int n) {
  double nx = norm2(x, n);
  double ny = norm2(y, n);
  if (nx == 0.0 || ny == 0.0)
    throw DegenerateInputError("cosine: zero-norm hidden vector");
  return dot(x, y, n) / (nx * ny);
}

// In-place softmax over n entries.
inline void softmax_inplace(double* x, int n) {
  double mx = x[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  double z = 0.0;
  for (int i = 0; i < n; ++i) {
    x[i] = std::exp(x[i] - mx);
    z += x[i];
  }
  for (int i = 0; i < n; ++i) x[i] /= z;
}

inline bool all_finite(const Mat& m) {
  for (double v : m.a)
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace pdprune
