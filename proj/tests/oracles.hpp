#pragma once

// Reference implementations used only by the tests. They are written for
// clarity, share no code with the library, and are slow on purpose.

#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "spherefed/model.hpp"
#include "spherefed/numerics.hpp"

namespace oracle {

using spherefed::Matrix;

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      out(i, j) = s;
    }
  return out;
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

// Gauss-Jordan elimination with partial pivoting: returns a^-1 b.
inline Matrix gauss_jordan_solve(Matrix a, Matrix b) {
  const std::size_t n = a.rows();
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(a(r, col)) > std::abs(a(piv, col))) piv = r;
    if (a(piv, col) == 0.0) throw std::runtime_error("oracle: singular system");
    for (std::size_t j = 0; j < n; ++j) std::swap(a(col, j), a(piv, j));
    for (std::size_t j = 0; j < b.cols(); ++j) std::swap(b(col, j), b(piv, j));
    const double d = a(col, col);
    for (std::size_t j = 0; j < n; ++j) a(col, j) /= d;
    for (std::size_t j = 0; j < b.cols(); ++j) b(col, j) /= d;
    for (std::size_t r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = a(r, col);
      if (f == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) a(r, j) -= f * a(col, j);
      for (std::size_t j = 0; j < b.cols(); ++j) b(r, j) -= f * b(col, j);
    }
  }
  return b;
}

// Centralized ridge fit of one-hot targets on already normalized feature rows:
// W = ((Z^T Z + lambda I)^-1 Z^T Y)^T.
inline Matrix centralized_ffc(const Matrix& z, const std::vector<std::size_t>& labels,
                              std::size_t classes, double lambda) {
  Matrix y(z.rows(), classes);
  for (std::size_t i = 0; i < labels.size(); ++i) y(i, labels[i]) = 1.0;
  const Matrix zt = oracle::transpose(z);
  Matrix gram = oracle::matmul(zt, z);
  for (std::size_t i = 0; i < gram.rows(); ++i) gram(i, i) += lambda;
  return oracle::transpose(gauss_jordan_solve(gram, oracle::matmul(zt, y)));
}

// Plain re-implementation of the forward pass and losses, used for finite
// differences so the gradient check never calls library forward code.
inline std::vector<double> forward_logits(const std::vector<std::size_t>& dims,
                                          const std::vector<double>& params, const Matrix& head,
                                          bool normalize, double tau,
                                          const std::vector<double>& x) {
  std::vector<double> a = x;
  std::size_t off = 0;
  for (std::size_t layer = 0; layer + 1 < dims.size(); ++layer) {
    const std::size_t in = dims[layer];
    const std::size_t out = dims[layer + 1];
    std::vector<double> next(out);
    for (std::size_t o = 0; o < out; ++o) {
      double s = params[off + in * out + o];
      for (std::size_t i = 0; i < in; ++i) s += params[off + o * in + i] * a[i];
      const bool last = layer + 2 == dims.size();
      next[o] = last ? s : std::max(0.0, s);
    }
    off += in * out + out;
    a = std::move(next);
  }
  if (normalize) {
    double n = 0.0;
    for (double v : a) n += v * v;
    n = std::max(std::sqrt(n), 1e-12);
    for (double& v : a) v /= n;
  }
  std::vector<double> logits(head.rows());
  for (std::size_t c = 0; c < head.rows(); ++c) {
    double s = 0.0;
    for (std::size_t j = 0; j < head.cols(); ++j) s += head(c, j) * a[j];
    logits[c] = tau * s;
  }
  return logits;
}

inline double mse(const std::vector<double>& logits, std::size_t y) {
  double s = 0.0;
  for (std::size_t c = 0; c < logits.size(); ++c) {
    const double d = logits[c] - (c == y ? 1.0 : 0.0);
    s += d * d;
  }
  return s / static_cast<double>(logits.size());
}

inline double cross_entropy(const std::vector<double>& logits, std::size_t y) {
  double m = logits[0];
  for (double v : logits) m = std::max(m, v);
  double s = 0.0;
  for (double v : logits) s += std::exp(v - m);
  return -(logits[y] - m - std::log(s));
}

// Central difference of f at every coordinate of x.
inline std::vector<double> numeric_gradient(const std::function<double(const std::vector<double>&)>& f,
                                            std::vector<double> x, double h) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

struct Alignment {
  double cosine = 0.0;
  double norm_diff = 0.0;
};

// Straight double loop over classes and unordered client pairs.
inline Alignment brute_force_alignment(const std::vector<Matrix>& heads) {
  double cs = 0.0;
  double nd = 0.0;
  std::size_t n = 0;
  for (std::size_t c = 0; c < heads[0].rows(); ++c)
    for (std::size_t a = 0; a < heads.size(); ++a)
      for (std::size_t b = a + 1; b < heads.size(); ++b) {
        double ab = 0.0, aa = 0.0, bb = 0.0;
        for (std::size_t j = 0; j < heads[0].cols(); ++j) {
          ab += heads[a](c, j) * heads[b](c, j);
          aa += heads[a](c, j) * heads[a](c, j);
          bb += heads[b](c, j) * heads[b](c, j);
        }
        cs += ab / (std::sqrt(aa) * std::sqrt(bb));
        nd += std::abs(std::sqrt(aa) - std::sqrt(bb));
        ++n;
      }
  return {cs / static_cast<double>(n), nd / static_cast<double>(n)};
}

}  // namespace oracle
