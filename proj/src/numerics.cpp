#include "spherefed/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "spherefed/errors.hpp"

namespace spherefed {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::string shape_of(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

constexpr double kPivotTolerance = 1e-12;
constexpr double kJitterScale = 1e-8;
constexpr double kSymmetryTolerance = 1e-9;

// Cholesky factor in place (lower triangle). Returns the failing pivot index
// or n on success.
std::size_t cholesky(Matrix& a) {
  const std::size_t n = a.rows();
  double max_diag = 0.0;
  for (std::size_t i = 0; i < n; ++i) max_diag = std::max(max_diag, std::abs(a(i, i)));
  const double tol = kPivotTolerance * max_diag;
  for (std::size_t j = 0; j < n; ++j) {
    double d = a(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= a(j, k) * a(j, k);
    if (!(d > tol)) return j;
    const double ljj = std::sqrt(d);
    a(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= a(i, k) * a(j, k);
      a(i, j) = s / ljj;
    }
  }
  return n;
}

Matrix cholesky_solve(const Matrix& l, const Matrix& b) {
  const std::size_t n = l.rows();
  const std::size_t m = b.cols();
  Matrix x = b;
  for (std::size_t c = 0; c < m; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = x(i, c);
      for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * x(k, c);
      x(i, c) = s / l(i, i);
    }
    for (std::size_t i = n; i-- > 0;) {
      double s = x(i, c);
      for (std::size_t k = i + 1; k < n; ++k) s -= l(k, i) * x(k, c);
      x(i, c) = s / l(i, i);
    }
  }
  return x;
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                     " does not match " + std::to_string(rows) + "x" +
                     std::to_string(cols));
  }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows)
    : rows_(rows.size()), cols_(rows.size() ? rows.begin()->size() : 0) {
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw ShapeError("ragged matrix literal");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::transpose() const {
  Matrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

double Matrix::trace() const {
  double t = 0.0;
  for (std::size_t i = 0; i < std::min(rows_, cols_); ++i) t += (*this)(i, i);
  return t;
}

Matrix& Matrix::operator+=(const Matrix& other) {
  if (rows_ != other.rows_ || cols_ != other.cols_) {
    throw ShapeError("cannot add " + shape_of(other) + " to " + shape_of(*this));
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

double max_abs(const Matrix& m) {
  double v = 0.0;
  for (double x : m.data()) v = std::max(v, std::abs(x));
  return v;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("cannot compare " + shape_of(a) + " with " + shape_of(b));
  }
  double v = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    v = std::max(v, std::abs(a.data()[i] - b.data()[i]));
  }
  return v;
}

bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(), [](double x) { return std::isfinite(x); });
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dot of vectors with different lengths");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(std::span<const double> v) { return std::sqrt(dot(v, v)); }

Rng::Rng(std::uint64_t seed, std::uint64_t stream)
    : seed_(seed),
      stream_(stream),
      engine_(splitmix64(splitmix64(seed) ^ (stream * 0xd1b54a32d192ed03ULL + 1))) {}

Rng Rng::child(std::uint64_t id) const {
  return Rng(seed_, splitmix64(stream_ ^ splitmix64(id + 0x632be59bd9b4e019ULL)));
}

double Rng::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

double Rng::uniform_open() {
  double u;
  do {
    u = uniform();
  } while (u == 0.0);
  return u;
}

double Rng::normal() {
  // Box-Muller, one value per call.
  const double u1 = uniform_open();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double Rng::log_gamma_variate(double shape) {
  if (!(shape > 0.0)) throw ParameterError("gamma shape must be positive");
  double boost = 0.0;
  if (shape < 1.0) {
    boost = std::log(uniform_open()) / shape;
    shape += 1.0;
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x;
    double v;
    do {
      x = normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = uniform_open();
    if (u < 1.0 - 0.0331 * x * x * x * x ||
        std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) {
      return std::log(d * v) + boost;
    }
  }
}

double Rng::gamma(double shape) { return std::exp(log_gamma_variate(shape)); }

std::size_t Rng::uniform_index(std::size_t n) {
  if (n == 0) throw ParameterError("uniform_index over an empty range");
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return static_cast<std::size_t>(x % bound);
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul " + shape_of(a) + " by " + shape_of(b));
  }
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out = c.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) out[j] += aik * brow[j];
    }
  }
  return c;
}

void outer_accumulate(Matrix& acc, std::span<const double> u, std::span<const double> v) {
  if (acc.rows() != u.size() || acc.cols() != v.size()) {
    throw ShapeError("outer_accumulate into " + shape_of(acc) + " with vectors of length " +
                     std::to_string(u.size()) + " and " + std::to_string(v.size()));
  }
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double ui = u[i];
    if (ui == 0.0) continue;
    auto row = acc.row(i);
    for (std::size_t j = 0; j < v.size(); ++j) row[j] += ui * v[j];
  }
}

Matrix orthonormal_rows(std::size_t c, std::size_t l, Rng& rng) {
  if (c > l) {
    throw CapacityError("cannot orthonormalize " + std::to_string(c) + " rows in dimension " +
                        std::to_string(l));
  }
  Matrix q(c, l);
  for (std::size_t i = 0; i < c; ++i) {
    auto v = q.row(i);
    for (;;) {
      for (double& x : v) x = rng.normal();
      const double initial = norm2(v);
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t j = 0; j < i; ++j) {
          auto qj = q.row(j);
          const double proj = dot(v, qj);
          for (std::size_t t = 0; t < l; ++t) v[t] -= proj * qj[t];
        }
      }
      const double n = norm2(v);
      // A draw almost inside the span of the previous rows is redrawn.
      if (n > 1e-6 * initial) {
        for (double& x : v) x /= n;
        break;
      }
    }
  }
  return q;
}

SpdSolution solve_spd(const Matrix& a, const Matrix& b, bool allow_jitter) {
  const std::size_t n = a.rows();
  if (a.cols() != n) throw ShapeError("solve_spd needs a square matrix, got " + shape_of(a));
  if (b.rows() != n) {
    throw ShapeError("solve_spd right-hand side " + shape_of(b) + " does not match " +
                     shape_of(a));
  }
  const double scale = std::max(max_abs(a), 1e-300);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (std::abs(a(i, j) - a(j, i)) > kSymmetryTolerance * scale) {
        throw ShapeError("solve_spd matrix is not symmetric at (" + std::to_string(i) + ", " +
                         std::to_string(j) + ")");
      }
    }
  }

  Matrix factor = a;
  std::size_t pivot = cholesky(factor);
  bool regularized = false;
  if (pivot != n) {
    if (!allow_jitter) {
      throw SingularError("matrix is not positive definite at pivot " + std::to_string(pivot),
                          pivot);
    }
    const double jitter = kJitterScale * a.trace() / static_cast<double>(n);
    factor = a;
    for (std::size_t i = 0; i < n; ++i) factor(i, i) += jitter;
    pivot = cholesky(factor);
    if (pivot != n) {
      throw SingularError("matrix is singular at pivot " + std::to_string(pivot) +
                              " even after diagonal jitter",
                          pivot);
    }
    regularized = true;
  }
  Matrix x = cholesky_solve(factor, b);
  if (!all_finite(x.data())) throw SingularError("solve produced non-finite values", n);
  return {std::move(x), regularized};
}

std::vector<double> dirichlet(double alpha, std::size_t k, Rng& rng) {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) {
    throw ParameterError("dirichlet concentration must be positive, got " + std::to_string(alpha));
  }
  if (k == 0) throw ParameterError("dirichlet needs at least one component");
  std::vector<double> p(k);
  for (auto& x : p) x = rng.log_gamma_variate(alpha);
  const double top = *std::max_element(p.begin(), p.end());
  double sum = 0.0;
  for (auto& x : p) {
    x = std::exp(x - top);
    sum += x;
  }
  for (auto& x : p) x /= sum;
  return p;
}

}  // namespace spherefed
