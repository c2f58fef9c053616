#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <utility>
#include <vector>

namespace spherefed {

// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }
  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }

  Matrix transpose() const;
  double trace() const;

  Matrix& operator+=(const Matrix& other);

  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

double max_abs(const Matrix& m);
double max_abs_diff(const Matrix& a, const Matrix& b);
bool all_finite(std::span<const double> values);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> v);

// Deterministic seeded random source. A (seed, stream) pair fully determines
// the sequence; the distribution transforms are implemented here rather than
// taken from <random>, whose distributions are implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

  // Independent generator keyed by (seed, stream, id). Does not consume state,
  // so children may be derived in any order.
  Rng child(std::uint64_t id) const;

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }

  std::uint64_t next_u64() { return engine_(); }
  // Uniform on [0, 1) with 53 random bits.
  double uniform();
  // Uniform on (0, 1).
  double uniform_open();
  double normal();
  // Gamma(shape, 1) via Marsaglia-Tsang; shape < 1 uses the U^(1/shape) boost.
  double gamma(double shape);
  // log of a Gamma(shape, 1) draw; stays finite for tiny shapes where the
  // draw itself underflows.
  double log_gamma_variate(double shape);
  // Uniform integer on [0, n), unbiased.
  std::size_t uniform_index(std::size_t n);

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = uniform_index(i);
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::mt19937_64 engine_;
};

// a * b with a fixed i-k-j loop order.
Matrix matmul(const Matrix& a, const Matrix& b);

// acc += u v^T.
void outer_accumulate(Matrix& acc, std::span<const double> u, std::span<const double> v);

// c x l matrix with orthonormal rows: Gram-Schmidt with one
// re-orthogonalization pass over a Gaussian matrix.
Matrix orthonormal_rows(std::size_t c, std::size_t l, Rng& rng);

struct SpdSolution {
  Matrix x;
  bool regularized = false;
};

// Solves a x = b for symmetric positive definite a by Cholesky. When the
// factorization fails and allow_jitter is set, retries once on
// a + 1e-8 * tr(a) / n * I and marks the result regularized.
SpdSolution solve_spd(const Matrix& a, const Matrix& b, bool allow_jitter = true);

// Symmetric Dirichlet(alpha, ..., alpha) draw of length k.
std::vector<double> dirichlet(double alpha, std::size_t k, Rng& rng);

}  // namespace spherefed
