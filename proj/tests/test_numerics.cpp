#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "oracles.hpp"
#include "spherefed/errors.hpp"
#include "spherefed/numerics.hpp"

using namespace spherefed;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Matrix m(r, c);
  for (double& v : m.data()) v = rng.normal();
  return m;
}

Matrix random_spd(std::size_t n, Rng& rng) {
  const Matrix a = random_matrix(n + 3, n, rng);
  Matrix s = oracle::matmul(oracle::transpose(a), a);
  for (std::size_t i = 0; i < n; ++i) s(i, i) += 0.1;
  return s;
}

}  // namespace

TEST_CASE("matmul agrees exactly with the triple loop") {
  Rng rng(11);
  const Matrix a = random_matrix(7, 5, rng);
  const Matrix b = random_matrix(5, 9, rng);
  CHECK(matmul(a, b) == oracle::matmul(a, b));
  CHECK_THROWS_AS(matmul(a, a), ShapeError);
}

TEST_CASE("matrix basics") {
  const Matrix m{{1, 2, 3}, {4, 5, 6}};
  CHECK(m.transpose() == Matrix{{1, 4}, {2, 5}, {3, 6}});
  CHECK(Matrix::identity(3).trace() == 3.0);
  Matrix acc(2, 3);
  acc += m;
  acc += m;
  CHECK(acc(1, 2) == 12.0);
  CHECK_THROWS_AS(acc += Matrix(3, 2), ShapeError);
  CHECK_THROWS_AS(Matrix(2, 2, std::vector<double>(3)), ShapeError);
  CHECK(max_abs_diff(m, m) == 0.0);
  CHECK(norm2(std::vector<double>{3, 4}) == 5.0);
  CHECK_FALSE(all_finite(std::vector<double>{1.0, NAN}));
}

TEST_CASE("outer_accumulate adds u v^T") {
  Matrix acc(2, 3);
  outer_accumulate(acc, std::vector<double>{1, 2}, std::vector<double>{3, 4, 5});
  CHECK(acc == Matrix{{3, 4, 5}, {6, 8, 10}});
  CHECK_THROWS_AS(outer_accumulate(acc, std::vector<double>{1}, std::vector<double>{1, 2, 3}),
                  ShapeError);
}

TEST_CASE("rng is reproducible and children are order-insensitive") {
  Rng a(5, 2);
  Rng b(5, 2);
  for (int i = 0; i < 10; ++i) CHECK(a.next_u64() == b.next_u64());
  const Rng parent(9);
  Rng used = parent;
  used.normal();
  Rng c1 = parent.child(3);
  Rng c2 = Rng(9).child(3);
  CHECK(c1.next_u64() == c2.next_u64());
  CHECK(Rng(9).child(3).next_u64() != Rng(9).child(4).next_u64());
  CHECK(Rng(9, 1).next_u64() != Rng(9, 2).next_u64());
}

TEST_CASE("rng distributions have the right moments") {
  Rng rng(123);
  constexpr int kN = 200000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < kN; ++i) {
    const double u = rng.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
  }
  for (int i = 0; i < kN; ++i) {
    const double z = rng.normal();
    s += z;
    s2 += z * z;
  }
  CHECK(std::abs(s / kN) < 0.01);
  CHECK(std::abs(s2 / kN - 1.0) < 0.02);
  for (double shape : {0.05, 0.3, 1.0, 2.5}) {
    double m = 0.0;
    for (int i = 0; i < kN; ++i) m += rng.gamma(shape);
    m /= kN;
    // Gamma(shape) has mean shape and variance shape: 5 standard errors.
    CHECK(std::abs(m - shape) < 5.0 * std::sqrt(shape / kN));
  }
  CHECK_THROWS_AS(rng.gamma(0.0), ParameterError);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 70000; ++i) ++counts[rng.uniform_index(7)];
  for (int c : counts) CHECK(std::abs(c - 10000) < 500);
  CHECK_THROWS_AS(rng.uniform_index(0), ParameterError);
}

TEST_CASE("shuffle permutes") {
  Rng rng(3);
  std::vector<int> v(50);
  std::iota(v.begin(), v.end(), 0);
  auto w = v;
  rng.shuffle(std::span(w));
  CHECK(w != v);
  std::sort(w.begin(), w.end());
  CHECK(w == v);
}

TEST_CASE("dirichlet draws lie on the simplex with mean 1/k") {
  Rng rng(77);
  for (double alpha : {0.01, 0.1, 1.0, 50.0}) {
    std::vector<double> mean(6, 0.0);
    constexpr int kDraws = 20000;
    for (int i = 0; i < kDraws; ++i) {
      const auto p = dirichlet(alpha, 6, rng);
      double s = 0.0;
      for (std::size_t j = 0; j < p.size(); ++j) {
        REQUIRE(p[j] >= 0.0);
        s += p[j];
        mean[j] += p[j] / kDraws;
      }
      REQUIRE(std::abs(s - 1.0) < 1e-12);
    }
    // Var(p_j) = (1/k)(1 - 1/k) / (k alpha + 1); allow 5 standard errors.
    const double var = (1.0 / 6) * (5.0 / 6) / (6 * alpha + 1);
    for (double m : mean) CHECK(std::abs(m - 1.0 / 6) < 5.0 * std::sqrt(var / kDraws));
  }
  CHECK_THROWS_AS(dirichlet(0.0, 3, rng), ParameterError);
  CHECK_THROWS_AS(dirichlet(-1.0, 3, rng), ParameterError);
}

TEST_CASE("orthonormal_rows") {
  Rng rng(1);
  for (auto [c, l] : std::vector<std::pair<std::size_t, std::size_t>>{{10, 32}, {5, 5}, {1, 4}}) {
    const Matrix w = orthonormal_rows(c, l, rng);
    const Matrix g = oracle::matmul(w, oracle::transpose(w));
    CHECK(max_abs_diff(g, Matrix::identity(c)) < 1e-12);
  }
  CHECK_THROWS_AS(orthonormal_rows(6, 5, rng), CapacityError);
  Rng r1(4), r2(4);
  CHECK(orthonormal_rows(3, 8, r1) == orthonormal_rows(3, 8, r2));
}

TEST_CASE("solve_spd matches Gauss-Jordan") {
  Rng rng(8);
  for (std::size_t n : {1, 4, 17}) {
    const Matrix a = random_spd(n, rng);
    const Matrix b = random_matrix(n, 3, rng);
    const auto sol = solve_spd(a, b);
    CHECK_FALSE(sol.regularized);
    CHECK(max_abs_diff(sol.x, oracle::gauss_jordan_solve(a, b)) < 1e-10);
  }
}

TEST_CASE("solve_spd on singular and malformed systems") {
  // Rank one: the second pivot vanishes.
  const Matrix a{{1, 1}, {1, 1}};
  const Matrix b{{1}, {1}};
  try {
    solve_spd(a, b, false);
    FAIL("expected SingularError");
  } catch (const SingularError& e) {
    CHECK(e.pivot() == 1);
  }
  const auto jittered = solve_spd(a, b, true);
  CHECK(jittered.regularized);
  CHECK(all_finite(jittered.x.data()));
  CHECK_THROWS_AS(solve_spd(Matrix{{1, 2}, {0, 1}}, b), ShapeError);
  CHECK_THROWS_AS(solve_spd(Matrix(2, 3), b), ShapeError);
  CHECK_THROWS_AS(solve_spd(Matrix::identity(2), Matrix(3, 1)), ShapeError);
}
