#pragma once

// Finite-difference check of the analytic backward pass on small random
// models. Shared by the unit tests and the acceptance suite.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "oracles.hpp"
#include "spherefed/model.hpp"

namespace gradcheck {

inline constexpr double kStep = 1e-5;
inline constexpr double kRelTol = 1e-6;
inline constexpr double kAbsFloor = 1e-8;

struct Result {
  double worst_rel = 0.0;   // largest relative error among checked entries
  std::size_t failures = 0;
  std::size_t checked = 0;
};

inline void compare(double analytic, double numeric, Result& r) {
  const double diff = std::abs(analytic - numeric);
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  ++r.checked;
  if (diff <= kAbsFloor) return;
  const double rel = diff / scale;
  r.worst_rel = std::max(r.worst_rel, rel);
  if (rel > kRelTol) ++r.failures;
}

// One random model (d <= 8, l <= 6, C <= 4, one hidden layer) and one random
// sample; checks every extractor and (trainable) head parameter.
inline Result check_model(std::uint64_t seed, spherefed::LossKind loss, bool normalize,
                          double tau = 1.0) {
  using namespace spherefed;
  Rng rng(seed);
  const std::size_t d = 3 + rng.uniform_index(6);
  const std::size_t h = 3 + rng.uniform_index(6);
  const std::size_t l = 2 + rng.uniform_index(5);
  const std::size_t c = 2 + rng.uniform_index(3);
  Rng init = rng.child(1);
  Model m = make_model({d, h, l}, c, HeadKind::kTrainable, normalize, tau, init);
  // Nonzero biases so every code path carries signal.
  for (double& p : m.extractor.params()) p += 0.05 * rng.normal();
  std::vector<double> x(d);
  for (double& v : x) v = rng.normal();
  const std::size_t y = rng.uniform_index(c);

  const auto trace = forward(m.extractor, m.head, x);
  const auto g = backward(trace, m.extractor, m.head, y, loss);

  auto loss_of = [&](const std::vector<double>& params, const Matrix& head) {
    const auto logits = oracle::forward_logits(m.extractor.dims(), params, head, normalize, tau, x);
    return loss == LossKind::kMse ? oracle::mse(logits, y) : oracle::cross_entropy(logits, y);
  };

  Result r;
  const std::vector<double> p = m.extractor.flatten();
  const auto num_ex = oracle::numeric_gradient(
      [&](const std::vector<double>& q) { return loss_of(q, m.head.weights); }, p, kStep);
  for (std::size_t i = 0; i < p.size(); ++i) compare(g.extractor[i], num_ex[i], r);

  const auto w = m.head.weights.data();
  const std::vector<double> wflat(w.begin(), w.end());
  const auto num_head = oracle::numeric_gradient(
      [&](const std::vector<double>& q) {
        return loss_of(p, Matrix(m.head.weights.rows(), m.head.weights.cols(), q));
      },
      wflat, kStep);
  for (std::size_t i = 0; i < wflat.size(); ++i) compare(g.head->data()[i], num_head[i], r);
  return r;
}

}  // namespace gradcheck
