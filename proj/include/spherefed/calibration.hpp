#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "spherefed/data.hpp"
#include "spherefed/model.hpp"
#include "spherefed/numerics.hpp"

namespace spherefed {

// Per-client second-moment statistics of normalized features:
//   V = sum_i z_i z_i^T   (l x l)
//   U = sum_i z_i one_hot(y_i)^T   (l x C)
struct CalibStats {
  Matrix v;
  Matrix u;
  std::uint64_t count = 0;

  std::size_t feature_dim() const noexcept { return v.rows(); }
  std::size_t num_classes() const noexcept { return u.cols(); }

  static CalibStats zeros(std::size_t l, std::size_t c);
};

struct CalibratedHead {
  Matrix weights;  // C x l, applied to normalized features
  double lambda = 0.0;
  bool regularized = false;
};

// Accumulates stats over data rows in the given order (ascending local index
// when called from a client). Features pass through the frozen extractor and
// are always normalized.
CalibStats client_stats(const MlpExtractor& extractor, const Dataset& data,
                        std::span<const std::size_t> indices);
CalibStats client_stats(const MlpExtractor& extractor, const Dataset& data);

// Same sums from precomputed normalized feature rows.
CalibStats stats_from_features(const Matrix& features, std::span<const std::size_t> labels,
                               std::size_t num_classes);

// Solves (sum V + lambda I) X = sum U and returns W* = X^T. Stats are summed
// in the order given. allow_jitter enables the diagonal-loading retry in
// solve_spd; without it a rank-deficient Gram raises SingularError.
CalibratedHead server_solve(std::span<const CalibStats> stats, double lambda,
                            bool allow_jitter = true);

// Personalized head from one client's data alone. Rank deficiency is
// reported rather than jittered away.
CalibratedHead local_calibrate(const MlpExtractor& extractor, const Dataset& data,
                               std::span<const std::size_t> indices, double lambda);

// Runs client_stats on every client of the partition (ascending client id)
// and server_solve on the result.
CalibratedHead calibrate_federated(const MlpExtractor& extractor, const Dataset& train,
                                   const std::vector<std::vector<std::size_t>>& clients,
                                   double lambda, std::vector<CalibStats>* uploaded = nullptr);

// Mean over samples of (1/C)||W z~ - one_hot(y)||^2 with features frozen.
double head_mse(const Matrix& weights, const Matrix& features, std::span<const std::size_t> labels);

Matrix normalized_features(const MlpExtractor& extractor, const Dataset& data);

struct FinetuneConfig {
  std::size_t epochs = 200;
  double lr = 0.5;
  double momentum = 0.9;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
};

// Pooled-data SGD on the MSE of a linear head over frozen normalized
// features, starting from initial. Test-only reference for server_solve.
Matrix oracle_finetune(const MlpExtractor& extractor, const Dataset& pooled, const Matrix& initial,
                       const FinetuneConfig& cfg);

// Upload payload: "SFCS" magic, u32 version, u32 l, u32 C, u64 count, then
// V and U row-major as little-endian f64.
inline constexpr std::size_t kCalibStatsHeaderBytes = 4 + 4 + 4 + 4 + 8;

std::vector<std::uint8_t> serialize(const CalibStats& stats);
CalibStats deserialize_stats(std::span<const std::uint8_t> bytes);

}  // namespace spherefed
