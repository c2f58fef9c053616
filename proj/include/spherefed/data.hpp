#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "spherefed/numerics.hpp"

namespace spherefed {

struct Dataset {
  Matrix features;  // N x d
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t dim() const noexcept { return features.cols(); }
};

// Throws unless labels are in range, rows are finite and N >= 1. With
// require_all_classes every class must be present.
void validate(const Dataset& ds, bool require_all_classes);

Dataset subset(const Dataset& ds, std::span<const std::size_t> indices);

// K disjoint index lists covering [0, N). alpha == nullopt marks an exact
// IID split.
struct Partition {
  std::vector<std::vector<std::size_t>> assignments;
  std::optional<double> alpha;

  std::size_t num_clients() const noexcept { return assignments.size(); }
};

// Class means used by make_synthetic: orthonormal rows scaled by 3.
Matrix synthetic_means(std::size_t classes, std::size_t dim, Rng rng);

// Gaussian blobs around mutually orthogonal means. Samples are class-major.
Dataset make_synthetic(std::size_t classes, std::size_t dim, std::size_t per_class,
                       double spread, const Rng& rng);

// MNIST-style IDX files (0x00000803 images, 0x00000801 labels), pixels scaled
// to [0, 1].
Dataset load_idx(const std::filesystem::path& images_path,
                 const std::filesystem::path& labels_path, std::size_t num_classes = 10);

// Per-class Dirichlet over clients: each class's shuffled indices are split
// contiguously by Dir(alpha) proportions with largest-remainder rounding.
// Empty clients then take one sample each from the current largest client.
Partition partition_dirichlet(const Dataset& ds, std::size_t k, double alpha, const Rng& rng);

// Balanced split: every client's per-class count is within 1 of N_c / K.
Partition partition_iid(const Dataset& ds, std::size_t k, const Rng& rng);

Partition make_partition(const Dataset& ds, std::size_t k, std::optional<double> alpha,
                         const Rng& rng);

using ClassHistogram = std::vector<std::vector<std::size_t>>;  // K x C

ClassHistogram partition_stats(const Partition& p, const Dataset& ds);

// Throws ConsistencyError unless p is a set partition of [0, n) with no empty
// client.
void check_partition(const Partition& p, std::size_t n);

struct HoldoutSplit {
  std::vector<std::size_t> kept;
  std::vector<std::size_t> held_out;
};

// Stratified seeded split; round(fraction * N_c) samples of each class are
// held out. Both lists come back sorted.
HoldoutSplit stratified_holdout(const Dataset& ds, double fraction, const Rng& rng);

// Same, restricted to the given indices (used for per-client local test sets).
HoldoutSplit stratified_holdout(const Dataset& ds, std::span<const std::size_t> indices,
                                double fraction, const Rng& rng);

}  // namespace spherefed
