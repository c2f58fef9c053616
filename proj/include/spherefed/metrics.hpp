#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "spherefed/data.hpp"
#include "spherefed/model.hpp"
#include "spherefed/numerics.hpp"

namespace spherefed {

// Disparity between client classifiers: mean cosine between the same class's
// weight vector on two different clients, and mean absolute difference of
// their norms. Means run over every class and every unordered client pair.
struct AlignmentStats {
  double mean_cosine = 1.0;
  double mean_norm_diff = 0.0;
  std::vector<double> class_cosine;     // per class
  std::vector<double> class_norm_diff;  // per class
  std::size_t skipped = 0;              // pairs with a zero-norm row (cosine undefined)
};

AlignmentStats classifier_alignment(std::span<const Matrix> heads);

double accuracy(const Model& model, const Dataset& eval);
// Accuracy of an arbitrary head matrix on normalized features of the extractor.
double accuracy_with_head(const MlpExtractor& extractor, const Matrix& head_weights,
                          const Dataset& eval);

enum class CostStrategy { kTrainableHead, kFixedHeadFfc };

struct CommCost {
  std::uint64_t per_client = 0;
  std::uint64_t total = 0;
};

// Classifier-related traffic. A trainable head moves l*C parameters down and
// up every round; the fixed head never moves and FFC uploads l*(l+C)
// parameters once.
CommCost cost_classifier_comm(CostStrategy strategy, std::size_t l, std::size_t c, std::size_t k,
                              std::size_t rounds, std::size_t bytes_per_param = 4);

struct FfcFlops {
  std::vector<std::uint64_t> per_client;  // 2 l |D_k| (l + C)
  std::uint64_t client_total = 0;
  double server = 0.0;  // Cholesky 2/3 l^3 plus 2 l^2 C for the solves
};

FfcFlops cost_ffc_flops(std::size_t l, std::size_t c, std::span<const std::size_t> dataset_sizes);

// FLOPs spent on a trainable head by one client in one round, counting a
// multiply and an add as two: gradient outer products per sample and the
// momentum update per step. The head forward pass is excluded.
std::uint64_t trainable_head_client_flops(std::size_t l, std::size_t c, std::size_t samples_seen,
                                          std::size_t steps);
// Server side: weighted accumulation of each received head.
std::uint64_t trainable_head_server_flops(std::size_t l, std::size_t c, std::size_t clients);

// Single-writer accumulator of classifier costs over a run.
class CostLedger {
 public:
  CostLedger() = default;
  CostLedger(std::string strategy, std::size_t num_clients);

  void add_client(std::size_t client, std::uint64_t upload_bytes, std::uint64_t download_bytes,
                  std::uint64_t flops);
  void add_server(double flops);

  const std::string& strategy() const noexcept { return strategy_; }
  std::uint64_t upload_bytes(std::size_t client) const { return upload_[client]; }
  std::uint64_t download_bytes(std::size_t client) const { return download_[client]; }
  std::uint64_t client_flops(std::size_t client) const { return client_flops_[client]; }
  std::uint64_t total_upload_bytes() const;
  std::uint64_t total_download_bytes() const;
  std::uint64_t total_client_flops() const;
  double server_flops() const noexcept { return server_flops_; }
  std::size_t num_clients() const noexcept { return upload_.size(); }

 private:
  std::string strategy_;
  std::vector<std::uint64_t> upload_;
  std::vector<std::uint64_t> download_;
  std::vector<std::uint64_t> client_flops_;
  double server_flops_ = 0.0;
};

enum class FeatureFormat { kText, kBinary };

struct FeatureDump {
  std::size_t feature_dim = 0;
  std::size_t num_classes = 0;
  std::size_t num_clients = 0;
  std::vector<std::size_t> client_ids;
  std::vector<std::size_t> labels;
  Matrix features;  // normalized, one row per record
};

// Writes normalized features with their labels and owning client. Text form:
// header "l C K", then "client label f_1 ... f_l" per line with round-trip
// precision. Binary form: "SFFD", u64 l, C, K, N, then per record u64 client,
// u64 label, l f64.
void dump_features(const MlpExtractor& extractor, const Dataset& data,
                   std::span<const std::size_t> indices, std::span<const std::size_t> client_ids,
                   std::size_t num_clients, const std::filesystem::path& path,
                   FeatureFormat format);

FeatureDump read_features(const std::filesystem::path& path);

}  // namespace spherefed
