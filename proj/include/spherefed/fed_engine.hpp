#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "spherefed/calibration.hpp"
#include "spherefed/data.hpp"
#include "spherefed/metrics.hpp"
#include "spherefed/model.hpp"
#include "spherefed/numerics.hpp"

namespace spherefed {

enum class Strategy { kFedAvg, kFedProx, kFedNova, kFedOpt };

enum class CalibrationMode { kOff, kOnce, kEvery };

struct CalibrationConfig {
  CalibrationMode mode = CalibrationMode::kOff;
  std::size_t every = 10;
  double lambda = 0.0;
};

struct FedConfig {
  Strategy strategy = Strategy::kFedAvg;
  std::size_t rounds = 40;
  std::size_t local_epochs = 5;
  std::size_t batch_size = 64;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-5;
  ScheduleKind schedule = ScheduleKind::kCosine;
  std::vector<std::size_t> milestones;
  double gamma = 0.1;
  double prox_mu = 0.0;          // FedProx
  double server_lr = 1.0;        // FedOpt
  double server_momentum = 0.0;  // FedOpt
  double participation = 1.0;
  LossKind loss = LossKind::kMse;
  CalibrationConfig calibration;
  std::size_t bytes_per_param = 4;  // cost-ledger convention
  std::size_t threads = 1;
  std::uint64_t seed = 0;
};

// Throws ParameterError on an unusable configuration.
void validate(const FedConfig& cfg);

struct ClientState {
  std::size_t id = 0;
  std::vector<std::size_t> indices;  // into the training set, ascending
  Rng rng{0};

  std::size_t num_samples() const noexcept { return indices.size(); }
};

std::vector<ClientState> make_clients(const Partition& partition, std::uint64_t seed);

struct ClientUpdate {
  std::size_t client_id = 0;
  Model model;
  std::size_t num_samples = 0;
  std::size_t steps = 0;
  double train_loss = 0.0;  // mean mini-batch loss over all local steps
};

// E epochs of mini-batch SGD from the global model. The batch order is
// reseeded from (seed, round, client, epoch); the last partial batch is kept.
ClientUpdate local_train(const ClientState& client, const Dataset& train, const Model& global,
                         const FedConfig& cfg, std::size_t round);

// Parameters the server aggregates: extractor, then head weights when the
// head is trainable.
std::vector<double> trainable_params(const Model& model);
void set_trainable_params(Model& model, std::span<const double> flat);

struct ServerState {
  std::vector<double> momentum;  // FedOpt buffer
};

// FedNova's effective step count for tau local steps under momentum m.
double fednova_effective_steps(std::size_t tau, double momentum);

// Combines client updates (in the order given) into the next global model.
Model aggregate(std::span<const ClientUpdate> updates, const Model& global, const FedConfig& cfg,
                ServerState& server);

struct CostDelta {
  std::uint64_t upload_bytes = 0;
  std::uint64_t download_bytes = 0;
  std::uint64_t client_flops = 0;
  double server_flops = 0.0;
};

struct RoundReport {
  std::size_t round = 0;
  double test_accuracy = 0.0;
  double train_loss = 0.0;
  std::optional<AlignmentStats> alignment;  // absent with fewer than two clients
  CostDelta cost;
  std::vector<std::size_t> selected;
};

struct CalibrationEvent {
  std::size_t round = 0;  // rounds completed when it ran
  double accuracy_before = 0.0;
  double accuracy_after = 0.0;
  double lambda = 0.0;
  bool regularized = false;
  std::uint64_t payload_bytes = 0;  // serialized V/U bodies over all clients
  CostDelta cost;
};

struct RunResult {
  std::vector<RoundReport> rounds;
  std::vector<CalibrationEvent> calibrations;
  Model final_model;
  Model pre_calibration_model;  // global model just before the last calibration
  CostLedger ledger;
  double accuracy_before_calibration = 0.0;
  double final_accuracy = 0.0;
};

struct RunHooks {
  std::function<void(const RoundReport&)> on_round;
  std::function<void(const CalibrationEvent&)> on_calibration;
};

// Sorted ceil(rate * K) distinct client ids for a round.
std::vector<std::size_t> sample_clients(std::size_t k, double rate, const Rng& rng);

// Runs R rounds of sample / broadcast / local_train / aggregate / evaluate,
// with optional periodic or final calibration of the head.
RunResult run(const Dataset& train, const Dataset& test, const Partition& partition,
              const FedConfig& cfg, const Model& init, const RunHooks& hooks = {});

// Calls fn(i) for i in [0, n), on up to threads workers.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

}  // namespace spherefed
