#include "spherefed/fed_engine.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <string>
#include <thread>

#include "spherefed/errors.hpp"

namespace spherefed {

namespace {

constexpr std::uint64_t kClientStream = 0xC11E;
constexpr std::uint64_t kSamplingStream = 0x5A3B;

const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kFedAvg: return "fedavg";
    case Strategy::kFedProx: return "fedprox";
    case Strategy::kFedNova: return "fednova";
    case Strategy::kFedOpt: return "fedopt";
  }
  return "unknown";
}

void add_proximal_term(Gradients& grads, const Model& local, const Model& global, double mu) {
  const auto p = local.extractor.params();
  const auto g = global.extractor.params();
  for (std::size_t i = 0; i < p.size(); ++i) grads.extractor[i] += mu * (p[i] - g[i]);
  if (grads.head) {
    const auto hp = local.head.weights.data();
    const auto hg = global.head.weights.data();
    auto out = grads.head->data();
    for (std::size_t i = 0; i < hp.size(); ++i) out[i] += mu * (hp[i] - hg[i]);
  }
}

}  // namespace

void validate(const FedConfig& cfg) {
  if (cfg.batch_size == 0) throw ParameterError("batch_size must be positive");
  if (!(cfg.lr >= 0.0)) throw ParameterError("lr must be nonnegative");
  if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) throw ParameterError("momentum must be in [0, 1)");
  if (!(cfg.weight_decay >= 0.0)) throw ParameterError("weight_decay must be nonnegative");
  if (!(cfg.prox_mu >= 0.0)) throw ParameterError("prox_mu must be nonnegative");
  if (!(cfg.participation > 0.0 && cfg.participation <= 1.0)) {
    throw ParameterError("participation rate must be in (0, 1]");
  }
  if (!(cfg.server_momentum >= 0.0 && cfg.server_momentum < 1.0)) {
    throw ParameterError("server_momentum must be in [0, 1)");
  }
  if (cfg.calibration.mode == CalibrationMode::kEvery && cfg.calibration.every == 0) {
    throw ParameterError("calibration interval must be at least 1");
  }
  if (!(cfg.calibration.lambda >= 0.0)) throw ParameterError("lambda must be nonnegative");
}

std::vector<ClientState> make_clients(const Partition& partition, std::uint64_t seed) {
  const Rng base(seed, kClientStream);
  std::vector<ClientState> clients;
  clients.reserve(partition.num_clients());
  for (std::size_t k = 0; k < partition.num_clients(); ++k) {
    clients.push_back(ClientState{k, partition.assignments[k], base.child(k)});
  }
  return clients;
}

ClientUpdate local_train(const ClientState& client, const Dataset& train, const Model& global,
                         const FedConfig& cfg, std::size_t round) {
  if (client.indices.empty()) throw InputError("client " + std::to_string(client.id) + " has no data");
  ClientUpdate up;
  up.client_id = client.id;
  up.model = global;
  up.num_samples = client.num_samples();
  const double lr = cfg.rounds > 0
                        ? lr_schedule(cfg.schedule, round, cfg.rounds, cfg.lr, cfg.milestones, cfg.gamma)
                        : cfg.lr;
  const SgdConfig sgd{lr, cfg.momentum, cfg.weight_decay};
  const bool proximal = cfg.strategy == Strategy::kFedProx && cfg.prox_mu != 0.0;

  SgdState state = SgdState::zeros_like(up.model);
  Gradients grads = Gradients::zeros_like(up.model);
  std::vector<std::size_t> order = client.indices;
  const Rng round_rng = client.rng.child(round);
  double loss_sum = 0.0;
  for (std::size_t epoch = 0; epoch < cfg.local_epochs; ++epoch) {
    Rng epoch_rng = round_rng.child(epoch);
    epoch_rng.shuffle(std::span(order));
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const std::span<const std::size_t> batch(order.data() + start, end - start);
      loss_sum += batch_gradient(up.model, train.features, train.labels, batch, cfg.loss, grads);
      if (proximal) add_proximal_term(grads, up.model, global, cfg.prox_mu);
      sgd_step(up.model, grads, sgd, state);
      ++up.steps;
    }
  }
  up.train_loss = up.steps ? loss_sum / static_cast<double>(up.steps) : 0.0;
  return up;
}

std::vector<double> trainable_params(const Model& model) {
  std::vector<double> flat = model.extractor.flatten();
  if (!model.head.fixed) {
    const auto w = model.head.weights.data();
    flat.insert(flat.end(), w.begin(), w.end());
  }
  return flat;
}

void set_trainable_params(Model& model, std::span<const double> flat) {
  const std::size_t n = model.extractor.num_params();
  const std::size_t h = model.head.fixed ? 0 : model.head.weights.size();
  if (flat.size() != n + h) throw ShapeError("flat parameter vector has the wrong length");
  model.extractor.unflatten(flat.first(n));
  if (h) std::copy(flat.begin() + static_cast<std::ptrdiff_t>(n), flat.end(),
                   model.head.weights.data().begin());
}

double fednova_effective_steps(std::size_t tau, double momentum) {
  const double t = static_cast<double>(tau);
  if (momentum == 0.0) return t;
  const double m = momentum;
  return (t - m * (1.0 - std::pow(m, t)) / (1.0 - m)) / (1.0 - m);
}

Model aggregate(std::span<const ClientUpdate> updates, const Model& global, const FedConfig& cfg,
                ServerState& server) {
  if (updates.empty()) throw ProtocolError("aggregate received no client updates");
  const std::vector<double> g = trainable_params(global);
  std::vector<std::vector<double>> locals;
  locals.reserve(updates.size());
  double total = 0.0;
  for (const auto& u : updates) {
    if (u.model.extractor.dims() != global.extractor.dims() ||
        u.model.head.fixed != global.head.fixed ||
        u.model.head.weights.rows() != global.head.weights.rows() ||
        u.model.head.weights.cols() != global.head.weights.cols()) {
      throw ProtocolError("client " + std::to_string(u.client_id) +
                          " sent a model whose shape differs from the global model");
    }
    locals.push_back(trainable_params(u.model));
    total += static_cast<double>(u.num_samples);
  }
  if (!(total > 0.0)) throw ProtocolError("client updates carry no samples");

  std::vector<double> weights;
  for (const auto& u : updates) weights.push_back(static_cast<double>(u.num_samples) / total);

  std::vector<double> next(g.size(), 0.0);
  switch (cfg.strategy) {
    case Strategy::kFedAvg:
    case Strategy::kFedProx:
      for (std::size_t k = 0; k < locals.size(); ++k)
        for (std::size_t j = 0; j < g.size(); ++j) next[j] += weights[k] * locals[k][j];
      break;
    case Strategy::kFedNova: {
      std::vector<double> direction(g.size(), 0.0);
      double tau_eff = 0.0;
      for (std::size_t k = 0; k < locals.size(); ++k) {
        const double a = fednova_effective_steps(updates[k].steps, cfg.momentum);
        tau_eff += weights[k] * a;
        if (a == 0.0) continue;
        for (std::size_t j = 0; j < g.size(); ++j) {
          direction[j] += weights[k] * (g[j] - locals[k][j]) / a;
        }
      }
      for (std::size_t j = 0; j < g.size(); ++j) next[j] = g[j] - tau_eff * direction[j];
      break;
    }
    case Strategy::kFedOpt: {
      std::vector<double> mean(g.size(), 0.0);
      for (std::size_t k = 0; k < locals.size(); ++k)
        for (std::size_t j = 0; j < g.size(); ++j) mean[j] += weights[k] * locals[k][j];
      if (server.momentum.size() != g.size()) server.momentum.assign(g.size(), 0.0);
      for (std::size_t j = 0; j < g.size(); ++j) {
        server.momentum[j] = cfg.server_momentum * server.momentum[j] + (mean[j] - g[j]);
        next[j] = g[j] + cfg.server_lr * server.momentum[j];
      }
      break;
    }
  }
  Model out = global;
  set_trainable_params(out, next);
  return out;
}

std::vector<std::size_t> sample_clients(std::size_t k, double rate, const Rng& rng) {
  if (k == 0) throw ParameterError("no clients to sample");
  if (!(rate > 0.0 && rate <= 1.0)) throw ParameterError("participation rate must be in (0, 1]");
  auto m = static_cast<std::size_t>(std::ceil(rate * static_cast<double>(k) - 1e-9));
  m = std::clamp<std::size_t>(m, 1, k);
  std::vector<std::size_t> ids(k);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  if (m < k) {
    Rng r = rng;
    for (std::size_t i = 0; i < m; ++i) {
      const std::size_t j = i + r.uniform_index(k - i);
      std::swap(ids[i], ids[j]);
    }
    ids.resize(m);
    std::sort(ids.begin(), ids.end());
  }
  return ids;
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::jthread> workers;
  const std::size_t count = std::min(threads, n);
  for (std::size_t t = 0; t < count; ++t) {
    workers.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  workers.clear();
  if (failure) std::rethrow_exception(failure);
}

RunResult run(const Dataset& train, const Dataset& test, const Partition& partition,
              const FedConfig& cfg, const Model& init, const RunHooks& hooks) {
  validate(cfg);
  check_partition(partition, train.size());
  if (init.extractor.input_dim() != train.dim()) {
    throw ShapeError("model input width " + std::to_string(init.extractor.input_dim()) +
                     " does not match data width " + std::to_string(train.dim()));
  }
  if (init.head.num_classes() != train.num_classes) {
    throw ShapeError("head has " + std::to_string(init.head.num_classes()) +
                     " classes but the data has " + std::to_string(train.num_classes));
  }

  const auto clients = make_clients(partition, cfg.seed);
  const std::size_t k = clients.size();
  const std::size_t l = init.head.feature_dim();
  const std::size_t c = init.head.num_classes();
  const std::uint64_t head_bytes = std::uint64_t{l} * c * cfg.bytes_per_param;
  const Rng sampler(cfg.seed, kSamplingStream);

  RunResult result;
  result.ledger = CostLedger(strategy_name(cfg.strategy), k);
  Model global = init;
  ServerState server;

  auto calibrate = [&](std::size_t rounds_done) {
    CalibrationEvent ev;
    ev.round = rounds_done;
    ev.lambda = cfg.calibration.lambda;
    ev.accuracy_before = accuracy(global, test);
    std::vector<CalibStats> stats;
    stats.reserve(k);
    for (const auto& client : clients) {
      stats.push_back(client_stats(global.extractor, train, client.indices));
      const auto payload = serialize(stats.back());
      const std::uint64_t body = payload.size() - kCalibStatsHeaderBytes;
      ev.payload_bytes += body;
      const std::uint64_t upload = body / sizeof(double) * cfg.bytes_per_param;
      const std::uint64_t flops = 2ULL * l * client.num_samples() * (l + c);
      result.ledger.add_client(client.id, upload, 0, flops);
      ev.cost.upload_bytes += upload;
      ev.cost.client_flops += flops;
    }
    CalibratedHead solved;
    try {
      solved = server_solve(stats, cfg.calibration.lambda);
    } catch (const std::exception& e) {
      throw RunError("calibration after round " + std::to_string(rounds_done) + ": " + e.what());
    }
    std::vector<std::size_t> sizes;
    for (const auto& client : clients) sizes.push_back(client.num_samples());
    ev.cost.server_flops = cost_ffc_flops(l, c, sizes).server;
    result.ledger.add_server(ev.cost.server_flops);
    ev.regularized = solved.regularized;
    result.pre_calibration_model = global;
    global.head = ClassifierHead{std::move(solved.weights), true, true, 1.0};
    ev.accuracy_after = accuracy(global, test);
    result.accuracy_before_calibration = ev.accuracy_before;
    result.calibrations.push_back(ev);
    if (hooks.on_calibration) hooks.on_calibration(ev);
  };

  std::size_t last_calibrated = SIZE_MAX;
  for (std::size_t r = 0; r < cfg.rounds; ++r) {
    RoundReport report;
    report.round = r;
    report.selected = sample_clients(k, cfg.participation, sampler.child(r));

    std::vector<ClientUpdate> updates(report.selected.size());
    parallel_for(updates.size(), cfg.threads, [&](std::size_t i) {
      const auto& client = clients[report.selected[i]];
      try {
        updates[i] = local_train(client, train, global, cfg, r);
      } catch (const std::exception& e) {
        throw RunError("round " + std::to_string(r) + ", client " + std::to_string(client.id) +
                       ": " + e.what());
      }
    });

    if (updates.size() >= 2) {
      std::vector<Matrix> heads;
      heads.reserve(updates.size());
      for (const auto& u : updates) heads.push_back(u.model.head.weights);
      report.alignment = classifier_alignment(heads);
    }

    double loss = 0.0;
    double seen = 0.0;
    for (const auto& u : updates) {
      loss += u.train_loss * static_cast<double>(u.num_samples);
      seen += static_cast<double>(u.num_samples);
      if (!global.head.fixed) {
        const std::uint64_t flops =
            trainable_head_client_flops(l, c, u.num_samples * cfg.local_epochs, u.steps);
        result.ledger.add_client(u.client_id, head_bytes, head_bytes, flops);
        report.cost.upload_bytes += head_bytes;
        report.cost.download_bytes += head_bytes;
        report.cost.client_flops += flops;
      }
    }
    report.train_loss = loss / seen;
    if (!global.head.fixed) {
      report.cost.server_flops =
          static_cast<double>(trainable_head_server_flops(l, c, updates.size()));
      result.ledger.add_server(report.cost.server_flops);
    }

    try {
      global = aggregate(updates, global, cfg, server);
    } catch (const std::exception& e) {
      throw RunError("round " + std::to_string(r) + " aggregation: " + e.what());
    }
    report.test_accuracy = accuracy(global, test);
    result.rounds.push_back(report);
    if (hooks.on_round) hooks.on_round(report);

    if (cfg.calibration.mode == CalibrationMode::kEvery && (r + 1) % cfg.calibration.every == 0) {
      calibrate(r + 1);
      last_calibrated = r + 1;
    }
  }
  if (cfg.calibration.mode != CalibrationMode::kOff && last_calibrated != cfg.rounds) {
    calibrate(cfg.rounds);
  }
  result.final_model = global;
  result.final_accuracy = accuracy(global, test);
  if (result.calibrations.empty()) {
    result.accuracy_before_calibration = result.final_accuracy;
    result.pre_calibration_model = global;
  }
  return result;
}

}  // namespace spherefed
