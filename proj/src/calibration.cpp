#include "spherefed/calibration.hpp"

#include <algorithm>
#include <cstring>
#include <numeric>
#include <string>

#include "spherefed/errors.hpp"

namespace spherefed {

namespace {

constexpr char kStatsMagic[4] = {'S', 'F', 'C', 'S'};
constexpr std::uint32_t kStatsVersion = 1;

template <typename T>
void append_pod(std::vector<std::uint8_t>& out, const T& value) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
  out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T take_pod(std::span<const std::uint8_t> bytes, std::size_t& offset) {
  if (offset + sizeof(T) > bytes.size()) throw FormatError("truncated stats payload", offset);
  T value;
  std::memcpy(&value, bytes.data() + offset, sizeof(T));
  offset += sizeof(T);
  return value;
}

void accumulate_sample(CalibStats& s, std::span<const double> z, std::size_t y) {
  outer_accumulate(s.v, z, z);
  for (std::size_t j = 0; j < z.size(); ++j) s.u(j, y) += z[j];
  ++s.count;
}

}  // namespace

CalibStats CalibStats::zeros(std::size_t l, std::size_t c) {
  return CalibStats{Matrix(l, l), Matrix(l, c), 0};
}

CalibStats client_stats(const MlpExtractor& extractor, const Dataset& data,
                        std::span<const std::size_t> indices) {
  CalibStats s = CalibStats::zeros(extractor.feature_dim(), data.num_classes);
  for (std::size_t i : indices) {
    if (i >= data.size()) throw ConsistencyError("client index " + std::to_string(i) + " out of range");
    const auto z = extract_feature(extractor, data.features.row(i), true);
    accumulate_sample(s, z, data.labels[i]);
  }
  return s;
}

CalibStats client_stats(const MlpExtractor& extractor, const Dataset& data) {
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return client_stats(extractor, data, all);
}

CalibStats stats_from_features(const Matrix& features, std::span<const std::size_t> labels,
                               std::size_t num_classes) {
  if (features.rows() != labels.size()) throw ShapeError("feature rows and labels differ in count");
  CalibStats s = CalibStats::zeros(features.cols(), num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes) throw ShapeError("label outside the class range");
    accumulate_sample(s, features.row(i), labels[i]);
  }
  return s;
}

CalibratedHead server_solve(std::span<const CalibStats> stats, double lambda, bool allow_jitter) {
  if (stats.empty()) throw ProtocolError("server_solve received no client statistics");
  if (!(lambda >= 0.0)) throw ParameterError("ridge coefficient must be nonnegative");
  const std::size_t l = stats.front().feature_dim();
  const std::size_t c = stats.front().num_classes();
  CalibStats total = CalibStats::zeros(l, c);
  for (const auto& s : stats) {
    if (s.v.rows() != l || s.v.cols() != l || s.u.rows() != l || s.u.cols() != c) {
      throw ProtocolError("client statistics have inconsistent shapes");
    }
    total.v += s.v;
    total.u += s.u;
    total.count += s.count;
  }
  if (total.count == 0) throw ProtocolError("server_solve received statistics over zero samples");
  for (std::size_t i = 0; i < l; ++i) total.v(i, i) += lambda;

  SpdSolution sol;
  try {
    sol = solve_spd(total.v, total.u, allow_jitter);
  } catch (const SingularError& e) {
    throw SingularError(std::string("feature Gram matrix is singular (") + e.what() +
                            "); use a ridge coefficient lambda > 0",
                        e.pivot());
  }
  return CalibratedHead{sol.x.transpose(), lambda, sol.regularized};
}

CalibratedHead local_calibrate(const MlpExtractor& extractor, const Dataset& data,
                               std::span<const std::size_t> indices, double lambda) {
  if (indices.empty()) throw InputError("local calibration needs at least one sample");
  const CalibStats s = client_stats(extractor, data, indices);
  return server_solve(std::span(&s, 1), lambda, false);
}

CalibratedHead calibrate_federated(const MlpExtractor& extractor, const Dataset& train,
                                   const std::vector<std::vector<std::size_t>>& clients,
                                   double lambda, std::vector<CalibStats>* uploaded) {
  std::vector<CalibStats> stats;
  stats.reserve(clients.size());
  for (const auto& idx : clients) stats.push_back(client_stats(extractor, train, idx));
  CalibratedHead head = server_solve(stats, lambda);
  if (uploaded) *uploaded = std::move(stats);
  return head;
}

Matrix normalized_features(const MlpExtractor& extractor, const Dataset& data) {
  Matrix f(data.size(), extractor.feature_dim());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto z = extract_feature(extractor, data.features.row(i), true);
    std::copy(z.begin(), z.end(), f.row(i).begin());
  }
  return f;
}

double head_mse(const Matrix& weights, const Matrix& features, std::span<const std::size_t> labels) {
  if (features.rows() == 0) return 0.0;
  double total = 0.0;
  std::vector<double> o(weights.rows());
  for (std::size_t i = 0; i < features.rows(); ++i) {
    for (std::size_t c = 0; c < weights.rows(); ++c) o[c] = dot(weights.row(c), features.row(i));
    total += loss_mse(o, labels[i]);
  }
  return total / static_cast<double>(features.rows());
}

Matrix oracle_finetune(const MlpExtractor& extractor, const Dataset& pooled, const Matrix& initial,
                       const FinetuneConfig& cfg) {
  const Matrix features = normalized_features(extractor, pooled);
  const std::size_t c = initial.rows();
  const std::size_t l = initial.cols();
  if (l != extractor.feature_dim()) throw ShapeError("initial head does not match the feature width");
  Matrix w = initial;
  Matrix velocity(c, l);
  Matrix grad(c, l);
  std::vector<std::size_t> order(pooled.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t batch = std::max<std::size_t>(cfg.batch_size, 1);
  const Rng base(cfg.seed, 0x0F1E);
  std::vector<double> o(c);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng = base.child(epoch);
    rng.shuffle(std::span(order));
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      std::fill(grad.data().begin(), grad.data().end(), 0.0);
      const double scale = 2.0 / (static_cast<double>(c) * static_cast<double>(end - start));
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t i = order[b];
        auto z = features.row(i);
        for (std::size_t k = 0; k < c; ++k) {
          o[k] = dot(w.row(k), z) - (k == pooled.labels[i] ? 1.0 : 0.0);
        }
        for (std::size_t k = 0; k < c; ++k) {
          auto g = grad.row(k);
          for (std::size_t j = 0; j < l; ++j) g[j] += scale * o[k] * z[j];
        }
      }
      sgd_step(w.data(), grad.data(), SgdConfig{cfg.lr, cfg.momentum, 0.0}, velocity.data());
    }
  }
  return w;
}

std::vector<std::uint8_t> serialize(const CalibStats& stats) {
  const std::size_t l = stats.feature_dim();
  const std::size_t c = stats.num_classes();
  std::vector<std::uint8_t> out;
  out.reserve(kCalibStatsHeaderBytes + 8 * l * (l + c));
  out.insert(out.end(), kStatsMagic, kStatsMagic + 4);
  append_pod(out, kStatsVersion);
  append_pod(out, static_cast<std::uint32_t>(l));
  append_pod(out, static_cast<std::uint32_t>(c));
  append_pod(out, static_cast<std::uint64_t>(stats.count));
  for (double x : stats.v.data()) append_pod(out, x);
  for (double x : stats.u.data()) append_pod(out, x);
  return out;
}

CalibStats deserialize_stats(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kStatsMagic, 4) != 0) {
    throw FormatError("bad stats magic", 0);
  }
  std::size_t offset = 4;
  const auto version = take_pod<std::uint32_t>(bytes, offset);
  if (version != kStatsVersion) throw FormatError("unsupported stats version", 4);
  const auto l = take_pod<std::uint32_t>(bytes, offset);
  const auto c = take_pod<std::uint32_t>(bytes, offset);
  CalibStats s = CalibStats::zeros(l, c);
  s.count = take_pod<std::uint64_t>(bytes, offset);
  for (double& x : s.v.data()) x = take_pod<double>(bytes, offset);
  for (double& x : s.u.data()) x = take_pod<double>(bytes, offset);
  if (offset != bytes.size()) throw FormatError("trailing bytes after stats payload", offset);
  return s;
}

}  // namespace spherefed
