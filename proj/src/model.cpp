#include "spherefed/model.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <string>

#include "spherefed/errors.hpp"

namespace spherefed {

static_assert(std::endian::native == std::endian::little,
              "checkpoint and stats serialization assume a little-endian host");

namespace {

constexpr std::array<char, 4> kCheckpointMagic = {'S', 'F', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void write_pod(std::ostream& out, const T& value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const std::filesystem::path& path) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (in.gcount() != static_cast<std::streamsize>(sizeof(T))) {
    throw CheckpointError("truncated checkpoint " + path.string());
  }
  return value;
}

}  // namespace

MlpExtractor::MlpExtractor(std::vector<std::size_t> dims) : dims_(std::move(dims)) {
  if (dims_.size() < 2) throw ParameterError("extractor needs at least an input and a feature dim");
  for (std::size_t d : dims_) {
    if (d == 0) throw ParameterError("extractor layer dims must be positive");
  }
  std::size_t total = 0;
  for (std::size_t i = 0; i + 1 < dims_.size(); ++i) {
    offsets_.push_back(total);
    total += dims_[i + 1] * dims_[i] + dims_[i + 1];
  }
  params_.assign(total, 0.0);
}

MlpExtractor MlpExtractor::he_init(std::vector<std::size_t> dims, Rng& rng) {
  MlpExtractor m(std::move(dims));
  for (std::size_t layer = 0; layer < m.num_layers(); ++layer) {
    const std::size_t in = m.dims_[layer];
    const std::size_t out = m.dims_[layer + 1];
    const double sd = std::sqrt(2.0 / static_cast<double>(in));
    double* w = m.params_.data() + m.weight_offset(layer);
    for (std::size_t i = 0; i < in * out; ++i) w[i] = sd * rng.normal();
  }
  return m;
}

void MlpExtractor::unflatten(std::span<const double> flat) {
  if (flat.size() != params_.size()) {
    throw ShapeError("unflatten expects " + std::to_string(params_.size()) + " values, got " +
                     std::to_string(flat.size()));
  }
  std::copy(flat.begin(), flat.end(), params_.begin());
}

ClassifierHead ClassifierHead::hyperspherical(std::size_t c, std::size_t l, Rng& rng) {
  ClassifierHead h;
  h.weights = orthonormal_rows(c, l, rng);
  h.fixed = true;
  h.normalize_features = true;
  return h;
}

ClassifierHead ClassifierHead::tammes(std::size_t c, std::size_t l, Rng& rng, std::size_t steps,
                                      double lr, double momentum) {
  if (c < 2) throw ParameterError("tammes initialization needs at least two classes");
  Matrix p(c, l);
  for (std::size_t i = 0; i < c; ++i) {
    auto row = p.row(i);
    for (double& x : row) x = rng.normal();
    const double n = norm2(row);
    for (double& x : row) x /= n;
  }
  Matrix velocity(c, l);
  Matrix grad(c, l);
  const double scale = 1.0 / static_cast<double>(c);
  const double pi = std::acos(-1.0);
  for (std::size_t step = 0; step < steps; ++step) {
    // Max-cosine subgradients oscillate at a constant rate; anneal it.
    const double rate =
        lr * 0.5 * (1.0 + std::cos(pi * static_cast<double>(step) / static_cast<double>(steps)));
    std::fill(grad.data().begin(), grad.data().end(), 0.0);
    for (std::size_t i = 0; i < c; ++i) {
      std::size_t nearest = i == 0 ? 1 : 0;
      double best = -2.0;
      for (std::size_t j = 0; j < c; ++j) {
        if (j == i) continue;
        const double cs = dot(p.row(i), p.row(j));
        if (cs > best) {
          best = cs;
          nearest = j;
        }
      }
      // d cos / d p_i projected onto the tangent space at p_i, and likewise
      // for the neighbour.
      auto pi = p.row(i);
      auto pj = p.row(nearest);
      auto gi = grad.row(i);
      auto gj = grad.row(nearest);
      for (std::size_t t = 0; t < l; ++t) {
        gi[t] += scale * (pj[t] - best * pi[t]);
        gj[t] += scale * (pi[t] - best * pj[t]);
      }
    }
    for (std::size_t i = 0; i < c; ++i) {
      auto row = p.row(i);
      auto v = velocity.row(i);
      auto g = grad.row(i);
      for (std::size_t t = 0; t < l; ++t) {
        v[t] = momentum * v[t] + g[t];
        row[t] -= rate * v[t];
      }
      const double n = norm2(row);
      for (double& x : row) x /= n;
    }
  }
  ClassifierHead h;
  h.weights = std::move(p);
  h.fixed = true;
  h.normalize_features = true;
  return h;
}

ClassifierHead ClassifierHead::random(std::size_t c, std::size_t l, Rng& rng, bool fixed) {
  ClassifierHead h;
  h.weights = Matrix(c, l);
  const double sd = std::sqrt(2.0 / static_cast<double>(l));
  for (double& x : h.weights.data()) x = sd * rng.normal();
  h.fixed = fixed;
  return h;
}

Model make_model(std::vector<std::size_t> dims, std::size_t num_classes, HeadKind kind,
                 bool normalize_features, double temperature, Rng& rng) {
  if (!(temperature > 0.0)) throw ParameterError("temperature must be positive");
  const std::size_t l = dims.back();
  Rng head_rng = rng.child(1);
  Rng body_rng = rng.child(0);
  Model m;
  m.extractor = MlpExtractor::he_init(std::move(dims), body_rng);
  switch (kind) {
    case HeadKind::kTrainable:
      m.head = ClassifierHead::random(num_classes, l, head_rng, false);
      m.head.normalize_features = normalize_features;
      break;
    case HeadKind::kFixedRandom:
      m.head = ClassifierHead::random(num_classes, l, head_rng, true);
      m.head.normalize_features = normalize_features;
      break;
    case HeadKind::kFixedOrthonormal:
      m.head = ClassifierHead::hyperspherical(num_classes, l, head_rng);
      break;
    case HeadKind::kFixedTammes:
      m.head = ClassifierHead::tammes(num_classes, l, head_rng);
      break;
  }
  m.head.temperature = temperature;
  return m;
}

std::vector<double> normalize_feature(std::span<const double> z) {
  const double n = std::max(norm2(z), kNormEpsilon);
  std::vector<double> out(z.begin(), z.end());
  for (double& x : out) x /= n;
  return out;
}

namespace {

// Runs the extractor, optionally recording every layer into trace.
std::vector<double> run_extractor(const MlpExtractor& ex, std::span<const double> x,
                                  ForwardTrace* trace) {
  if (x.size() != ex.input_dim()) {
    throw ShapeError("input has length " + std::to_string(x.size()) + ", extractor expects " +
                     std::to_string(ex.input_dim()));
  }
  std::vector<double> a(x.begin(), x.end());
  const auto params = ex.params();
  const auto& dims = ex.dims();
  if (trace) trace->act.push_back(a);
  for (std::size_t layer = 0; layer < ex.num_layers(); ++layer) {
    const std::size_t in = dims[layer];
    const std::size_t out = dims[layer + 1];
    const double* w = params.data() + ex.weight_offset(layer);
    const double* b = params.data() + ex.bias_offset(layer);
    std::vector<double> h(out);
    for (std::size_t r = 0; r < out; ++r) {
      double s = b[r];
      const double* wr = w + r * in;
      for (std::size_t c = 0; c < in; ++c) s += wr[c] * a[c];
      h[r] = s;
    }
    const bool last = layer + 1 == ex.num_layers();
    std::vector<double> next = h;
    if (!last) {
      for (double& v : next) v = v > 0.0 ? v : 0.0;
    }
    if (trace) {
      trace->pre.push_back(std::move(h));
      trace->act.push_back(next);
    }
    a = std::move(next);
  }
  return a;
}

}  // namespace

std::vector<double> head_logits(const ClassifierHead& head, std::span<const double> z_tilde) {
  if (z_tilde.size() != head.feature_dim()) {
    throw ShapeError("feature of length " + std::to_string(z_tilde.size()) +
                     " does not match head width " + std::to_string(head.feature_dim()));
  }
  std::vector<double> o(head.num_classes());
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = head.temperature * dot(head.weights.row(i), z_tilde);
  return o;
}

ForwardTrace forward(const MlpExtractor& extractor, const ClassifierHead& head,
                     std::span<const double> x) {
  if (!all_finite(x)) throw InputError("forward input contains non-finite values");
  ForwardTrace t;
  t.z = run_extractor(extractor, x, &t);
  t.z_norm = norm2(t.z);
  t.z_tilde = head.normalize_features ? normalize_feature(t.z) : t.z;
  t.logits = head_logits(head, t.z_tilde);
  return t;
}

std::vector<double> extract_feature(const MlpExtractor& extractor, std::span<const double> x,
                                    bool normalize) {
  auto z = run_extractor(extractor, x, nullptr);
  return normalize ? normalize_feature(z) : z;
}

double loss_mse(std::span<const double> logits, std::size_t y) {
  if (y >= logits.size()) throw ShapeError("label outside the logit range");
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double d = logits[i] - (i == y ? 1.0 : 0.0);
    s += d * d;
  }
  return s / static_cast<double>(logits.size());
}

double loss_ce(std::span<const double> logits, std::size_t y, double tau) {
  if (y >= logits.size()) throw ShapeError("label outside the logit range");
  double top = tau * logits[0];
  for (double o : logits) top = std::max(top, tau * o);
  double sum = 0.0;
  for (double o : logits) sum += std::exp(tau * o - top);
  return -(tau * logits[y] - top - std::log(sum));
}

double loss_value(std::span<const double> logits, std::size_t y, LossKind kind) {
  return kind == LossKind::kMse ? loss_mse(logits, y) : loss_ce(logits, y, 1.0);
}

Gradients Gradients::zeros_like(const Model& model) {
  Gradients g;
  g.extractor.assign(model.extractor.num_params(), 0.0);
  if (!model.head.fixed) g.head = Matrix(model.head.num_classes(), model.head.feature_dim());
  return g;
}

double accumulate_backward(const ForwardTrace& trace, const MlpExtractor& extractor,
                           const ClassifierHead& head, std::size_t y, LossKind kind,
                           Gradients& grads, double scale) {
  const std::size_t c = head.num_classes();
  const std::size_t l = head.feature_dim();
  if (y >= c) throw ShapeError("label outside the class range");
  if (grads.extractor.size() != extractor.num_params()) {
    throw ShapeError("gradient buffer does not match the extractor");
  }

  // dL/do
  std::vector<double> g_out(c);
  double loss;
  if (kind == LossKind::kMse) {
    loss = loss_mse(trace.logits, y);
    for (std::size_t i = 0; i < c; ++i) {
      g_out[i] = 2.0 / static_cast<double>(c) * (trace.logits[i] - (i == y ? 1.0 : 0.0));
    }
  } else {
    loss = loss_ce(trace.logits, y, 1.0);
    double top = trace.logits[0];
    for (double o : trace.logits) top = std::max(top, o);
    double sum = 0.0;
    for (std::size_t i = 0; i < c; ++i) {
      g_out[i] = std::exp(trace.logits[i] - top);
      sum += g_out[i];
    }
    for (std::size_t i = 0; i < c; ++i) g_out[i] = g_out[i] / sum - (i == y ? 1.0 : 0.0);
  }
  for (double& g : g_out) g *= scale;

  // dL/dz~ and, when trainable, dL/dW.
  std::vector<double> g_zt(l, 0.0);
  const double tau = head.temperature;
  for (std::size_t i = 0; i < c; ++i) {
    const double gi = tau * g_out[i];
    auto w = head.weights.row(i);
    for (std::size_t j = 0; j < l; ++j) g_zt[j] += gi * w[j];
  }
  if (!head.fixed) {
    if (!grads.head) grads.head = Matrix(c, l);
    for (std::size_t i = 0; i < c; ++i) {
      const double gi = tau * g_out[i];
      auto gw = grads.head->row(i);
      for (std::size_t j = 0; j < l; ++j) gw[j] += gi * trace.z_tilde[j];
    }
  }

  // Through z~ = z / max(||z||, eps).
  std::vector<double> delta(l);
  if (head.normalize_features) {
    if (trace.z_norm >= kNormEpsilon) {
      const double radial = dot(trace.z_tilde, g_zt);
      for (std::size_t j = 0; j < l; ++j) {
        delta[j] = (g_zt[j] - trace.z_tilde[j] * radial) / trace.z_norm;
      }
    } else {
      for (std::size_t j = 0; j < l; ++j) delta[j] = g_zt[j] / kNormEpsilon;
    }
  } else {
    delta = g_zt;
  }

  const auto params = extractor.params();
  const auto& dims = extractor.dims();
  for (std::size_t layer = extractor.num_layers(); layer-- > 0;) {
    const std::size_t in = dims[layer];
    const std::size_t out = dims[layer + 1];
    const auto& a_in = trace.act[layer];
    double* gw = grads.extractor.data() + extractor.weight_offset(layer);
    double* gb = grads.extractor.data() + extractor.bias_offset(layer);
    for (std::size_t r = 0; r < out; ++r) {
      const double d = delta[r];
      gb[r] += d;
      if (d == 0.0) continue;
      double* gwr = gw + r * in;
      for (std::size_t col = 0; col < in; ++col) gwr[col] += d * a_in[col];
    }
    if (layer == 0) break;
    const double* w = params.data() + extractor.weight_offset(layer);
    std::vector<double> prev(in, 0.0);
    for (std::size_t r = 0; r < out; ++r) {
      const double d = delta[r];
      if (d == 0.0) continue;
      const double* wr = w + r * in;
      for (std::size_t col = 0; col < in; ++col) prev[col] += d * wr[col];
    }
    const auto& pre = trace.pre[layer - 1];
    for (std::size_t col = 0; col < in; ++col) {
      if (!(pre[col] > 0.0)) prev[col] = 0.0;
    }
    delta = std::move(prev);
  }
  return loss;
}

Gradients backward(const ForwardTrace& trace, const MlpExtractor& extractor,
                   const ClassifierHead& head, std::size_t y, LossKind kind) {
  Gradients g;
  g.extractor.assign(extractor.num_params(), 0.0);
  accumulate_backward(trace, extractor, head, y, kind, g, 1.0);
  return g;
}

double batch_gradient(const Model& model, const Matrix& features,
                      std::span<const std::size_t> labels, std::span<const std::size_t> batch,
                      LossKind kind, Gradients& grads) {
  std::fill(grads.extractor.begin(), grads.extractor.end(), 0.0);
  if (grads.head) std::fill(grads.head->data().begin(), grads.head->data().end(), 0.0);
  if (batch.empty()) return 0.0;
  const double scale = 1.0 / static_cast<double>(batch.size());
  double loss = 0.0;
  for (std::size_t i : batch) {
    const ForwardTrace t = forward(model.extractor, model.head, features.row(i));
    loss += accumulate_backward(t, model.extractor, model.head, labels[i], kind, grads, scale);
  }
  return loss * scale;
}

void sgd_step(std::span<double> params, std::span<const double> grads, const SgdConfig& cfg,
              std::span<double> velocity) {
  if (params.size() != grads.size() || params.size() != velocity.size()) {
    throw ShapeError("sgd_step buffers differ in length");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity[i] = cfg.momentum * velocity[i] + grads[i] + cfg.weight_decay * params[i];
    params[i] -= cfg.lr * velocity[i];
  }
}

SgdState SgdState::zeros_like(const Model& model) {
  SgdState s;
  s.extractor.assign(model.extractor.num_params(), 0.0);
  if (!model.head.fixed) s.head = Matrix(model.head.num_classes(), model.head.feature_dim());
  return s;
}

void sgd_step(Model& model, const Gradients& grads, const SgdConfig& cfg, SgdState& state) {
  sgd_step(model.extractor.params(), grads.extractor, cfg, state.extractor);
  if (!model.head.fixed) {
    if (!grads.head) throw ShapeError("trainable head without a head gradient");
    sgd_step(model.head.weights.data(), grads.head->data(), cfg, state.head.data());
  }
}

double lr_schedule(ScheduleKind kind, std::size_t round, std::size_t total, double base_lr,
                   std::span<const std::size_t> milestones, double gamma) {
  if (round >= total) {
    throw ParameterError("lr_schedule round " + std::to_string(round) + " is not below total " +
                         std::to_string(total));
  }
  switch (kind) {
    case ScheduleKind::kConstant:
      return base_lr;
    case ScheduleKind::kCosine:
      return base_lr * (1.0 + std::cos(std::numbers::pi * static_cast<double>(round) /
                                       static_cast<double>(total))) /
             2.0;
    case ScheduleKind::kMultiStep: {
      double lr = base_lr;
      for (std::size_t m : milestones) {
        if (round >= m) lr *= gamma;
      }
      return lr;
    }
  }
  return base_lr;
}

std::size_t predict(std::span<const double> logits) {
  if (logits.empty()) throw ShapeError("predict on empty logits");
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return best;
}

void save_checkpoint(const std::filesystem::path& path, const Model& model) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  write_pod(out, kCheckpointVersion);
  const auto& dims = model.extractor.dims();
  write_pod(out, static_cast<std::uint32_t>(dims.size()));
  for (std::size_t d : dims) write_pod(out, static_cast<std::uint64_t>(d));
  write_pod(out, static_cast<std::uint64_t>(model.head.num_classes()));
  write_pod(out, static_cast<std::uint8_t>(model.head.fixed));
  write_pod(out, static_cast<std::uint8_t>(model.head.normalize_features));
  write_pod(out, model.head.temperature);
  const auto p = model.extractor.params();
  out.write(reinterpret_cast<const char*>(p.data()), static_cast<std::streamsize>(p.size_bytes()));
  const auto w = model.head.weights.data();
  out.write(reinterpret_cast<const char*>(w.data()), static_cast<std::streamsize>(w.size_bytes()));
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  if (in.gcount() != 4 || magic != kCheckpointMagic) {
    throw CheckpointError(path.string() + " is not a checkpoint file");
  }
  const auto version = read_pod<std::uint32_t>(in, path);
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto ndims = read_pod<std::uint32_t>(in, path);
  if (ndims < 2 || ndims > 64) throw CheckpointError("implausible layer count in " + path.string());
  std::vector<std::size_t> dims(ndims);
  for (auto& d : dims) d = static_cast<std::size_t>(read_pod<std::uint64_t>(in, path));
  const auto classes = static_cast<std::size_t>(read_pod<std::uint64_t>(in, path));
  Model m;
  m.extractor = MlpExtractor(dims);
  m.head.fixed = read_pod<std::uint8_t>(in, path) != 0;
  m.head.normalize_features = read_pod<std::uint8_t>(in, path) != 0;
  m.head.temperature = read_pod<double>(in, path);
  auto p = m.extractor.params();
  in.read(reinterpret_cast<char*>(p.data()), static_cast<std::streamsize>(p.size_bytes()));
  if (in.gcount() != static_cast<std::streamsize>(p.size_bytes())) {
    throw CheckpointError("truncated checkpoint " + path.string());
  }
  m.head.weights = Matrix(classes, dims.back());
  auto w = m.head.weights.data();
  in.read(reinterpret_cast<char*>(w.data()), static_cast<std::streamsize>(w.size_bytes()));
  if (in.gcount() != static_cast<std::streamsize>(w.size_bytes())) {
    throw CheckpointError("truncated checkpoint " + path.string());
  }
  return m;
}

}  // namespace spherefed
