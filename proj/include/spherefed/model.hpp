#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "spherefed/numerics.hpp"

namespace spherefed {

// Floor on ||z|| used when normalizing features.
inline constexpr double kNormEpsilon = 1e-12;

// Fully connected feature extractor d -> hidden... -> l with ReLU between
// layers and a linear last layer. All weights and biases live in one flat
// buffer: for each layer, an (out x in) row-major weight block then the bias.
class MlpExtractor {
 public:
  MlpExtractor() = default;
  explicit MlpExtractor(std::vector<std::size_t> dims);

  // He-normal weights, zero biases.
  static MlpExtractor he_init(std::vector<std::size_t> dims, Rng& rng);

  const std::vector<std::size_t>& dims() const noexcept { return dims_; }
  std::size_t num_layers() const noexcept { return dims_.size() - 1; }
  std::size_t input_dim() const noexcept { return dims_.front(); }
  std::size_t feature_dim() const noexcept { return dims_.back(); }
  std::size_t num_params() const noexcept { return params_.size(); }

  std::span<const double> params() const noexcept { return params_; }
  std::span<double> params() noexcept { return params_; }

  std::vector<double> flatten() const { return params_; }
  void unflatten(std::span<const double> flat);

  std::size_t weight_offset(std::size_t layer) const { return offsets_[layer]; }
  std::size_t bias_offset(std::size_t layer) const {
    return offsets_[layer] + dims_[layer + 1] * dims_[layer];
  }

  bool operator==(const MlpExtractor& other) const = default;

 private:
  std::vector<std::size_t> dims_;
  std::vector<std::size_t> offsets_;
  std::vector<double> params_;
};

// Linear classifier without bias; logits = temperature * W z~ where z~ is the
// normalized feature when normalize_features is set and the raw one otherwise.
struct ClassifierHead {
  Matrix weights;  // C x l
  bool fixed = false;
  bool normalize_features = false;
  double temperature = 1.0;

  std::size_t num_classes() const noexcept { return weights.rows(); }
  std::size_t feature_dim() const noexcept { return weights.cols(); }

  // Fixed orthonormal rows from Gram-Schmidt, features normalized.
  static ClassifierHead hyperspherical(std::size_t c, std::size_t l, Rng& rng);

  // Unit rows spread apart by minimizing each row's largest cosine to any
  // other row with momentum SGD on the sphere. Fixed, features normalized.
  static ClassifierHead tammes(std::size_t c, std::size_t l, Rng& rng, std::size_t steps = 10000,
                               double lr = 0.1, double momentum = 0.9);

  // He-normal weights.
  static ClassifierHead random(std::size_t c, std::size_t l, Rng& rng, bool fixed);

  bool operator==(const ClassifierHead& other) const = default;
};

struct Model {
  MlpExtractor extractor;
  ClassifierHead head;

  bool operator==(const Model& other) const = default;
};

enum class HeadKind { kTrainable, kFixedRandom, kFixedOrthonormal, kFixedTammes };

// Extractor dims (input, hidden..., feature) with He init and a head of the
// given kind. Orthonormal and Tammes heads normalize features; the others
// follow normalize_features.
Model make_model(std::vector<std::size_t> dims, std::size_t num_classes, HeadKind kind,
                 bool normalize_features, double temperature, Rng& rng);

struct ForwardTrace {
  std::vector<std::vector<double>> pre;  // per layer, before activation
  std::vector<std::vector<double>> act;  // act[0] = x, act[i+1] = layer i output
  std::vector<double> z;
  double z_norm = 0.0;
  std::vector<double> z_tilde;  // z / max(||z||, eps) or z itself
  std::vector<double> logits;
};

// z~ = z / max(||z||, eps).
std::vector<double> normalize_feature(std::span<const double> z);

ForwardTrace forward(const MlpExtractor& extractor, const ClassifierHead& head,
                     std::span<const double> x);

// Feature as seen by the head: the extractor output, normalized when asked.
std::vector<double> extract_feature(const MlpExtractor& extractor, std::span<const double> x,
                                    bool normalize);

std::vector<double> head_logits(const ClassifierHead& head, std::span<const double> z_tilde);

enum class LossKind { kMse, kCrossEntropy };

// (1/C) sum_i (o_i - 1{i=y})^2
double loss_mse(std::span<const double> logits, std::size_t y);

// -log softmax(tau * logits)_y
double loss_ce(std::span<const double> logits, std::size_t y, double tau = 1.0);

// Training loss on logits that already carry the head temperature.
double loss_value(std::span<const double> logits, std::size_t y, LossKind kind);

struct Gradients {
  std::vector<double> extractor;  // same layout as MlpExtractor::params
  std::optional<Matrix> head;     // absent for a fixed head

  static Gradients zeros_like(const Model& model);
};

// Adds scale * dL/dparams for one sample to grads and returns the sample loss.
double accumulate_backward(const ForwardTrace& trace, const MlpExtractor& extractor,
                           const ClassifierHead& head, std::size_t y, LossKind kind,
                           Gradients& grads, double scale = 1.0);

Gradients backward(const ForwardTrace& trace, const MlpExtractor& extractor,
                   const ClassifierHead& head, std::size_t y, LossKind kind);

// Mean loss over a mini-batch and the mean gradient into grads (overwritten).
double batch_gradient(const Model& model, const Matrix& features,
                      std::span<const std::size_t> labels, std::span<const std::size_t> batch,
                      LossKind kind, Gradients& grads);

struct SgdConfig {
  double lr = 0.1;
  double momentum = 0.0;
  double weight_decay = 0.0;
};

// v <- momentum v + g + weight_decay p;  p <- p - lr v
void sgd_step(std::span<double> params, std::span<const double> grads, const SgdConfig& cfg,
              std::span<double> velocity);

struct SgdState {
  std::vector<double> extractor;
  Matrix head;

  static SgdState zeros_like(const Model& model);
};

void sgd_step(Model& model, const Gradients& grads, const SgdConfig& cfg, SgdState& state);

enum class ScheduleKind { kConstant, kCosine, kMultiStep };

double lr_schedule(ScheduleKind kind, std::size_t round, std::size_t total, double base_lr,
                   std::span<const std::size_t> milestones = {}, double gamma = 0.1);

// Argmax with ties to the lowest index.
std::size_t predict(std::span<const double> logits);

// Binary checkpoint: "SFCK" magic, u32 version, u32 layer-dim count, u64 dims,
// u64 classes, u8 fixed, u8 normalize, f64 temperature, f64 extractor params,
// f64 head weights (C x l row-major). Little-endian.
void save_checkpoint(const std::filesystem::path& path, const Model& model);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace spherefed
