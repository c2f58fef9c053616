#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "spherefed/fed_engine.hpp"
#include "spherefed/metrics.hpp"
#include "spherefed/model.hpp"

namespace spherefed {

// Invalid configuration; key is the dotted path of the offending entry.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& message)
      : std::runtime_error(key + ": " + message), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

struct DatasetConfig {
  std::string kind = "synthetic";  // synthetic | idx
  std::size_t classes = 10;
  std::size_t dim = 64;
  std::size_t per_class = 500;
  double spread = 1.0;
  double test_fraction = 0.2;
  double validation_fraction = 0.0;
  std::string train_images;
  std::string train_labels;
  std::string test_images;
  std::string test_labels;
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::size_t threads = 1;

  DatasetConfig dataset;

  std::size_t clients = 10;
  std::optional<double> alpha = 0.1;  // nullopt = IID

  std::vector<std::size_t> hidden = {64};
  std::size_t feature_dim = 32;
  HeadKind head = HeadKind::kFixedOrthonormal;
  LossKind loss = LossKind::kMse;
  double tau = 1.0;
  bool tau_defaulted = false;  // ce on a hyperspherical head without tau
  bool normalize_features = true;

  FedConfig fed;
  bool lr_defaulted = true;  // lr follows the loss when unset
  std::vector<double> lambda_grid;

  std::filesystem::path out_dir = "runs/default";
  bool dump_features = false;
  FeatureFormat feature_format = FeatureFormat::kText;

  std::vector<std::string> warnings;
};

// Parses and validates; unknown keys, wrong types and invalid combinations
// raise ConfigError naming the key.
RunConfig parse_config(const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);

// Fully resolved config, defaults included; parse_config(to_json(c)) == c.
nlohmann::json to_json(const RunConfig& cfg);

std::string to_string(Strategy s);
std::string to_string(HeadKind h);
std::string to_string(LossKind l);
std::string alpha_label(const std::optional<double>& alpha);

// The data a run works on, rebuilt deterministically from the config.
struct RunData {
  Dataset train;
  Dataset test;
  std::optional<Dataset> validation;
  Partition partition;
};

RunData build_data(const RunConfig& cfg);

Model build_model(const RunConfig& cfg, std::size_t input_dim, std::size_t num_classes);

}  // namespace spherefed
