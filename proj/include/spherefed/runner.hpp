#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "spherefed/config.hpp"
#include "spherefed/fed_engine.hpp"

namespace spherefed {

// Command-line values that take precedence over the config file.
struct CliOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out_dir;
  std::optional<std::size_t> threads;
};

void apply_overrides(RunConfig& cfg, const CliOverrides& ov);

// Switches a config to one of the two compared recipes:
//   baseline  - trainable head, cross-entropy, raw features, no calibration
//   spherefed - fixed orthonormal head, MSE on normalized features, one-shot FFC
// A learning rate left unset in the config follows the new loss.
void apply_method(RunConfig& cfg, const std::string& method);

struct RunSummary {
  std::string strategy;
  std::string alpha;
  std::string head;
  std::string loss;
  double accuracy_before_ffc = 0.0;
  std::optional<double> accuracy_after_ffc;  // absent without calibration
  double final_accuracy = 0.0;
  std::optional<double> final_cosine;     // last round's client heads
  std::optional<double> final_norm_diff;
  std::optional<double> mean_cosine;      // averaged over rounds
  std::optional<double> mean_norm_diff;
  std::optional<double> validation_accuracy;
  std::uint64_t upload_bytes = 0;
  std::uint64_t download_bytes = 0;
  std::uint64_t client_flops = 0;
  double server_flops = 0.0;
};

struct LambdaRow {
  double lambda = 0.0;
  double accuracy = 0.0;
  double train_mse = 0.0;
  bool regularized = false;
};

struct RunOutcome {
  RunResult result;
  RunSummary summary;
  std::vector<LambdaRow> lambda_grid;
};

// Runs one experiment and writes into cfg.out_dir: run.jsonl (config echo,
// warnings, one record per round and per calibration, lambda-grid rows, a
// final record), final.ckpt, summary.tsv and, when enabled, feature dumps.
RunOutcome cmd_run(const RunConfig& cfg);

// One sweep axis: a name (alpha, seed, strategy, method) and its values.
struct SweepAxis {
  std::string name;
  std::vector<std::string> values;
};

// Parses "name=v1,v2,..."; throws ConfigError on an unknown axis or value.
SweepAxis parse_axis(const std::string& text);

struct SweepCell {
  std::vector<std::string> values;  // one per non-seed axis
  std::size_t runs = 0;
  std::size_t failed = 0;
  std::vector<std::string> errors;
  std::vector<double> accuracy;  // final accuracy per successful seed
  std::vector<double> accuracy_before_ffc;
  std::vector<double> mean_cosine;
  std::vector<double> mean_norm_diff;
};

struct SweepResult {
  std::vector<std::string> axis_names;  // non-seed axes
  std::vector<SweepCell> cells;
  std::size_t failed_runs = 0;
};

// Runs the cross-product of the axes over the base config, each run in its
// own subdirectory, and writes sweep.tsv (a row per cell, mean and std over
// seeds, deltas against each axis's first value) plus sweep_runs.tsv.
// A failing run is recorded and the sweep moves on.
SweepResult cmd_sweep(const RunConfig& base, const std::vector<SweepAxis>& axes);

struct CalibrateRow {
  double lambda = 0.0;
  double accuracy_after = 0.0;
  double train_mse = 0.0;
  bool regularized = false;
  std::filesystem::path checkpoint;
};

struct CalibrateReport {
  double accuracy_before = 0.0;
  std::uint64_t payload_bytes = 0;
  std::vector<CalibrateRow> rows;
};

// Post-hoc calibration of a saved model on the config's data and partition:
// per-client stats, one server solve per lambda, a calibrated checkpoint per
// lambda and calibrate.tsv in cfg.out_dir. Empty lambdas fall back to the
// config's lambda grid, then its single lambda.
CalibrateReport cmd_calibrate(const std::filesystem::path& checkpoint, const RunConfig& cfg,
                              std::vector<double> lambdas);

}  // namespace spherefed
