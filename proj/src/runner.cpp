#include "spherefed/runner.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>

#include "spherefed/errors.hpp"

namespace spherefed {

namespace {

using nlohmann::json;

std::string fmt(double x, int precision = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << x;
  return os.str();
}

std::string fmt_opt(const std::optional<double>& x, int precision = 4) {
  return x ? fmt(*x, precision) : "NA";
}

json opt_json(const std::optional<double>& x) { return x ? json(*x) : json(nullptr); }

json cost_json(const CostDelta& c) {
  return json{{"upload_bytes", c.upload_bytes},
              {"download_bytes", c.download_bytes},
              {"client_flops", c.client_flops},
              {"server_flops", c.server_flops}};
}

json round_json(const RoundReport& r) {
  json j;
  j["kind"] = "round";
  j["round"] = r.round;
  j["test_accuracy"] = r.test_accuracy;
  j["train_loss"] = r.train_loss;
  if (r.alignment) {
    j["alignment"] = json{{"mean_cosine", r.alignment->mean_cosine},
                          {"mean_norm_diff", r.alignment->mean_norm_diff},
                          {"skipped", r.alignment->skipped}};
  } else {
    j["alignment"] = nullptr;
  }
  j["cost"] = cost_json(r.cost);
  j["selected"] = r.selected;
  return j;
}

json calibration_json(const CalibrationEvent& e) {
  return json{{"kind", "calibration"},
              {"round", e.round},
              {"accuracy_before", e.accuracy_before},
              {"accuracy_after", e.accuracy_after},
              {"lambda", e.lambda},
              {"regularized", e.regularized},
              {"payload_bytes", e.payload_bytes},
              {"cost", cost_json(e.cost)}};
}

// Append-only JSON-lines writer; every record is flushed as written.
class RunLog {
 public:
  explicit RunLog(const std::filesystem::path& path) : out_(path, std::ios::trunc) {
    if (!out_) throw IoError("cannot write run log " + path.string());
  }
  void write(const json& record) {
    out_ << record.dump() << '\n';
    out_.flush();
    if (!out_) throw IoError("failed writing run log");
  }

 private:
  std::ofstream out_;
};

const char* kSummaryHeader =
    "strategy\talpha\thead\tloss\taccuracy_before_ffc\taccuracy_after_ffc\tfinal_cosine\t"
    "final_norm_diff\tupload_bytes\tdownload_bytes\tclient_flops\tserver_flops";

std::string summary_row(const RunSummary& s) {
  std::ostringstream os;
  os << s.strategy << '\t' << s.alpha << '\t' << s.head << '\t' << s.loss << '\t'
     << fmt(s.accuracy_before_ffc) << '\t' << fmt_opt(s.accuracy_after_ffc) << '\t'
     << fmt_opt(s.final_cosine) << '\t' << fmt_opt(s.final_norm_diff) << '\t' << s.upload_bytes
     << '\t' << s.download_bytes << '\t' << s.client_flops << '\t' << std::setprecision(6)
     << s.server_flops;
  return os.str();
}

double mean(const std::vector<double>& v) {
  return v.empty() ? std::nan("") : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// Sample standard deviation; zero for a single value.
double stdev(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

void solve_lambda_grid(const RunData& data, const Model& model, const std::vector<double>& grid,
                       std::vector<LambdaRow>& rows) {
  std::vector<CalibStats> stats;
  for (const auto& idx : data.partition.assignments) {
    stats.push_back(client_stats(model.extractor, data.train, idx));
  }
  const Matrix train_features = normalized_features(model.extractor, data.train);
  for (double lambda : grid) {
    const auto solved = server_solve(stats, lambda);
    LambdaRow row;
    row.lambda = lambda;
    row.accuracy = accuracy_with_head(model.extractor, solved.weights, data.test);
    row.train_mse = head_mse(solved.weights, train_features, data.train.labels);
    row.regularized = solved.regularized;
    rows.push_back(row);
  }
}

}  // namespace

void apply_overrides(RunConfig& cfg, const CliOverrides& ov) {
  if (ov.seed) {
    cfg.seed = *ov.seed;
    cfg.fed.seed = *ov.seed;
  }
  if (ov.out_dir) cfg.out_dir = *ov.out_dir;
  if (ov.threads) {
    if (*ov.threads == 0) throw ConfigError("threads", "must be at least 1");
    cfg.threads = *ov.threads;
    cfg.fed.threads = *ov.threads;
  }
}

void apply_method(RunConfig& cfg, const std::string& method) {
  if (method == "baseline") {
    cfg.head = HeadKind::kTrainable;
    cfg.loss = LossKind::kCrossEntropy;
    cfg.normalize_features = false;
    cfg.tau = 1.0;
    cfg.fed.calibration.mode = CalibrationMode::kOff;
  } else if (method == "spherefed") {
    if (cfg.dataset.classes > cfg.feature_dim) {
      throw ConfigError("model.feature_dim", "spherefed needs classes <= feature_dim");
    }
    cfg.head = HeadKind::kFixedOrthonormal;
    cfg.loss = LossKind::kMse;
    cfg.normalize_features = true;
    cfg.tau = 1.0;
    cfg.fed.calibration.mode = CalibrationMode::kOnce;
  } else {
    throw ConfigError("method", "unknown method '" + method + "' (expected baseline or spherefed)");
  }
  cfg.tau_defaulted = false;
  cfg.warnings.clear();
  cfg.fed.loss = cfg.loss;
  if (cfg.lr_defaulted) cfg.fed.lr = cfg.loss == LossKind::kMse ? 0.5 : 0.1;
}

RunOutcome cmd_run(const RunConfig& cfg) {
  std::filesystem::create_directories(cfg.out_dir);
  RunLog log(cfg.out_dir / "run.jsonl");
  log.write(json{{"kind", "config"}, {"config", to_json(cfg)}});
  for (const auto& w : cfg.warnings) {
    std::cerr << "warning: " << w << '\n';
    log.write(json{{"kind", "warning"}, {"message", w}});
  }

  const RunData data = build_data(cfg);
  const Model init = build_model(cfg, data.train.dim(), data.train.num_classes);

  RunHooks hooks;
  hooks.on_round = [&](const RoundReport& r) { log.write(round_json(r)); };
  hooks.on_calibration = [&](const CalibrationEvent& e) { log.write(calibration_json(e)); };

  RunOutcome out;
  out.result = run(data.train, data.test, data.partition, cfg.fed, init, hooks);
  const auto& res = out.result;

  if (!cfg.lambda_grid.empty()) {
    solve_lambda_grid(data, res.final_model, cfg.lambda_grid, out.lambda_grid);
    for (const auto& row : out.lambda_grid) {
      log.write(json{{"kind", "lambda_grid"},
                     {"lambda", row.lambda},
                     {"accuracy", row.accuracy},
                     {"train_mse", row.train_mse},
                     {"regularized", row.regularized}});
    }
  }

  RunSummary& s = out.summary;
  s.strategy = to_string(cfg.fed.strategy);
  s.alpha = alpha_label(cfg.alpha);
  s.head = to_string(cfg.head);
  s.loss = to_string(cfg.loss);
  s.accuracy_before_ffc = res.accuracy_before_calibration;
  if (!res.calibrations.empty()) s.accuracy_after_ffc = res.final_accuracy;
  s.final_accuracy = res.final_accuracy;
  if (!res.rounds.empty() && res.rounds.back().alignment) {
    s.final_cosine = res.rounds.back().alignment->mean_cosine;
    s.final_norm_diff = res.rounds.back().alignment->mean_norm_diff;
  }
  {
    double cs = 0.0;
    double nd = 0.0;
    std::size_t n = 0;
    for (const auto& r : res.rounds) {
      if (!r.alignment) continue;
      cs += r.alignment->mean_cosine;
      nd += r.alignment->mean_norm_diff;
      ++n;
    }
    if (n > 0) {
      s.mean_cosine = cs / static_cast<double>(n);
      s.mean_norm_diff = nd / static_cast<double>(n);
    }
  }
  if (data.validation) s.validation_accuracy = accuracy(res.final_model, *data.validation);
  s.upload_bytes = res.ledger.total_upload_bytes();
  s.download_bytes = res.ledger.total_download_bytes();
  s.client_flops = res.ledger.total_client_flops();
  s.server_flops = res.ledger.server_flops();

  save_checkpoint(cfg.out_dir / "final.ckpt", res.final_model);

  if (cfg.dump_features) {
    std::vector<std::size_t> indices;
    std::vector<std::size_t> owners;
    for (std::size_t k = 0; k < data.partition.num_clients(); ++k) {
      for (std::size_t i : data.partition.assignments[k]) {
        indices.push_back(i);
        owners.push_back(k);
      }
    }
    const bool text = cfg.feature_format == FeatureFormat::kText;
    dump_features(res.final_model.extractor, data.train, indices, owners,
                  data.partition.num_clients(),
                  cfg.out_dir / (text ? "features_train.txt" : "features_train.bin"),
                  cfg.feature_format);
  }

  json per_client = json::array();
  for (std::size_t k = 0; k < res.ledger.num_clients(); ++k) {
    per_client.push_back(json{{"client", k},
                              {"upload_bytes", res.ledger.upload_bytes(k)},
                              {"download_bytes", res.ledger.download_bytes(k)},
                              {"flops", res.ledger.client_flops(k)}});
  }
  log.write(json{{"kind", "final"},
                 {"strategy", s.strategy},
                 {"alpha", s.alpha},
                 {"accuracy_before_ffc", s.accuracy_before_ffc},
                 {"accuracy_after_ffc", opt_json(s.accuracy_after_ffc)},
                 {"final_accuracy", s.final_accuracy},
                 {"validation_accuracy", opt_json(s.validation_accuracy)},
                 {"final_cosine", opt_json(s.final_cosine)},
                 {"final_norm_diff", opt_json(s.final_norm_diff)},
                 {"mean_cosine", opt_json(s.mean_cosine)},
                 {"mean_norm_diff", opt_json(s.mean_norm_diff)},
                 {"ledger",
                  json{{"strategy", res.ledger.strategy()},
                       {"upload_bytes", s.upload_bytes},
                       {"download_bytes", s.download_bytes},
                       {"client_flops", s.client_flops},
                       {"server_flops", s.server_flops},
                       {"clients", per_client}}}});

  std::ofstream summary(cfg.out_dir / "summary.tsv", std::ios::trunc);
  if (!summary) throw IoError("cannot write " + (cfg.out_dir / "summary.tsv").string());
  summary << kSummaryHeader << '\n' << summary_row(s) << '\n';
  return out;
}

SweepAxis parse_axis(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0 || eq + 1 == text.size()) {
    throw ConfigError("axis", "expected name=v1,v2,... but got '" + text + "'");
  }
  SweepAxis axis;
  axis.name = text.substr(0, eq);
  if (axis.name != "alpha" && axis.name != "seed" && axis.name != "strategy" &&
      axis.name != "method") {
    throw ConfigError("axis", "unknown axis '" + axis.name +
                                  "' (expected alpha, seed, strategy or method)");
  }
  std::stringstream ss(text.substr(eq + 1));
  std::string v;
  while (std::getline(ss, v, ',')) {
    if (v.empty()) throw ConfigError("axis." + axis.name, "empty value");
    if (axis.name == "alpha" && v != "iid") {
      std::size_t used = 0;
      double a = 0.0;
      try {
        a = std::stod(v, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != v.size() || !(a > 0.0)) {
        throw ConfigError("axis.alpha", "expected a positive number or iid, got '" + v + "'");
      }
    } else if (axis.name == "seed") {
      if (v.find_first_not_of("0123456789") != std::string::npos) {
        throw ConfigError("axis.seed", "expected a nonnegative integer, got '" + v + "'");
      }
    } else if (axis.name == "strategy") {
      if (v != "fedavg" && v != "fedprox" && v != "fednova" && v != "fedopt") {
        throw ConfigError("axis.strategy", "unknown strategy '" + v + "'");
      }
    } else if (axis.name == "method") {
      if (v != "baseline" && v != "spherefed") {
        throw ConfigError("axis.method", "unknown method '" + v + "'");
      }
    }
    axis.values.push_back(v);
  }
  if (axis.values.empty()) throw ConfigError("axis." + axis.name, "no values");
  return axis;
}

SweepResult cmd_sweep(const RunConfig& base, const std::vector<SweepAxis>& axes) {
  std::vector<SweepAxis> grid_axes;
  std::vector<std::string> seeds{std::to_string(base.seed)};
  for (const auto& a : axes) {
    if (a.name == "seed") seeds = a.values;
    else grid_axes.push_back(a);
  }
  for (std::size_t i = 0; i < axes.size(); ++i)
    for (std::size_t j = i + 1; j < axes.size(); ++j)
      if (axes[i].name == axes[j].name) throw ConfigError("axis." + axes[i].name, "given twice");

  SweepResult result;
  for (const auto& a : grid_axes) result.axis_names.push_back(a.name);

  // Enumerate cells in row-major order over the non-seed axes.
  std::size_t n_cells = 1;
  for (const auto& a : grid_axes) n_cells *= a.values.size();
  std::filesystem::create_directories(base.out_dir);
  std::ofstream runs_tsv(base.out_dir / "sweep_runs.tsv", std::ios::trunc);
  if (!runs_tsv) throw IoError("cannot write sweep_runs.tsv in " + base.out_dir.string());
  for (const auto& n : result.axis_names) runs_tsv << n << '\t';
  runs_tsv << "seed\tstatus\t" << kSummaryHeader << '\n';

  std::vector<std::vector<std::size_t>> cell_index(n_cells);
  for (std::size_t c = 0; c < n_cells; ++c) {
    SweepCell cell;
    std::size_t rem = c;
    cell_index[c].assign(grid_axes.size(), 0);
    for (std::size_t a = grid_axes.size(); a-- > 0;) {
      cell_index[c][a] = rem % grid_axes[a].values.size();
      rem /= grid_axes[a].values.size();
    }
    for (std::size_t a = 0; a < grid_axes.size(); ++a) {
      cell.values.push_back(grid_axes[a].values[cell_index[c][a]]);
    }
    for (const auto& seed : seeds) {
      ++cell.runs;
      std::string name;
      for (std::size_t a = 0; a < grid_axes.size(); ++a) {
        name += grid_axes[a].name + "-" + cell.values[a] + "_";
      }
      name += "seed-" + seed;
      for (const auto& v : cell.values) runs_tsv << v << '\t';
      runs_tsv << seed << '\t';
      try {
        RunConfig cfg = base;
        for (std::size_t a = 0; a < grid_axes.size(); ++a) {
          const auto& axis = grid_axes[a].name;
          const auto& v = cell.values[a];
          if (axis == "alpha") {
            cfg.alpha = v == "iid" ? std::nullopt : std::optional<double>(std::stod(v));
          } else if (axis == "strategy") {
            RunConfig probe = parse_config(json{{"training", {{"strategy", v}}}});
            cfg.fed.strategy = probe.fed.strategy;
          } else if (axis == "method") {
            apply_method(cfg, v);
          }
        }
        cfg.seed = std::stoull(seed);
        cfg.fed.seed = cfg.seed;
        cfg.out_dir = base.out_dir / name;
        std::cerr << "sweep: " << name << '\n';
        const auto out = cmd_run(cfg);
        cell.accuracy.push_back(out.summary.final_accuracy);
        cell.accuracy_before_ffc.push_back(out.summary.accuracy_before_ffc);
        if (out.summary.mean_cosine) cell.mean_cosine.push_back(*out.summary.mean_cosine);
        if (out.summary.mean_norm_diff) cell.mean_norm_diff.push_back(*out.summary.mean_norm_diff);
        runs_tsv << "ok\t" << summary_row(out.summary) << '\n';
      } catch (const std::exception& e) {
        ++cell.failed;
        ++result.failed_runs;
        cell.errors.push_back(name + ": " + e.what());
        std::cerr << "sweep: " << name << " failed: " << e.what() << '\n';
        runs_tsv << "failed\t" << e.what() << '\n';
      }
      runs_tsv.flush();
    }
    result.cells.push_back(std::move(cell));
  }

  // Deltas of mean final accuracy against the same cell with one axis reset
  // to its first value.
  auto find_cell = [&](std::vector<std::size_t> idx) -> const SweepCell& {
    std::size_t c = 0;
    for (std::size_t a = 0; a < grid_axes.size(); ++a) c = c * grid_axes[a].values.size() + idx[a];
    return result.cells[c];
  };

  std::ofstream tsv(base.out_dir / "sweep.tsv", std::ios::trunc);
  if (!tsv) throw IoError("cannot write sweep.tsv in " + base.out_dir.string());
  for (const auto& n : result.axis_names) tsv << n << '\t';
  tsv << "status\tseeds\taccuracy_mean\taccuracy_std\taccuracy_before_ffc_mean\tmean_cosine\t"
         "mean_norm_diff";
  for (const auto& a : grid_axes) {
    if (a.values.size() > 1) tsv << "\tdelta_vs_" << a.name << '=' << a.values.front();
  }
  tsv << '\n';
  for (std::size_t c = 0; c < result.cells.size(); ++c) {
    const auto& cell = result.cells[c];
    for (const auto& v : cell.values) tsv << v << '\t';
    const std::size_t ok = cell.runs - cell.failed;
    if (cell.failed == 0) tsv << "ok";
    else tsv << "failed(" << cell.failed << "/" << cell.runs << ")";
    tsv << '\t' << ok << '\t';
    if (ok == 0) {
      tsv << "NA\tNA\tNA\tNA\tNA";
    } else {
      tsv << fmt(mean(cell.accuracy)) << '\t' << fmt(stdev(cell.accuracy)) << '\t'
          << fmt(mean(cell.accuracy_before_ffc)) << '\t'
          << (cell.mean_cosine.empty() ? "NA" : fmt(mean(cell.mean_cosine))) << '\t'
          << (cell.mean_norm_diff.empty() ? "NA" : fmt(mean(cell.mean_norm_diff)));
    }
    for (std::size_t a = 0; a < grid_axes.size(); ++a) {
      if (grid_axes[a].values.size() <= 1) continue;
      auto ref_idx = cell_index[c];
      ref_idx[a] = 0;
      const auto& ref = find_cell(ref_idx);
      tsv << '\t';
      if (cell_index[c][a] == 0) {
        tsv << "base";
      } else if (cell.accuracy.empty() || ref.accuracy.empty()) {
        tsv << "NA";
      } else {
        const double d = 100.0 * (mean(cell.accuracy) - mean(ref.accuracy));
        tsv << (d >= 0 ? "+" : "") << fmt(d, 2) << (d > 0 ? " ↑" : d < 0 ? " ↓" : " =");
      }
    }
    tsv << '\n';
  }
  return result;
}

CalibrateReport cmd_calibrate(const std::filesystem::path& checkpoint, const RunConfig& cfg,
                              std::vector<double> lambdas) {
  Model model = load_checkpoint(checkpoint);
  const RunData data = build_data(cfg);
  if (model.extractor.input_dim() != data.train.dim()) {
    throw CheckpointError("checkpoint expects inputs of width " +
                          std::to_string(model.extractor.input_dim()) + " but the data has " +
                          std::to_string(data.train.dim()));
  }
  if (model.head.num_classes() != data.train.num_classes) {
    throw CheckpointError("checkpoint has " + std::to_string(model.head.num_classes()) +
                          " classes but the data has " + std::to_string(data.train.num_classes));
  }
  if (lambdas.empty()) lambdas = cfg.lambda_grid;
  if (lambdas.empty()) lambdas.push_back(cfg.fed.calibration.lambda);
  for (double l : lambdas) {
    if (!(l >= 0.0)) throw ConfigError("lambda", "must be nonnegative");
  }

  CalibrateReport report;
  report.accuracy_before = accuracy(model, data.test);
  std::vector<CalibStats> stats;
  for (const auto& idx : data.partition.assignments) {
    stats.push_back(client_stats(model.extractor, data.train, idx));
    report.payload_bytes += serialize(stats.back()).size() - kCalibStatsHeaderBytes;
  }
  const Matrix train_features = normalized_features(model.extractor, data.train);

  std::filesystem::create_directories(cfg.out_dir);
  for (std::size_t i = 0; i < lambdas.size(); ++i) {
    const auto solved = server_solve(stats, lambdas[i]);
    CalibrateRow row;
    row.lambda = lambdas[i];
    row.regularized = solved.regularized;
    row.train_mse = head_mse(solved.weights, train_features, data.train.labels);
    Model calibrated{model.extractor, ClassifierHead{solved.weights, true, true, 1.0}};
    row.accuracy_after = accuracy(calibrated, data.test);
    row.checkpoint = cfg.out_dir / (lambdas.size() == 1
                                        ? std::string("calibrated.ckpt")
                                        : "calibrated_" + std::to_string(i) + ".ckpt");
    save_checkpoint(row.checkpoint, calibrated);
    report.rows.push_back(row);
  }

  std::ofstream tsv(cfg.out_dir / "calibrate.tsv", std::ios::trunc);
  if (!tsv) throw IoError("cannot write calibrate.tsv in " + cfg.out_dir.string());
  tsv << "lambda\taccuracy_before\taccuracy_after\tdelta\ttrain_mse\tregularized\tcheckpoint\n";
  for (const auto& r : report.rows) {
    tsv << r.lambda << '\t' << fmt(report.accuracy_before) << '\t' << fmt(r.accuracy_after) << '\t'
        << fmt(r.accuracy_after - report.accuracy_before) << '\t' << std::setprecision(10)
        << r.train_mse << '\t' << (r.regularized ? "yes" : "no") << '\t'
        << r.checkpoint.filename().string() << '\n';
  }
  return report;
}

}  // namespace spherefed
