#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "spherefed/config.hpp"
#include "spherefed/errors.hpp"
#include "spherefed/runner.hpp"

using namespace spherefed;
using nlohmann::json;

namespace {

std::filesystem::path scratch(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("spherefed_cli_" + name);
  std::filesystem::remove_all(p);
  return p;
}

json minimal() {
  return json::parse(R"({
    "seed": 3,
    "dataset": {"classes": 10, "dim": 32, "per_class": 20},
    "partition": {"clients": 4, "alpha": 0.5},
    "model": {"hidden": [24], "feature_dim": 16},
    "training": {"rounds": 5, "local_epochs": 1, "batch_size": 16},
    "calibration": {"mode": "once"}
  })");
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string config_error_key(const json& j) {
  try {
    parse_config(j);
  } catch (const ConfigError& e) {
    return e.key();
  }
  return "";
}

}  // namespace

TEST_CASE("defaults and echo") {
  const auto cfg = parse_config(json::object());
  CHECK(cfg.head == HeadKind::kFixedOrthonormal);
  CHECK(cfg.loss == LossKind::kMse);
  CHECK(cfg.fed.lr == 0.5);
  CHECK(cfg.clients == 10);
  CHECK(cfg.fed.rounds == 40);
  const auto ce = parse_config(json::parse(R"({"model": {"head": "trainable", "loss": "ce"}})"));
  CHECK(ce.fed.lr == 0.1);
  CHECK_FALSE(ce.normalize_features);
  // The echo is a complete config that parses back to itself.
  const auto echo = to_json(parse_config(minimal()));
  CHECK(to_json(parse_config(echo)) == echo);
  const auto iid = parse_config(json::parse(R"({"partition": {"alpha": "iid"}})"));
  CHECK_FALSE(iid.alpha.has_value());
  CHECK(to_json(iid)["partition"]["alpha"] == "iid");
}

TEST_CASE("config errors name the offending key") {
  CHECK(config_error_key(json::parse(R"({"trainig": {}})")) == "trainig");
  CHECK(config_error_key(json::parse(R"({"training": {"lr": "fast"}})")) == "training.lr");
  CHECK(config_error_key(json::parse(R"({"training": {"learning_rate": 0.1}})")) ==
        "training.learning_rate");
  CHECK(config_error_key(json::parse(R"({"model": {"head": "wobbly"}})")) == "model.head");
  CHECK(config_error_key(json::parse(R"({"model": {"feature_dim": 8}})")) == "model.feature_dim");
  CHECK(config_error_key(json::parse(R"({"partition": {"alpha": -1}})")) == "partition.alpha");
  CHECK(config_error_key(json::parse(R"({"partition": {"alpha": "noniid"}})")) == "partition.alpha");
  CHECK(config_error_key(json::parse(R"({"training": {"momentum": 1.0}})")) == "training.momentum");
  CHECK(config_error_key(json::parse(R"({"calibration": {"mode": "sometimes"}})")) == "calibration.mode");
  CHECK(config_error_key(json::parse(R"({"dataset": {"kind": "idx"}})")) == "dataset.train_images");
  CHECK(config_error_key(json::parse("[1, 2]")) == "<root>");
  // A trainable head may be narrower than the class count.
  CHECK_NOTHROW(parse_config(json::parse(R"({"model": {"feature_dim": 8, "head": "trainable"}})")));
}

TEST_CASE("cross-entropy on the orthonormal head without tau warns and uses 1") {
  const auto cfg = parse_config(json::parse(R"({"model": {"loss": "ce"}})"));
  CHECK(cfg.tau == 1.0);
  CHECK(cfg.tau_defaulted);
  CHECK(cfg.warnings.size() == 1);
  CHECK(parse_config(json::parse(R"({"model": {"loss": "ce", "tau": 16}})")).warnings.empty());
}

TEST_CASE("run writes a deterministic log and its artifacts") {
  auto cfg = parse_config(minimal());
  cfg.out_dir = scratch("run");
  cfg.dump_features = true;
  cfg.lambda_grid = {0.0, 0.1};
  const auto out = cmd_run(cfg);
  const std::string first = slurp(cfg.out_dir / "run.jsonl");

  std::istringstream lines(first);
  std::string line;
  std::size_t rounds = 0, calibrations = 0, grid = 0, finals = 0, n = 0;
  while (std::getline(lines, line)) {
    const auto rec = json::parse(line);
    if (n++ == 0) {
      CHECK(rec["kind"] == "config");
      CHECK(parse_config(rec["config"]).fed.rounds == 5);
    }
    const std::string kind = rec["kind"];
    rounds += kind == "round";
    calibrations += kind == "calibration";
    grid += kind == "lambda_grid";
    finals += kind == "final";
  }
  CHECK(rounds == 5);
  CHECK(calibrations == 1);
  CHECK(grid == 2);
  CHECK(finals == 1);
  CHECK(out.summary.accuracy_after_ffc.has_value());
  CHECK(std::filesystem::exists(cfg.out_dir / "final.ckpt"));
  CHECK(std::filesystem::exists(cfg.out_dir / "summary.tsv"));
  const auto dump = read_features(cfg.out_dir / "features_train.txt");
  CHECK(dump.num_clients == 4);

  cmd_run(cfg);
  CHECK(slurp(cfg.out_dir / "run.jsonl") == first);
  std::filesystem::remove_all(cfg.out_dir);
}

TEST_CASE("warnings reach the run log") {
  auto j = minimal();
  j["model"]["loss"] = "ce";
  auto cfg = parse_config(j);
  cfg.out_dir = scratch("warn");
  cmd_run(cfg);
  const auto log = slurp(cfg.out_dir / "run.jsonl");
  CHECK(log.find("\"kind\":\"warning\"") != std::string::npos);
  std::filesystem::remove_all(cfg.out_dir);
}

TEST_CASE("sweep builds the cross-product and reports deltas") {
  auto cfg = parse_config(minimal());
  cfg.fed.rounds = 2;
  cfg.out_dir = scratch("sweep");
  const auto res = cmd_sweep(cfg, {parse_axis("alpha=iid,0.5,0.1"), parse_axis("method=baseline,spherefed")});
  CHECK(res.cells.size() == 6);
  CHECK(res.failed_runs == 0);
  std::ifstream tsv(cfg.out_dir / "sweep.tsv");
  std::string header, line;
  std::getline(tsv, header);
  CHECK(header.find("delta_vs_alpha=iid") != std::string::npos);
  CHECK(header.find("delta_vs_method=baseline") != std::string::npos);
  std::size_t rows = 0;
  while (std::getline(tsv, line)) ++rows;
  CHECK(rows == 6);
  std::filesystem::remove_all(cfg.out_dir);
}

TEST_CASE("seed sweep reports mean and spread; failed cells do not stop the sweep") {
  auto j = minimal();
  j["model"] = json::parse(R"({"hidden": [16], "feature_dim": 6, "head": "trainable", "loss": "ce"})");
  j["calibration"]["mode"] = "off";
  auto cfg = parse_config(j);
  cfg.fed.rounds = 2;
  cfg.out_dir = scratch("sweep_fail");
  // spherefed needs feature_dim >= classes, so that cell fails.
  const auto res = cmd_sweep(cfg, {parse_axis("seed=1,2,3"), parse_axis("method=baseline,spherefed")});
  REQUIRE(res.cells.size() == 2);
  CHECK(res.cells[0].accuracy.size() == 3);
  CHECK(res.cells[1].failed == 3);
  CHECK(res.failed_runs == 3);
  const auto table = slurp(cfg.out_dir / "sweep.tsv");
  CHECK(table.find("accuracy_std") != std::string::npos);
  CHECK(table.find("failed(3/3)") != std::string::npos);
  CHECK_THROWS_AS(parse_axis("colour=red"), ConfigError);
  CHECK_THROWS_AS(parse_axis("alpha=0.1,zero"), ConfigError);
  CHECK_THROWS_AS(parse_axis("alpha"), ConfigError);
  std::filesystem::remove_all(cfg.out_dir);
}

TEST_CASE("calibrate: one row per lambda, idempotent, checks dimensions") {
  auto cfg = parse_config(minimal());
  cfg.out_dir = scratch("calib");
  cmd_run(cfg);
  const auto ckpt = cfg.out_dir / "final.ckpt";
  auto cal_cfg = cfg;
  cal_cfg.out_dir = cfg.out_dir / "cal";
  const auto grid = cmd_calibrate(ckpt, cal_cfg, {0.0, 0.01, 1.0});
  CHECK(grid.rows.size() == 3);
  CHECK(grid.payload_bytes == 4 * 16 * (16 + 10) * 8);
  const auto once = cmd_calibrate(ckpt, cal_cfg, {0.0});
  const auto again = cmd_calibrate(once.rows[0].checkpoint, cal_cfg, {0.0});
  const Model a = load_checkpoint(once.rows[0].checkpoint);
  const Model b = load_checkpoint(again.rows[0].checkpoint);
  CHECK(max_abs_diff(a.head.weights, b.head.weights) < 1e-9);
  // The run already ended with the same calibration.
  CHECK(max_abs_diff(a.head.weights, load_checkpoint(ckpt).head.weights) < 1e-9);

  auto other = cfg;
  other.dataset.dim = 20;
  CHECK_THROWS_AS(cmd_calibrate(ckpt, other, {0.0}), CheckpointError);
  std::filesystem::remove_all(cfg.out_dir);
}

TEST_CASE("command-line exit codes") {
  const std::string exe = SPHEREFED_CLI_PATH;
  const auto dir = scratch("exit");
  std::filesystem::create_directories(dir);
  auto write = [&](const std::string& name, const std::string& text) {
    std::ofstream(dir / name) << text;
    return (dir / name).string();
  };
  auto status = [](const std::string& cmd) {
    const int raw = std::system((cmd + " >/dev/null 2>&1").c_str());
    return WEXITSTATUS(raw);
  };
  const auto good = write("good.json", minimal().dump());
  const auto typo = write("typo.json", R"({"training": {"rounds": 2, "epochs": 3}})");
  const auto broken = write("broken.json", "{ not json");
  const std::string out = " --out-dir " + (dir / "out").string();
  CHECK(status(exe + " run " + good + out) == 0);
  CHECK(status(exe + " run " + typo + out) == 2);
  CHECK(status(exe + " run " + broken + out) == 2);
  CHECK(status(exe + " run " + (dir / "missing.json").string()) == 2);
  CHECK(status(exe + " frobnicate") == 2);
  CHECK(status(exe + " calibrate " + (dir / "nope.ckpt").string() + " " + good + out) == 3);
  CHECK(status(exe + " calibrate " + (dir / "out" / "final.ckpt").string() + " " + good + out +
               " --lambda 0,0.1") == 0);
  CHECK(status(exe + " sweep " + good + out + " --axis seed=1,2") == 0);
  CHECK(status(exe + " sweep " + good + out + " --axis bogus=1") == 2);
  std::filesystem::remove_all(dir);
}
