// Command-line front end: run, sweep and calibrate.
//
// Exit codes: 0 success, 2 configuration error, 3 runtime error.

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "spherefed/config.hpp"
#include "spherefed/errors.hpp"
#include "spherefed/runner.hpp"

namespace {

constexpr int kConfigExit = 2;
constexpr int kRuntimeExit = 3;

void print_summary(const spherefed::RunSummary& s) {
  std::cout << "strategy " << s.strategy << ", alpha " << s.alpha << ", head " << s.head
            << ", loss " << s.loss << '\n'
            << "  accuracy before FFC: " << s.accuracy_before_ffc << '\n';
  if (s.accuracy_after_ffc) std::cout << "  accuracy after FFC:  " << *s.accuracy_after_ffc << '\n';
  if (s.final_cosine) {
    std::cout << "  client head cosine:  " << *s.final_cosine << '\n'
              << "  client head |norm diff|: " << *s.final_norm_diff << '\n';
  }
  if (s.validation_accuracy) std::cout << "  validation accuracy: " << *s.validation_accuracy << '\n';
  std::cout << "  classifier traffic: up " << s.upload_bytes << " B, down " << s.download_bytes
            << " B; client FLOPs " << s.client_flops << ", server FLOPs " << s.server_flops
            << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated training with fixed hyperspherical classifiers and closed-form calibration"};
  app.require_subcommand(1);
  app.fallthrough();  // global options may follow the subcommand

  spherefed::CliOverrides ov;
  std::uint64_t seed = 0;
  std::string out_dir;
  std::size_t threads = 1;
  auto* seed_opt = app.add_option("--seed", seed, "Override the config seed");
  auto* out_opt = app.add_option("--out-dir", out_dir, "Override the output directory");
  auto* threads_opt =
      app.add_option("--threads", threads, "Client-parallel worker threads")->check(CLI::PositiveNumber);

  std::string config_path;
  auto* run = app.add_subcommand("run", "Run one federated experiment");
  run->add_option("config", config_path, "Run config (JSON)")->required();

  std::vector<std::string> axis_specs;
  auto* sweep = app.add_subcommand("sweep", "Run a grid of experiments and compare them");
  sweep->add_option("config", config_path, "Base run config (JSON)")->required();
  sweep->add_option("--axis", axis_specs,
                    "name=v1,v2,... with name in alpha, seed, strategy, method; repeatable")
      ->required();

  std::string ckpt_path;
  std::vector<double> lambdas;
  auto* calibrate = app.add_subcommand("calibrate", "Calibrate a saved model's classifier");
  calibrate->add_option("checkpoint", ckpt_path, "Model checkpoint")->required();
  calibrate->add_option("config", config_path, "Config describing data and partition")->required();
  calibrate->add_option("--lambda", lambdas, "Ridge strength; repeat for a grid")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfigExit;
  }
  if (*seed_opt) ov.seed = seed;
  if (*out_opt) ov.out_dir = out_dir;
  if (*threads_opt) ov.threads = threads;

  try {
    auto cfg = spherefed::load_config(config_path);
    spherefed::apply_overrides(cfg, ov);
    if (*run) {
      const auto out = spherefed::cmd_run(cfg);
      print_summary(out.summary);
      for (const auto& row : out.lambda_grid) {
        std::cout << "  lambda " << row.lambda << ": accuracy " << row.accuracy << '\n';
      }
      std::cout << "artifacts in " << cfg.out_dir.string() << '\n';
    } else if (*sweep) {
      std::vector<spherefed::SweepAxis> axes;
      for (const auto& s : axis_specs) axes.push_back(spherefed::parse_axis(s));
      const auto res = spherefed::cmd_sweep(cfg, axes);
      std::cout << "sweep table: " << (cfg.out_dir / "sweep.tsv").string() << '\n';
      if (res.failed_runs > 0) {
        std::cerr << res.failed_runs << " run(s) failed\n";
        return kRuntimeExit;
      }
    } else if (*calibrate) {
      const auto rep = spherefed::cmd_calibrate(ckpt_path, cfg, lambdas);
      std::cout << "accuracy before: " << rep.accuracy_before << '\n';
      for (const auto& r : rep.rows) {
        std::cout << "lambda " << r.lambda << ": accuracy after " << r.accuracy_after
                  << (r.regularized ? " (jitter added)" : "") << " -> " << r.checkpoint.string()
                  << '\n';
      }
    }
  } catch (const spherefed::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigExit;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeExit;
  }
  return 0;
}
