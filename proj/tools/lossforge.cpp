#include <cstdio>
#include <cstring>
#include <optional>
#include <string>
#include <vector>

#include "lossforge/runner.hpp"

namespace {

using lossforge::ConfigError;

constexpr const char* kUsage =
    "usage: lossforge <command> [options]\n"
    "\n"
    "commands:\n"
    "  gen-data --config PATH [--out DIR]         write dataset.csv / test.csv + sidecars\n"
    "  run      --config PATH [--seed N] [--out DIR]\n"
    "                                             one training run -> alpha.json, runlog.jsonl,\n"
    "                                             metrics.csv, meta.json\n"
    "  sweep    --config PATH [--out DIR] [--jobs N]\n"
    "                                             tradeoff sweep over the config's lambda grid\n"
    "                                             -> pareto.csv\n"
    "  verify   [which] (lemma1|lemma2|neumann|hypergrad|theorem1|all, default all)\n"
    "                                             print JSON verdicts; exit 4 on failure\n"
    "  report   --out DIR                         summarize a finished run directory\n"
    "\n"
    "exit codes: 0 ok, 2 bad config/usage, 3 diverged, 4 verification failed\n"
    "env: LOSSFORGE_LOG=error|info|debug\n";

struct Cli {
  std::string command;
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  int jobs = 1;
  std::string which = "all";
};

Cli parse_cli(int argc, char** argv) {
  Cli cli;
  if (argc < 2) throw ConfigError("missing command");
  cli.command = argv[1];
  int i = 2;
  if (cli.command == "verify" && i < argc && argv[i][0] != '-') cli.which = argv[i++];
  for (; i < argc; ++i) {
    std::string a = argv[i];
    auto need = [&](const char* flag) -> std::string {
      if (i + 1 >= argc) throw ConfigError(std::string(flag) + " needs a value");
      return argv[++i];
    };
    if (a == "--config")
      cli.config_path = need("--config");
    else if (a == "--out")
      cli.out_dir = need("--out");
    else if (a == "--seed")
      cli.seed = std::stoull(need("--seed"));
    else if (a == "--jobs")
      cli.jobs = std::stoi(need("--jobs"));
    else
      throw ConfigError("unknown flag '" + a + "'");
  }
  return cli;
}

int dispatch(const Cli& cli) {
  using namespace lossforge;
  if (cli.command == "verify") {
    auto verdicts = runner::cmd_verify(cli.which);
    nlohmann::json out = nlohmann::json::array();
    for (const auto& v : verdicts) out.push_back(v);
    std::printf("%s\n", out.dump(2).c_str());
    return runner::verdicts_pass(verdicts) ? 0 : 4;
  }
  if (cli.command == "report") {
    if (cli.out_dir.empty()) throw ConfigError("report needs --out DIR");
    std::printf("%s", runner::cmd_report(cli.out_dir).c_str());
    return 0;
  }
  if (cli.config_path.empty()) throw ConfigError(cli.command + " needs --config PATH");
  config::ExperimentConfig cfg = config::load_config(cli.config_path);
  if (cli.command == "gen-data") {
    runner::cmd_gen_data(cfg, cli.out_dir.empty() ? cfg.run.dir : cli.out_dir);
    return 0;
  }
  if (cli.command == "run") {
    auto res = runner::cmd_run(cfg, cli.out_dir, cli.seed);
    std::printf("run done: mode=%s seed=%llu std_err=%.6f balanced_err=%.6f\n", res.mode.c_str(),
                static_cast<unsigned long long>(res.seed), res.report.std_err,
                res.report.balanced_err);
    return 0;
  }
  if (cli.command == "sweep") {
    auto rows = runner::cmd_sweep(cfg, cfg.run.lambda_grid, cli.jobs,
                                  cli.out_dir.empty() ? cfg.run.dir : cli.out_dir);
    std::printf("sweep done: %zu rows\n", rows.size());
    return 0;
  }
  throw ConfigError("unknown command '" + cli.command + "'");
}

}  // namespace

int main(int argc, char** argv) {
  using namespace lossforge;
  if (argc >= 2 && (!std::strcmp(argv[1], "--help") || !std::strcmp(argv[1], "-h"))) {
    std::fputs(kUsage, stdout);
    return 0;
  }
  try {
    return dispatch(parse_cli(argc, argv));
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "lossforge: %s\n", e.what());
    return 3;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "lossforge: %s\n%s", e.what(), kUsage);
    return 2;
  } catch (const IoError& e) {
    std::fprintf(stderr, "lossforge: %s\n", e.what());
    return 2;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "lossforge: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "lossforge: %s\n", e.what());
    return 1;
  }
}
