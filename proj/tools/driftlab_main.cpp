// driftlab command-line runner: configuration-driven simulation, stopping
// derivative estimation, and theorem verification.

#include <cstdint>
#include <exception>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "driftlab/runner.hpp"
#include "driftlab/tuning.hpp"

namespace {

struct CliArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir = ".";
  int threads = 1;
  std::string format = "csv";
  bool all = false;
};

void add_common_flags(CLI::App* cmd, CliArgs& args, bool needs_config) {
  if (needs_config)
    cmd->add_option("--config", args.config, "experiment configuration file")
        ->required();
  cmd->add_option("--seed", args.seed, "override the configured master seed");
  cmd->add_option("--out", args.out_dir, "artifact output directory");
  cmd->add_option("--threads", args.threads, "worker threads (speed only)")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--format", args.format, "stdout summary format")
      ->check(CLI::IsMember({"csv", "json"}));
}

int run_with_config(const CliArgs& args, const char* expected_kind_prefix) {
  driftlab::RunOptions opt;
  opt.seed_override = args.seed;
  opt.out_dir = args.out_dir;
  opt.threads = args.threads;
  opt.format = args.format;
  // The subcommand constrains the experiment kind; peek at it first.
  {
    std::ifstream is(args.config);
    driftlab::require(static_cast<bool>(is), driftlab::Errc::config_error,
                      "cannot open config file " + args.config);
    driftlab::json doc;
    try {
      is >> doc;
    } catch (const driftlab::json::exception& e) {
      driftlab::raise(driftlab::Errc::config_error,
                      std::string("config parse error: ") + e.what());
    }
    const std::string kind = doc.value("kind", std::string());
    driftlab::require(kind.rfind(expected_kind_prefix, 0) == 0,
                      driftlab::Errc::config_error,
                      "config kind '" + kind + "' does not match subcommand");
  }
  return driftlab::run_config_file(args.config, opt);
}

}  // namespace

int main(int argc, char** argv) {
  driftlab::tune_allocator();
  CLI::App app{"driftlab: Monte Carlo stopping-derivative laboratory"};
  app.require_subcommand(1);

  CliArgs args;
  auto* simulate = app.add_subcommand("simulate", "simulate paths to CSV");
  add_common_flags(simulate, args, true);
  auto* estimate = app.add_subcommand(
      "estimate", "estimate drift / variance rate / covariance / generator");
  add_common_flags(estimate, args, true);
  auto* verify = app.add_subcommand("verify", "run one theorem or rule check");
  add_common_flags(verify, args, true);
  auto* suite = app.add_subcommand("suite", "run the built-in check suite");
  add_common_flags(suite, args, false);
  suite->add_flag("--all", args.all, "run every check (default)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (simulate->parsed()) return run_with_config(args, "simulate");
    if (estimate->parsed()) return run_with_config(args, "");
    if (verify->parsed()) return run_with_config(args, "check:");
    if (suite->parsed()) {
      driftlab::require(args.seed.has_value(), driftlab::Errc::config_error,
                        "suite requires an explicit --seed");
      driftlab::RunOptions opt;
      opt.out_dir = args.out_dir;
      opt.threads = args.threads;
      opt.format = args.format;
      return driftlab::run_suite_command(opt, *args.seed);
    }
  } catch (const std::exception& e) {
    return driftlab::handle_run_error(e);
  }
  return 2;
}
