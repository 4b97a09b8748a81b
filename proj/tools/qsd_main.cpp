#include <CLI11.hpp>
#include <iostream>

#include "qsd/cli.hpp"

namespace {

int run_cli(int argc, char** argv) {
  CLI::App app{"qsd: quasi-stationary distributions of killed one-dimensional diffusions"};
  app.require_subcommand(1);

  std::string output_dir;
  std::uint64_t seed = 0;
  bool quick = false;
  app.add_option("--output-dir", output_dir, "Directory for CSV artifacts and the run report");
  auto* seed_opt = app.add_option("--seed", seed, "Override montecarlo.seed");
  app.add_flag("--quick", quick, "Scale sample counts down by 10x");

  std::string config_path;
  std::vector<std::string> subcommands = qsd::cli::command_names();
  subcommands.push_back("run");
  std::map<std::string, CLI::App*> subs;
  for (const auto& name : subcommands) {
    std::string help = name == "run" ? "Execute the commands listed in [run] commands" : "Run the " + name + " command";
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("config", config_path, "Run config (INI)")->required()->check(CLI::ExistingFile);
    sub->fallthrough();
    subs[name] = sub;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? qsd::cli::kOk : qsd::cli::kConfigError;
  }

  qsd::cli::Overrides ov;
  if (!output_dir.empty()) ov.output_dir = output_dir;
  if (seed_opt->count() > 0) ov.seed = seed;
  ov.quick = quick;

  std::string chosen;
  for (const auto& [name, sub] : subs) {
    if (sub->parsed()) chosen = name;
  }

  try {
    qsd::cli::RunConfig cfg = qsd::cli::load_config(config_path, ov);
    std::vector<std::string> cmds = chosen == "run" ? cfg.commands : std::vector<std::string>{chosen};
    if (cmds.empty()) throw qsd::ConfigError("cli", "run.commands: no commands listed");
    qsd::cli::require_seed(cfg, cmds);
    qsd::cli::Runner runner(std::move(cfg), std::cout);
    auto report = runner.run(cmds);
    for (const auto& c : report.commands) {
      if (c.exit_code != qsd::cli::kOk) std::cerr << "error [" << c.name << "] " << c.message << "\n";
    }
    std::cout << "report: " << (runner.config().output_dir / "report.txt").string() << "\n";
    return report.exit_code();
  } catch (const qsd::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return qsd::cli::kConfigError;
  } catch (const qsd::cli::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return qsd::cli::kIoError;
  }
}

}  // namespace

int main(int argc, char** argv) { return run_cli(argc, argv); }
