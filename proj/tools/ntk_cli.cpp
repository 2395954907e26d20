// ntk: infinite-width kernel experiments from a JSON config.
//
//   ntk <kernel|compare|sweep-widths|mc-validate|train-finite> --config PATH
//       [--out DIR] [--seed N] [--threads N] [--ridge F]
//
// Flags override the matching config fields. Exit codes: 0 success,
// 2 configuration error, 3 numerical failure.

#include <cstdlib>
#include <functional>
#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>

#include "ntk/harness.hpp"

namespace {

constexpr int kConfigError = 2;
constexpr int kNumericalError = 3;

using Command = std::function<ntk::CsvTable(const ntk::ExperimentConfig&, const ntk::RunOptions&)>;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Infinite-width NNGP / NTK kernel experiments"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  double ridge = 0.0;
  std::size_t threads = 1;

  const std::map<std::string, Command> commands = {
      {"kernel", ntk::cmd_kernel},
      {"compare", ntk::cmd_compare},
      {"sweep-widths", ntk::cmd_sweep_widths},
      {"mc-validate", ntk::cmd_mc_validate},
      {"train-finite", ntk::cmd_train_finite},
  };
  const std::map<std::string, std::string> help = {
      {"kernel", "compute and store NNGP/NTK kernel files"},
      {"compare", "paired NTK vs improved-standard test errors"},
      {"sweep-widths", "improved-standard error across baseline widths"},
      {"mc-validate", "Monte Carlo check of analytic kernels"},
      {"train-finite", "SGD-train finite networks over a learning-rate grid"},
  };

  std::map<std::string, CLI::App*> subs;
  std::map<std::string, std::map<std::string, CLI::Option*>> opts;
  for (const auto& [name, _] : commands) {
    auto* sub = app.add_subcommand(name, help.at(name));
    auto& o = opts[name];
    o["config"] = sub->add_option("--config", config_path, "experiment config (JSON)")->required();
    o["out"] = sub->add_option("--out", out_dir, "output directory");
    o["seed"] = sub->add_option("--seed", seed, "single run seed (replaces config seeds)");
    o["threads"] = sub->add_option("--threads", threads, "parallel jobs")->check(CLI::PositiveNumber);
    o["ridge"] = sub->add_option("--ridge", ridge, "ridge added to kernel solves")->check(CLI::NonNegativeNumber);
    subs[name] = sub;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kConfigError;
  }

  for (const auto& [name, sub] : subs) {
    if (!sub->parsed()) continue;
    auto& o = opts[name];
    ntk::Overrides ov;
    if (o["out"]->count()) ov.out = out_dir;
    if (o["seed"]->count()) ov.seed = seed;
    if (o["ridge"]->count()) ov.ridge = ridge;
    try {
      const auto config = ntk::load_config(config_path, ov);
      const auto table = commands.at(name)(config, {.threads = threads});
      std::cout << table.str();
      return EXIT_SUCCESS;
    } catch (const ntk::NumericalError& e) {
      std::cerr << "numerical failure: " << e.what() << '\n';
      return kNumericalError;
    } catch (const ntk::DivergentKernelError& e) {
      std::cerr << "numerical failure: " << e.what() << '\n';
      return kNumericalError;
    } catch (const ntk::Error& e) {
      std::cerr << "error: " << e.what() << '\n';
      return kConfigError;
    } catch (const std::filesystem::filesystem_error& e) {
      std::cerr << "error: " << e.what() << '\n';
      return kConfigError;
    }
  }
  return kConfigError;
}
