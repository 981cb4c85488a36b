#include <iostream>

#include <CLI11.hpp>

#include "commands.hpp"

namespace {

using namespace cphylo;
using namespace cphylo::cli;

auto dispatch(int argc, char** argv) -> int {
  auto app = CLI::App{"Lag-coupled MCMC for the Stochastic Dollo model"};
  app.require_subcommand(1);

  auto config_path = std::string{};
  auto* simulate = app.add_subcommand("simulate", "simulate a data set from the config's 'simulate' section");
  simulate->add_option("config", config_path, "experiment config (YAML)")->required();

  auto run_opt = Run_options{};
  auto* run = app.add_subcommand("run", "run coupled pairs (or plain marginal chains)");
  run->add_option("config", config_path, "experiment config (YAML)")->required();
  run->add_flag("--marginal-only", run_opt.marginal_only, "run independent marginal chains for ASDSF baselines");
  run->add_flag("--resume", run_opt.resume, "skip pairs whose records already exist");
  run->add_option("--threads", run_opt.threads, "maximum number of worker threads")->check(CLI::PositiveNumber);

  auto dir = std::string{};
  auto diag_config = std::string{};
  auto diag_opt = Diagnose_options{};
  auto* diagnose = app.add_subcommand("diagnose", "TV bounds, survival curves and ASDSF from a run directory");
  diagnose->add_option("dir", dir, "output directory of a run")->required();
  diagnose->add_option("--config", diag_config, "take diagnostic settings from this config");
  diagnose->add_option("--stride", diag_opt.stride, "grid spacing of s")->check(CLI::PositiveNumber);
  diagnose->add_option("--bootstrap", diag_opt.bootstrap, "bootstrap resamples for TV bands (0: none)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    auto code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  if (simulate->parsed()) { return cmd_simulate(load_config(config_path)); }
  if (run->parsed()) { return cmd_run(load_config(config_path), run_opt); }
  if (!diag_config.empty()) {
    auto c = load_config(diag_config);
    diag_opt.stride = c.diagnose_stride > 0 ? c.diagnose_stride : c.run.thin;
    diag_opt.asdsf_every = c.asdsf_every;
    diag_opt.window = c.window;
    diag_opt.min_split_freq = c.min_split_freq;
    if (diag_opt.bootstrap == 0) { diag_opt.bootstrap = c.bootstrap; }
    diag_opt.seed = c.run.master_seed;
  }
  return cmd_diagnose(dir, diag_opt);
}

}  // namespace

auto main(int argc, char** argv) -> int {
  // Exit codes: 0 ok, 1 user error, 2 internal error.
  try {
    return dispatch(argc, argv);
  } catch (const Config_error& e) {
    std::cerr << "config error: " << e.what() << '\n';
  } catch (const User_error& e) {
    std::cerr << "error: " << e.what() << '\n';
  } catch (const Newick_error& e) {
    std::cerr << "newick error: " << e.what() << '\n';
  } catch (const Data_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
