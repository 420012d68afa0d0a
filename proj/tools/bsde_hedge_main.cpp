// bsde-hedge: train deep-regression solvers for Bermudan option
// portfolios, backtest discrete hedging strategies on simulated paths,
// and merge the resulting risk reports.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "bsdehedge/pipeline.hpp"

namespace {

using namespace bsdehedge;

std::vector<int> parse_int_list(const std::string& csv) {
  std::vector<int> out;
  std::string token;
  std::istringstream is(csv);
  while (std::getline(is, token, ',')) {
    try {
      std::size_t pos = 0;
      const int v = std::stoi(token, &pos);
      if (pos != token.size()) throw std::invalid_argument(token);
      out.push_back(v);
    } catch (const std::exception&) {
      throw ConfigError("cannot parse integer list entry '" + token + "'");
    }
  }
  if (out.empty()) throw ConfigError("empty integer list");
  return out;
}

struct CommonArgs {
  std::string preset;
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<std::string> name;
  std::optional<int> grid_steps;
  std::string scheme;
  std::string strategy;
  std::string rebalances;
  bool closed_form_greeks = false;
  std::optional<long long> steps;
  std::optional<long long> steps_rest;
  std::optional<int> paths_per_step;
  std::optional<int> paths;
  std::string index_set;
  std::string instruments;
  std::optional<int> hedge_steps;
  std::optional<int> threads;
  bool ledger = false;
};

void add_common_options(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--preset", args.preset,
                  "named experiment (see `presets list`)");
  cmd->add_option("--config", args.config, "experiment config JSON file");
  cmd->add_option("--seed", args.seed, "master seed for the experiment");
  cmd->add_option("--out", args.out_dir, "output root directory");
  cmd->add_option("--name", args.name, "override the run name");
  cmd->add_option("--grid", args.grid_steps, "solver time steps");
  cmd->add_option("--scheme", args.scheme,
                  "training scheme: osm (with second-order nets) or rdbdp");
  cmd->add_option("--strategy", args.strategy,
                  "hedge strategy: delta, delta-vega, delta-gamma, "
                  "second-order");
  cmd->add_option("--rebalances", args.rebalances,
                  "comma list of rebalance counts, e.g. 1,2,5,10,20,100");
  cmd->add_flag("--closed-form-greeks", args.closed_form_greeks,
                "hedge from analytic Greeks instead of a trained artifact");
  cmd->add_option("--steps", args.steps,
                  "SGD iterations at the terminal time step");
  cmd->add_option("--steps-rest", args.steps_rest,
                  "SGD iterations at the remaining steps (default steps/4)");
  cmd->add_option("--paths-per-step", args.paths_per_step,
                  "training batch size");
  cmd->add_option("--paths", args.paths, "backtest sample paths");
  cmd->add_option("--index-set", args.index_set,
                  "second-order index set preset: empty, diagonal, "
                  "upper_triangle, full");
  cmd->add_option("--instruments", args.instruments,
                  "'none' drops the preset's hedging instruments");
  cmd->add_option("--hedge-steps", args.hedge_steps,
                  "backtest grid steps (default: the solver grid)");
  cmd->add_option("--threads", args.threads,
                  "worker threads for the backtest (0 = hardware)");
  cmd->add_flag("--ledger", args.ledger,
                "write the full per-path hedging ledger CSV");
}

RunOverrides to_overrides(const CommonArgs& args) {
  RunOverrides o;
  o.seed = args.seed;
  o.out_dir = args.out_dir;
  o.name = args.name;
  o.grid_steps = args.grid_steps;
  if (!args.scheme.empty()) o.scheme = scheme_from_name(args.scheme);
  if (!args.strategy.empty()) o.strategy = strategy_from_name(args.strategy);
  if (!args.rebalances.empty())
    o.rebalances = parse_int_list(args.rebalances);
  if (args.closed_form_greeks) o.closed_form_greeks = true;
  o.steps_last = args.steps;
  o.steps_rest = args.steps_rest;
  o.batch_size = args.paths_per_step;
  o.hedge_paths = args.paths;
  if (!args.index_set.empty()) o.index_set = args.index_set;
  if (!args.instruments.empty()) {
    if (args.instruments != "none")
      throw ConfigError(
          "only --instruments none is supported from the command line; "
          "list instruments in a config file instead");
    o.clear_instruments = true;
  }
  o.hedge_steps = args.hedge_steps;
  o.n_threads = args.threads;
  o.write_ledger = args.ledger;
  return o;
}

PresetBundle resolve(const CommonArgs& args) {
  PresetBundle bundle = resolve_bundle(args.preset, args.config);
  apply_overrides(bundle, to_overrides(args));
  return bundle;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "deep-regression pricing and discrete hedging backtests for "
      "Bermudan option portfolios"};
  app.name("bsde-hedge");
  app.require_subcommand(1);

  CommonArgs train_args, hedge_args;
  CLI::App* train_cmd = app.add_subcommand(
      "train", "fit the solver networks and save the artifact");
  add_common_options(train_cmd, train_args);
  CLI::App* hedge_cmd = app.add_subcommand(
      "hedge", "backtest hedging strategies and append report rows");
  add_common_options(hedge_cmd, hedge_args);

  std::vector<std::string> report_inputs;
  std::string report_out = "report";
  bool report_markdown = false;
  CLI::App* report_cmd = app.add_subcommand(
      "report", "merge report.csv files into a sorted summary");
  report_cmd->add_option("inputs", report_inputs,
                         "report files or run directories")
      ->required();
  report_cmd->add_option("--out", report_out, "output directory");
  report_cmd->add_flag("--markdown", report_markdown,
                       "also write a Markdown summary");

  int check_draws = 50;
  std::uint64_t check_seed = 1;
  CLI::App* check_cmd = app.add_subcommand(
      "margrabe-check",
      "verify the exchange-option closed form against finite differences");
  check_cmd->add_option("--draws", check_draws, "random parameter draws");
  check_cmd->add_option("--seed", check_seed, "draw seed");

  CLI::App* presets_cmd =
      app.add_subcommand("presets", "preset catalog utilities");
  presets_cmd->require_subcommand(1);
  CLI::App* presets_list_cmd =
      presets_cmd->add_subcommand("list", "list available presets");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train_cmd) {
      run_train(resolve(train_args), std::cout);
    } else if (*hedge_cmd) {
      run_hedge_command(resolve(hedge_args), to_overrides(hedge_args),
                        std::cout);
    } else if (*report_cmd) {
      run_report(report_inputs, report_out, report_markdown, std::cout);
    } else if (*check_cmd) {
      if (run_margrabe_check(check_draws, check_seed, std::cout) > 0)
        throw NumericError("margrabe-check: finite-difference mismatch");
    } else if (*presets_list_cmd) {
      print_presets(std::cout);
    }
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
}
