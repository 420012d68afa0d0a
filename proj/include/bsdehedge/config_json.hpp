#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "bsdehedge/bsde_solvers.hpp"
#include "bsdehedge/common.hpp"
#include "bsdehedge/contracts.hpp"
#include "bsdehedge/hedging_engine.hpp"
#include "bsdehedge/market_models.hpp"

namespace bsdehedge {

using json = nlohmann::json;

inline constexpr int kSchemaVersion = 1;

// ---------------------------------------------------------------------------
// Enum <-> string tables.  JSON uses 1-based asset/component indices to
// match the reporting convention (S_1..S_d); everything in memory is
// 0-based.

inline std::string payoff_kind_name(PayoffKind kind) {
  switch (kind) {
    case PayoffKind::GeometricCall: return "geometric_call";
    case PayoffKind::GeometricPut: return "geometric_put";
    case PayoffKind::ArithmeticPutOnSubset: return "arithmetic_put";
    case PayoffKind::CallOnMax: return "call_on_max";
    case PayoffKind::PutOnMin: return "put_on_min";
    case PayoffKind::CashOrNothing: return "cash_or_nothing";
    case PayoffKind::VanillaCall: return "vanilla_call";
    case PayoffKind::VanillaPut: return "vanilla_put";
    case PayoffKind::ExchangeCall: return "exchange_call";
  }
  throw ConfigError("config: unknown payoff kind");
}

inline PayoffKind payoff_kind_from_name(const std::string& name) {
  if (name == "geometric_call") return PayoffKind::GeometricCall;
  if (name == "geometric_put") return PayoffKind::GeometricPut;
  if (name == "arithmetic_put") return PayoffKind::ArithmeticPutOnSubset;
  if (name == "call_on_max") return PayoffKind::CallOnMax;
  if (name == "put_on_min") return PayoffKind::PutOnMin;
  if (name == "cash_or_nothing") return PayoffKind::CashOrNothing;
  if (name == "vanilla_call") return PayoffKind::VanillaCall;
  if (name == "vanilla_put") return PayoffKind::VanillaPut;
  if (name == "exchange_call") return PayoffKind::ExchangeCall;
  throw ConfigError("config: unknown payoff kind '" + name + "'");
}

inline std::string strategy_json_name(HedgeStrategy strategy) {
  return strategy_name(strategy);
}

inline HedgeStrategy strategy_from_name(const std::string& name) {
  if (name == "delta") return HedgeStrategy::Delta;
  if (name == "delta-vega") return HedgeStrategy::DeltaVega;
  if (name == "delta-gamma") return HedgeStrategy::DeltaGamma;
  if (name == "second-order") return HedgeStrategy::DeltaVegaSecondOrder;
  throw ConfigError("config: unknown strategy '" + name + "'");
}

inline SchemeKind scheme_from_name(const std::string& name) {
  if (name == "osm") return SchemeKind::OSM;
  if (name == "rdbdp") return SchemeKind::RDBDP;
  throw ConfigError("config: unknown scheme '" + name + "'");
}

namespace detail {

template <typename T>
T require(const json& j, const char* key) {
  if (!j.contains(key))
    throw ConfigError(std::string("config: missing field '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: bad field '") + key + "': " +
                      e.what());
  }
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: bad field '") + key + "': " +
                      e.what());
  }
}

inline json vector_to_json(const Vector& v) {
  json out = json::array();
  for (int i = 0; i < v.size(); ++i) out.push_back(v[i]);
  return out;
}

inline Vector vector_from_json(const json& j, const char* key, int expect) {
  const auto values = require<std::vector<double>>(j, key);
  if (expect >= 0 && int(values.size()) != expect)
    throw ConfigError(std::string("config: field '") + key +
                      "' has the wrong length");
  Vector out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = values[i];
  return out;
}

inline json matrix_to_json(const Matrix& m) {
  json out = json::array();
  for (int i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (int j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    out.push_back(row);
  }
  return out;
}

inline Matrix matrix_from_json(const json& j, const char* key, int rows,
                               int cols) {
  const auto values =
      require<std::vector<std::vector<double>>>(j, key);
  if (int(values.size()) != rows)
    throw ConfigError(std::string("config: field '") + key +
                      "' has the wrong row count");
  Matrix out(rows, cols);
  for (int i = 0; i < rows; ++i) {
    if (int(values[i].size()) != cols)
      throw ConfigError(std::string("config: field '") + key +
                        "' has a ragged row");
    for (int c = 0; c < cols; ++c) out(i, c) = values[i][c];
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Model.

inline json model_to_json(const ModelSpec& model) {
  json j;
  j["d"] = model.d;
  j["m"] = model.m;
  j["r"] = model.r;
  j["q"] = detail::vector_to_json(model.q);
  j["x0"] = detail::vector_to_json(model.x0);
  j["mu_bar"] = detail::vector_to_json(model.mu_bar);
  if (model.kind == ModelKind::BlackScholes) {
    j["kind"] = "black_scholes";
    j["sigma_bar"] = detail::vector_to_json(model.sigma_bar);
    j["corr"] = detail::matrix_to_json(model.corr);
  } else {
    j["kind"] = "heston";
    j["heston"] = {{"kappa", model.heston.kappa},
                   {"nu_bar", model.heston.nu_bar},
                   {"rho", model.heston.rho},
                   {"eta", model.heston.eta}};
  }
  return j;
}

inline ModelSpec model_from_json(const json& j) {
  ModelSpec model;
  const auto kind = detail::require<std::string>(j, "kind");
  model.d = detail::require<int>(j, "d");
  model.m = detail::require<int>(j, "m");
  if (model.d < 1 || model.m < 1)
    throw ConfigError("config: model dimensions must be positive");
  model.r = detail::require<double>(j, "r");
  model.q = detail::vector_from_json(j, "q", model.m);
  model.x0 = detail::vector_from_json(j, "x0", model.d);
  model.mu_bar = detail::vector_from_json(j, "mu_bar", model.m);
  if (kind == "black_scholes") {
    model.kind = ModelKind::BlackScholes;
    model.sigma_bar = detail::vector_from_json(j, "sigma_bar", model.d);
    model.corr = detail::matrix_from_json(j, "corr", model.d, model.d);
  } else if (kind == "heston") {
    model.kind = ModelKind::Heston;
    if (!j.contains("heston"))
      throw ConfigError("config: missing field 'heston'");
    const json& h = j.at("heston");
    model.heston.kappa = detail::require<double>(h, "kappa");
    model.heston.nu_bar = detail::require<double>(h, "nu_bar");
    model.heston.rho = detail::require<double>(h, "rho");
    model.heston.eta = detail::require<double>(h, "eta");
  } else {
    throw ConfigError("config: unknown model kind '" + kind + "'");
  }
  validate_model(model);
  return model;
}

// ---------------------------------------------------------------------------
// Grid.

inline json grid_to_json(const TimeGrid& grid) {
  return json{{"horizon", grid.horizon}, {"steps", grid.steps}};
}

inline TimeGrid grid_from_json(const json& j) {
  TimeGrid grid;
  grid.horizon = detail::require<double>(j, "horizon");
  grid.steps = detail::require<int>(j, "steps");
  validate_grid(grid);
  return grid;
}

// ---------------------------------------------------------------------------
// Contracts.

inline json contract_to_json(const ContractSpec& contract) {
  json j;
  j["kind"] = payoff_kind_name(contract.kind);
  j["strike"] = contract.strike;
  j["reflections"] = contract.reflection_intervals;
  if (!contract.assets.empty()) {
    json assets = json::array();
    for (int a : contract.assets) assets.push_back(a + 1);
    j["assets"] = assets;
  }
  if (contract.kind == PayoffKind::CashOrNothing) {
    j["lower_barrier"] = contract.lower_barrier;
    j["upper_barrier"] = contract.upper_barrier;
  }
  return j;
}

inline ContractSpec contract_from_json(const json& j, int d) {
  ContractSpec contract;
  contract.kind =
      payoff_kind_from_name(detail::require<std::string>(j, "kind"));
  contract.strike = detail::get_or<double>(j, "strike", 0.0);
  contract.reflection_intervals = detail::get_or<int>(j, "reflections", 1);
  if (j.contains("assets")) {
    const auto assets = detail::require<std::vector<int>>(j, "assets");
    for (int a : assets) {
      if (a < 1 || a > d)
        throw ConfigError("config: contract asset index out of range "
                          "(indices are 1-based)");
      contract.assets.push_back(a - 1);
    }
  }
  if (contract.kind == PayoffKind::CashOrNothing) {
    contract.lower_barrier = detail::require<double>(j, "lower_barrier");
    contract.upper_barrier = detail::require<double>(j, "upper_barrier");
  }
  validate_contract(contract, d);
  return contract;
}

inline json portfolio_to_json(const PortfolioSpec& portfolio) {
  json j;
  j["model"] = model_to_json(portfolio.model);
  json contracts = json::array();
  for (const auto& contract : portfolio.contracts)
    contracts.push_back(contract_to_json(contract));
  j["contracts"] = contracts;
  return j;
}

inline PortfolioSpec portfolio_from_json(const json& j) {
  PortfolioSpec portfolio;
  if (!j.contains("model"))
    throw ConfigError("config: missing field 'model'");
  portfolio.model = model_from_json(j.at("model"));
  if (!j.contains("contracts") || !j.at("contracts").is_array() ||
      j.at("contracts").empty())
    throw ConfigError("config: portfolio needs at least one contract");
  for (const auto& cj : j.at("contracts"))
    portfolio.contracts.push_back(contract_from_json(cj, portfolio.model.d));
  return portfolio;
}

// Stable content hash of a portfolio (canonical JSON, sorted keys).
inline std::uint64_t portfolio_hash(const PortfolioSpec& portfolio) {
  return fnv1a(portfolio_to_json(portfolio).dump());
}

// ---------------------------------------------------------------------------
// Training config.

inline json train_to_json(const TrainConfig& config) {
  json j;
  j["steps_last"] = config.steps_last;
  j["steps_rest"] = config.steps_rest;
  j["batch_size"] = config.batch_size;
  j["theta_y"] = config.theta_y;
  j["hidden_layers"] = config.hidden_layers;
  j["hidden_width"] = config.hidden_width;
  j["batch_norm"] = config.batch_norm;
  j["lr"] = {config.lr0, config.lr1, config.lr2};
  return j;
}

inline TrainConfig train_from_json(const json& j) {
  TrainConfig config;
  config.steps_last = detail::get_or<int>(j, "steps_last", config.steps_last);
  config.steps_rest = detail::get_or<int>(j, "steps_rest", config.steps_rest);
  config.batch_size = detail::get_or<int>(j, "batch_size", config.batch_size);
  config.theta_y = detail::get_or<double>(j, "theta_y", config.theta_y);
  config.hidden_layers =
      detail::get_or<int>(j, "hidden_layers", config.hidden_layers);
  config.hidden_width =
      detail::get_or<int>(j, "hidden_width", config.hidden_width);
  config.batch_norm = detail::get_or<bool>(j, "batch_norm", config.batch_norm);
  if (j.contains("lr")) {
    const auto lr = detail::require<std::vector<double>>(j, "lr");
    if (lr.size() != 3)
      throw ConfigError("config: 'lr' must list three stage rates");
    config.lr0 = lr[0];
    config.lr1 = lr[1];
    config.lr2 = lr[2];
  }
  if (config.steps_last < 1 || config.steps_rest < 1 ||
      config.batch_size < 2 || config.hidden_layers < 0 ||
      config.hidden_width < 1)
    throw ConfigError("config: invalid training sizes");
  if (config.theta_y < 0 || config.theta_y > 1)
    throw ConfigError("config: theta_y must lie in [0, 1]");
  return config;
}

// ---------------------------------------------------------------------------
// Instruments.

inline json instrument_to_json(const InstrumentSpec& spec) {
  json j;
  switch (spec.kind) {
    case InstrumentKind::BSVanilla:
      j["kind"] = "bs_vanilla";
      j["asset"] = spec.asset + 1;
      j["strike"] = spec.strike;
      j["option"] = spec.option == OptionKind::Call ? "call" : "put";
      j["maturity"] = spec.maturity;
      break;
    case InstrumentKind::MargrabeExchange:
      j["kind"] = "margrabe";
      j["leg_k"] = spec.leg_k + 1;
      j["leg_j"] = spec.leg_j + 1;
      j["ratio"] = spec.ratio;
      j["maturity"] = spec.maturity;
      break;
    case InstrumentKind::SolverPriced:
      j["kind"] = "solver_priced";
      j["artifact"] = spec.artifact_dir;
      break;
  }
  return j;
}

inline InstrumentSpec instrument_from_json(const json& j) {
  InstrumentSpec spec;
  const auto kind = detail::require<std::string>(j, "kind");
  if (kind == "bs_vanilla") {
    spec.kind = InstrumentKind::BSVanilla;
    spec.asset = detail::require<int>(j, "asset") - 1;
    spec.strike = detail::require<double>(j, "strike");
    const auto option = detail::require<std::string>(j, "option");
    if (option == "call") spec.option = OptionKind::Call;
    else if (option == "put") spec.option = OptionKind::Put;
    else throw ConfigError("config: instrument option must be call or put");
    spec.maturity = detail::require<double>(j, "maturity");
  } else if (kind == "margrabe") {
    spec.kind = InstrumentKind::MargrabeExchange;
    spec.leg_k = detail::require<int>(j, "leg_k") - 1;
    spec.leg_j = detail::require<int>(j, "leg_j") - 1;
    spec.ratio = detail::get_or<double>(j, "ratio", 1.0);
    spec.maturity = detail::require<double>(j, "maturity");
  } else if (kind == "solver_priced") {
    spec.kind = InstrumentKind::SolverPriced;
    spec.artifact_dir = detail::require<std::string>(j, "artifact");
  } else {
    throw ConfigError("config: unknown instrument kind '" + kind + "'");
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Experiment configuration: everything one run needs.

struct ExperimentConfig {
  std::string name;
  ModelSpec model;
  TimeGrid grid;  // solver grid
  std::vector<ContractSpec> contracts;
  SchemeKind scheme = SchemeKind::OSM;
  TrainConfig train;
  // Hedge section.
  HedgeStrategy strategy = HedgeStrategy::Delta;
  std::vector<int> rebalances{1};
  std::string index_set_preset;  // "", "empty", "diagonal", "upper_triangle", "full"
  std::vector<std::pair<int, int>> index_set;  // 0-based
  std::vector<InstrumentSpec> instruments;
  bool horizon_tau = false;
  int hedge_steps = 0;  // fine backtest grid; 0 = solver grid
  int hedge_paths = 10000;
  bool closed_form_greeks = false;
  std::uint64_t seed = 1;
  std::string out_dir = "out";

  PortfolioSpec portfolio() const { return PortfolioSpec{model, contracts}; }
  TimeGrid hedge_grid() const {
    return TimeGrid{grid.horizon, hedge_steps > 0 ? hedge_steps : grid.steps};
  }
};

inline std::vector<std::pair<int, int>> resolve_index_set(
    const std::string& preset, int d) {
  std::vector<std::pair<int, int>> out;
  if (preset == "empty") return out;
  if (preset == "diagonal") {
    for (int i = 0; i < d; ++i) out.push_back({i, i});
    return out;
  }
  if (preset == "upper_triangle") {
    for (int i = 0; i < d; ++i)
      for (int l = i; l < d; ++l) out.push_back({i, l});
    return out;
  }
  if (preset == "full") {
    for (int i = 0; i < d; ++i)
      for (int l = 0; l < d; ++l) out.push_back({i, l});
    return out;
  }
  throw ConfigError("config: unknown index-set preset '" + preset + "'");
}

inline json experiment_to_json(const ExperimentConfig& config) {
  json j;
  j["schema_version"] = kSchemaVersion;
  j["name"] = config.name;
  j["seed"] = config.seed;
  j["out_dir"] = config.out_dir;
  j["model"] = model_to_json(config.model);
  j["grid"] = grid_to_json(config.grid);
  j["scheme"] = scheme_name(config.scheme);
  json contracts = json::array();
  for (const auto& contract : config.contracts)
    contracts.push_back(contract_to_json(contract));
  j["contracts"] = contracts;
  j["train"] = train_to_json(config.train);
  json hedge;
  hedge["strategy"] = strategy_json_name(config.strategy);
  hedge["rebalances"] = config.rebalances;
  if (!config.index_set_preset.empty()) {
    hedge["index_set"] = config.index_set_preset;
  } else {
    json pairs = json::array();
    for (const auto& [i, l] : config.index_set)
      pairs.push_back({i + 1, l + 1});
    hedge["index_set"] = pairs;
  }
  json instruments = json::array();
  for (const auto& spec : config.instruments)
    instruments.push_back(instrument_to_json(spec));
  hedge["instruments"] = instruments;
  hedge["horizon"] = config.horizon_tau ? "stopping" : "maturity";
  hedge["steps"] = config.hedge_steps;
  hedge["paths"] = config.hedge_paths;
  hedge["closed_form_greeks"] = config.closed_form_greeks;
  j["hedge"] = hedge;
  return j;
}

inline ExperimentConfig experiment_from_json(const json& j) {
  ExperimentConfig config;
  const int version = detail::get_or<int>(j, "schema_version", kSchemaVersion);
  if (version != kSchemaVersion)
    throw ConfigError("config: unsupported schema_version");
  config.name = detail::get_or<std::string>(j, "name", "experiment");
  config.seed = detail::get_or<std::uint64_t>(j, "seed", 1);
  config.out_dir = detail::get_or<std::string>(j, "out_dir", "out");
  if (!j.contains("model")) throw ConfigError("config: missing field 'model'");
  config.model = model_from_json(j.at("model"));
  if (!j.contains("grid")) throw ConfigError("config: missing field 'grid'");
  config.grid = grid_from_json(j.at("grid"));
  config.scheme =
      scheme_from_name(detail::get_or<std::string>(j, "scheme", "osm"));
  if (!j.contains("contracts") || !j.at("contracts").is_array() ||
      j.at("contracts").empty())
    throw ConfigError("config: need at least one contract");
  for (const auto& cj : j.at("contracts"))
    config.contracts.push_back(contract_from_json(cj, config.model.d));
  config.train = j.contains("train") ? train_from_json(j.at("train"))
                                     : TrainConfig{};
  if (j.contains("hedge")) {
    const json& h = j.at("hedge");
    config.strategy = strategy_from_name(
        detail::get_or<std::string>(h, "strategy", "delta"));
    config.rebalances =
        detail::get_or<std::vector<int>>(h, "rebalances", {1});
    if (h.contains("index_set")) {
      const json& is = h.at("index_set");
      if (is.is_string()) {
        config.index_set_preset = is.get<std::string>();
        config.index_set =
            resolve_index_set(config.index_set_preset, config.model.d);
      } else if (is.is_array()) {
        for (const auto& pair : is) {
          if (!pair.is_array() || pair.size() != 2)
            throw ConfigError("config: index_set entries must be [i, l] "
                              "pairs");
          const int i = pair.at(0).get<int>();
          const int l = pair.at(1).get<int>();
          if (i < 1 || i > config.model.d || l < 1 || l > config.model.d)
            throw ConfigError("config: index_set pair out of range "
                              "(indices are 1-based)");
          config.index_set.push_back({i - 1, l - 1});
        }
      } else {
        throw ConfigError("config: index_set must be a preset name or a "
                          "pair list");
      }
    }
    if (h.contains("instruments"))
      for (const auto& ij : h.at("instruments"))
        config.instruments.push_back(instrument_from_json(ij));
    const auto horizon =
        detail::get_or<std::string>(h, "horizon", "maturity");
    if (horizon == "stopping") config.horizon_tau = true;
    else if (horizon == "maturity") config.horizon_tau = false;
    else throw ConfigError("config: horizon must be maturity or stopping");
    config.hedge_steps = detail::get_or<int>(h, "steps", 0);
    config.hedge_paths = detail::get_or<int>(h, "paths", 10000);
    config.closed_form_greeks =
        detail::get_or<bool>(h, "closed_form_greeks", false);
  }
  if (config.hedge_paths < 1)
    throw ConfigError("config: hedge paths must be positive");
  for (int n : config.rebalances) {
    const TimeGrid hg = config.hedge_grid();
    if (n < 1 || hg.steps % n != 0)
      throw ConfigError("config: every rebalance count must divide the "
                        "hedge grid");
  }
  if (config.hedge_steps > 0)
    validate_grid(TimeGrid{config.grid.horizon, config.hedge_steps});
  return config;
}

inline std::string canonical_dump(const json& j) { return j.dump(2); }

}  // namespace bsdehedge
