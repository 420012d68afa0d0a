#pragma once

#include <string>
#include <vector>

#include "bsdehedge/common.hpp"
#include "bsdehedge/config_json.hpp"

namespace bsdehedge {

// A preset bundle: the main experiment plus the training runs for any
// solver-priced hedging instruments it references (out_dir holds the
// instrument's directory name relative to the main run directory).
struct PresetBundle {
  ExperimentConfig main;
  std::vector<ExperimentConfig> instrument_runs;
};

// Rebalance-count nicknames used in reports and `presets list`.
inline const char* rebalance_nickname(int n) {
  switch (n) {
    case 1: return "yearly";
    case 2: return "quarterly";
    case 5: return "monthly";
    case 10: return "fortnightly";
    case 20: return "weekly";
    case 100: return "daily";
  }
  return "custom";
}

namespace detail {

inline Matrix uniform_correlation(int d, double c) {
  Matrix corr = Matrix::Constant(d, d, c);
  for (int i = 0; i < d; ++i) corr(i, i) = 1.0;
  return corr;
}

inline ModelSpec bs_model(int d, double r, double mu, double sigma, double q,
                          double c, double x0) {
  ModelSpec model;
  model.kind = ModelKind::BlackScholes;
  model.d = d;
  model.m = d;
  model.r = r;
  model.mu_bar = Vector::Constant(d, mu);
  model.sigma_bar = Vector::Constant(d, sigma);
  model.q = Vector::Constant(d, q);
  model.corr = uniform_correlation(d, c);
  model.x0 = Vector::Constant(d, x0);
  validate_model(model);
  return model;
}

// One-dimensional Black-Scholes call (the motivating closed-form ladder):
// K = 100, r = 0, sigma = 0.25, T = 1, hedged with a put of maturity 2T
// and the same strike.
inline PresetBundle fig1_bs_1d() {
  PresetBundle bundle;
  ExperimentConfig& cfg = bundle.main;
  cfg.name = "fig1-bs-1d";
  cfg.model = bs_model(1, 0.0, 0.0, 0.25, 0.0, 0.0, 100.0);
  cfg.grid = TimeGrid{1.0, 100};
  ContractSpec contract;
  contract.kind = PayoffKind::VanillaCall;
  contract.strike = 100.0;
  contract.assets = {0};
  contract.reflection_intervals = 1;
  validate_contract(contract, cfg.model.d);
  cfg.contracts = {contract};
  cfg.strategy = HedgeStrategy::Delta;
  cfg.rebalances = {1, 2, 5, 10, 20, 100};
  cfg.index_set_preset = "diagonal";
  cfg.index_set = resolve_index_set("diagonal", cfg.model.d);
  InstrumentSpec put;
  put.kind = InstrumentKind::BSVanilla;
  put.asset = 0;
  put.strike = 100.0;
  put.option = OptionKind::Put;
  put.maturity = 2.0;
  cfg.instruments = {put};
  cfg.horizon_tau = false;
  cfg.hedge_paths = 10000;
  cfg.closed_form_greeks = true;
  return bundle;
}

// Two-dimensional stochastic-volatility model: Bermudan put on a Heston
// asset, hedged with four solver-priced European puts offsetting Vega,
// Gamma, Vomma, and Vanna exposure.
inline PresetBundle ex1_heston() {
  PresetBundle bundle;
  ExperimentConfig& cfg = bundle.main;
  cfg.name = "ex1-heston";
  ModelSpec model;
  model.kind = ModelKind::Heston;
  model.d = 2;
  model.m = 1;
  model.r = 0.1;
  model.mu_bar = Vector::Constant(1, 0.1);
  model.q = Vector::Constant(1, 0.0);
  model.heston = HestonParams{5.0, 0.16, 0.1, 0.9};
  model.x0 = Vector(2);
  model.x0 << 10.0, 0.0625;
  validate_model(model);
  cfg.model = model;
  cfg.grid = TimeGrid{0.25, 50};
  ContractSpec put;
  put.kind = PayoffKind::VanillaPut;
  put.strike = 10.0;
  put.assets = {0};
  put.reflection_intervals = 10;
  validate_contract(put, 2);
  cfg.contracts = {put};
  cfg.strategy = HedgeStrategy::DeltaVegaSecondOrder;
  cfg.rebalances = {1, 2, 5, 10, 25, 50};
  cfg.index_set = {{0, 0}, {0, 1}, {1, 1}, {1, 0}};
  cfg.horizon_tau = true;
  cfg.hedge_paths = 16384;
  cfg.closed_form_greeks = false;

  struct PutRun {
    double maturity;
    double strike;
    int steps;
  };
  const std::vector<PutRun> runs = {{0.3, 10.0, 60},
                                    {0.4, 10.0, 80},
                                    {0.3, 9.0, 60},
                                    {0.25, 11.0, 60}};
  for (std::size_t k = 0; k < runs.size(); ++k) {
    ExperimentConfig inst;
    inst.name = cfg.name + "-instrument-" + format_int(int(k) + 1);
    inst.model = model;
    inst.grid = TimeGrid{runs[k].maturity, runs[k].steps};
    ContractSpec inst_put;
    inst_put.kind = PayoffKind::VanillaPut;
    inst_put.strike = runs[k].strike;
    inst_put.assets = {0};
    inst_put.reflection_intervals = 1;
    validate_contract(inst_put, 2);
    inst.contracts = {inst_put};
    inst.out_dir = "instrument_" + format_int(int(k) + 1);
    bundle.instrument_runs.push_back(inst);

    InstrumentSpec spec;
    spec.kind = InstrumentKind::SolverPriced;
    spec.artifact_dir = inst.out_dir;
    cfg.instruments.push_back(spec);
  }
  return bundle;
}

// High-dimensional Bermudan geometric basket call.  Diagonal gammas are
// hedged with same-strike puts of maturity 2T, cross gammas with exchange
// calls of unit ratio, giving d(d+1)/2 instruments in total.
inline PresetBundle ex2_basket(int d, double strike, double sigma, int r_ex) {
  PresetBundle bundle;
  ExperimentConfig& cfg = bundle.main;
  cfg.name = "ex2-basket";
  cfg.model = bs_model(d, 0.0, 0.0, sigma, 0.02, d > 1 ? 0.75 : 0.0, 100.0);
  cfg.grid = TimeGrid{2.0, 100};
  ContractSpec contract;
  contract.kind = PayoffKind::GeometricCall;
  contract.strike = strike;
  contract.reflection_intervals = r_ex;
  validate_contract(contract, d);
  cfg.contracts = {contract};
  cfg.strategy = HedgeStrategy::DeltaGamma;
  cfg.rebalances = {1, 2, 5, 10, 20, 100};
  cfg.index_set_preset = "upper_triangle";
  cfg.index_set = resolve_index_set("upper_triangle", d);
  for (int i = 0; i < d; ++i) {
    InstrumentSpec put;
    put.kind = InstrumentKind::BSVanilla;
    put.asset = i;
    put.strike = strike;
    put.option = OptionKind::Put;
    put.maturity = 4.0;
    cfg.instruments.push_back(put);
  }
  for (int i = 0; i < d; ++i) {
    for (int j = i + 1; j < d; ++j) {
      InstrumentSpec exchange;
      exchange.kind = InstrumentKind::MargrabeExchange;
      exchange.leg_k = i;
      exchange.leg_j = j;
      exchange.ratio = 1.0;
      exchange.maturity = 4.0;
      cfg.instruments.push_back(exchange);
    }
  }
  cfg.horizon_tau = false;
  cfg.hedge_paths = 10000;
  return bundle;
}

// Portfolio of 25 Bermudan derivatives on 20 assets with mixed payoffs,
// moneyness, and exercise rights.
inline PresetBundle ex3_portfolio(int case_id) {
  PresetBundle bundle;
  ExperimentConfig& cfg = bundle.main;
  cfg.name = "ex3-portfolio-case" + format_int(case_id);
  const int d = 20;
  ModelSpec model;
  model.kind = ModelKind::BlackScholes;
  model.d = d;
  model.m = d;
  model.r = 0.04;
  model.mu_bar = Vector(d);
  for (int i = 0; i < d; ++i) model.mu_bar[i] = 0.20 - 0.01 * i;
  model.sigma_bar = Vector(d);
  const double base_vols[5] = {0.4, 0.25, 0.2, 0.15, 0.1};
  for (int i = 0; i < d; ++i) model.sigma_bar[i] = base_vols[i % 5];
  model.q = Vector::Zero(d);
  model.corr = uniform_correlation(d, 0.25);
  model.x0 = Vector::Constant(d, 100.0);
  validate_model(model);
  cfg.model = model;
  cfg.grid = TimeGrid{1.0, 100};

  std::vector<double> strikes(26, 100.0);
  std::vector<int> reflections(26, 1);
  if (case_id >= 2) {
    strikes[1] = 100.0;
    strikes[2] = 120.0;
    strikes[3] = 80.0;
    strikes[5] = 50.0;
    for (int j = 6; j <= 25; ++j) strikes[j] = 150.0;
  }
  if (case_id == 2)
    for (int j = 1; j <= 25; ++j) reflections[j] = 5;
  if (case_id == 3) {
    reflections[1] = 20;
    reflections[2] = 5;
    reflections[3] = 2;
    reflections[4] = 1;
    reflections[5] = 10;
    reflections[6] = reflections[7] = 5;
    reflections[8] = reflections[9] = 10;
    for (int j = 10; j <= 15; ++j) reflections[j] = 100;
    reflections[16] = 2;
    for (int j = 17; j <= 19; ++j) reflections[j] = 20;
    for (int j = 20; j <= 25; ++j) reflections[j] = 100;
  }

  auto add = [&](ContractSpec contract, int j) {
    contract.strike = strikes[j];
    contract.reflection_intervals = reflections[j];
    validate_contract(contract, d);
    cfg.contracts.push_back(contract);
  };
  {
    ContractSpec c;
    c.kind = PayoffKind::GeometricPut;
    add(c, 1);
    c = ContractSpec{};
    c.kind = PayoffKind::ArithmeticPutOnSubset;
    for (int i = 0; i < d / 2; ++i) c.assets.push_back(i);
    add(c, 2);
    c = ContractSpec{};
    c.kind = PayoffKind::CallOnMax;
    for (int i = d / 2; i < d; ++i) c.assets.push_back(i);
    add(c, 3);
    c = ContractSpec{};
    c.kind = PayoffKind::CashOrNothing;
    c.lower_barrier = 50.0;
    c.upper_barrier = 150.0;
    c.strike = 0.0;
    c.reflection_intervals = reflections[4];
    validate_contract(c, d);
    cfg.contracts.push_back(c);
    c = ContractSpec{};
    c.kind = PayoffKind::PutOnMin;
    for (int i = d / 2; i < d; ++i) c.assets.push_back(i);
    add(c, 5);
    for (int j = 6; j <= 25; ++j) {
      c = ContractSpec{};
      c.kind = PayoffKind::VanillaCall;
      c.assets = {j - 6};
      add(c, j);
    }
  }

  cfg.strategy = HedgeStrategy::DeltaGamma;
  cfg.rebalances = {1, 2, 5, 10, 20, 100};
  cfg.index_set_preset = "upper_triangle";
  cfg.index_set = resolve_index_set("upper_triangle", d);
  for (int i = 0; i < d; ++i) {
    InstrumentSpec put;
    put.kind = InstrumentKind::BSVanilla;
    put.asset = i;
    put.strike = 100.0;
    put.option = OptionKind::Put;
    put.maturity = 2.0;
    cfg.instruments.push_back(put);
  }
  for (int i = 0; i < d; ++i) {
    for (int j = i + 1; j < d; ++j) {
      InstrumentSpec exchange;
      exchange.kind = InstrumentKind::MargrabeExchange;
      exchange.leg_k = i;
      exchange.leg_j = j;
      exchange.ratio = 1.0;
      exchange.maturity = 2.0;
      cfg.instruments.push_back(exchange);
    }
  }
  cfg.horizon_tau = false;
  cfg.hedge_paths = 10000;
  return bundle;
}

}  // namespace detail

struct PresetInfo {
  std::string name;
  std::string description;
};

inline std::vector<PresetInfo> preset_catalog() {
  return {
      {"fig1-bs-1d",
       "1-d Black-Scholes call, closed-form Greeks hedging ladder"},
      {"ex1-heston",
       "Bermudan put under Heston, second-order hedging with solver-priced "
       "puts"},
      {"ex2-basket", "geometric basket call, d=50, ATM, European"},
      {"ex2-basket-k90", "basket variant: ITM strike 90"},
      {"ex2-basket-k110", "basket variant: OTM strike 110"},
      {"ex2-basket-vol50", "basket variant: volatility 0.50"},
      {"ex2-basket-vol75", "basket variant: volatility 0.75"},
      {"ex2-basket-r5", "basket variant: monthly exercise rights (R=5)"},
      {"ex2-basket-r20", "basket variant: weekly exercise rights (R=20)"},
      {"ex2-basket-r100", "basket variant: daily exercise rights (R=100)"},
      {"ex2-basket-d1", "basket variant: d=1, American limit (R=100)"},
      {"ex2-basket-d5", "basket variant: d=5, American limit (R=100)"},
      {"ex2-basket-d20", "basket variant: d=20, American limit (R=100)"},
      {"ex2-basket-d100", "basket variant: d=100, American limit (R=100)"},
      {"ex3-portfolio-case1", "25-contract portfolio, ATM, European"},
      {"ex3-portfolio-case2",
       "25-contract portfolio, mixed moneyness, monthly exercise"},
      {"ex3-portfolio-case3",
       "25-contract portfolio, mixed moneyness, varying exercise rights"},
  };
}

inline PresetBundle make_preset(const std::string& name) {
  auto finish = [&](PresetBundle bundle) {
    bundle.main.name = name;
    return bundle;
  };
  if (name == "fig1-bs-1d") return finish(detail::fig1_bs_1d());
  if (name == "ex1-heston") return finish(detail::ex1_heston());
  if (name == "ex2-basket")
    return finish(detail::ex2_basket(50, 100.0, 0.25, 1));
  if (name == "ex2-basket-k90")
    return finish(detail::ex2_basket(50, 90.0, 0.25, 1));
  if (name == "ex2-basket-k110")
    return finish(detail::ex2_basket(50, 110.0, 0.25, 1));
  if (name == "ex2-basket-vol50")
    return finish(detail::ex2_basket(50, 100.0, 0.5, 1));
  if (name == "ex2-basket-vol75")
    return finish(detail::ex2_basket(50, 100.0, 0.75, 1));
  if (name == "ex2-basket-r5")
    return finish(detail::ex2_basket(50, 100.0, 0.25, 5));
  if (name == "ex2-basket-r20")
    return finish(detail::ex2_basket(50, 100.0, 0.25, 20));
  if (name == "ex2-basket-r100")
    return finish(detail::ex2_basket(50, 100.0, 0.25, 100));
  if (name == "ex2-basket-d1")
    return finish(detail::ex2_basket(1, 100.0, 0.25, 100));
  if (name == "ex2-basket-d5")
    return finish(detail::ex2_basket(5, 100.0, 0.25, 100));
  if (name == "ex2-basket-d20")
    return finish(detail::ex2_basket(20, 100.0, 0.25, 100));
  if (name == "ex2-basket-d100")
    return finish(detail::ex2_basket(100, 100.0, 0.25, 100));
  if (name == "ex3-portfolio-case1") return finish(detail::ex3_portfolio(1));
  if (name == "ex3-portfolio-case2") return finish(detail::ex3_portfolio(2));
  if (name == "ex3-portfolio-case3") return finish(detail::ex3_portfolio(3));
  throw ConfigError("preset: unknown preset '" + name + "'");
}

}  // namespace bsdehedge
