#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <thread>
#include <utility>
#include <vector>

#include "bsdehedge/bsde_solvers.hpp"
#include "bsdehedge/closed_form.hpp"
#include "bsdehedge/common.hpp"
#include "bsdehedge/contracts.hpp"
#include "bsdehedge/linalg.hpp"
#include "bsdehedge/market_models.hpp"

namespace bsdehedge {

enum class HedgeStrategy { Delta, DeltaVega, DeltaGamma, DeltaVegaSecondOrder };

inline const char* strategy_name(HedgeStrategy strategy) {
  switch (strategy) {
    case HedgeStrategy::Delta: return "delta";
    case HedgeStrategy::DeltaVega: return "delta-vega";
    case HedgeStrategy::DeltaGamma: return "delta-gamma";
    case HedgeStrategy::DeltaVegaSecondOrder: return "second-order";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Hedging instruments.

enum class InstrumentKind { BSVanilla, MargrabeExchange, SolverPriced };

struct InstrumentSpec {
  InstrumentKind kind = InstrumentKind::BSVanilla;
  // BSVanilla
  int asset = 0;  // 0-based state index
  double strike = 0;
  OptionKind option = OptionKind::Put;
  double maturity = 0;
  // MargrabeExchange: receive leg_k against ratio × leg_j
  int leg_k = 0;
  int leg_j = 1;
  double ratio = 1.0;
  // SolverPriced
  std::string artifact_dir;
};

struct Instrument {
  InstrumentSpec spec;
  // Pre-trained single-contract artifact; required iff kind == SolverPriced.
  std::shared_ptr<const SolverArtifact> artifact;
};

// Price and state derivatives of one instrument at (t, x).  `support`
// lists the state components with structurally nonzero derivatives.
struct InstrumentQuote {
  double price = 0;
  Vector du;   // d
  Matrix d2u;  // d×d
  std::vector<int> support;
};

inline int nearest_grid_index(const TimeGrid& grid, double t) {
  const int n = int(std::lround(t / grid.dt()));
  return std::clamp(n, 0, grid.steps);
}

inline InstrumentQuote quote_instrument(const ModelSpec& model,
                                        const Instrument& instrument,
                                        double t, const RowVector& x) {
  const int d = model.d;
  InstrumentQuote out;
  out.du = Vector::Zero(d);
  out.d2u = Matrix::Zero(d, d);
  const auto& spec = instrument.spec;
  switch (spec.kind) {
    case InstrumentKind::BSVanilla: {
      if (model.kind != ModelKind::BlackScholes)
        throw ConfigError("instrument: closed-form vanilla requires the "
                          "Black-Scholes model; use a solver-priced "
                          "instrument instead");
      const double tau = spec.maturity - t;
      if (!(tau > 0))
        throw MissingQuote("instrument: vanilla expired at quote date");
      const int a = spec.asset;
      const VanillaQuote q =
          bs_vanilla(x[a], spec.strike, model.r, model.q[a],
                     model.sigma_bar[a], tau, spec.option);
      out.price = q.price;
      out.du[a] = q.delta;
      out.d2u(a, a) = q.gamma;
      out.support = {a};
      return out;
    }
    case InstrumentKind::MargrabeExchange: {
      if (model.kind != ModelKind::BlackScholes)
        throw ConfigError("instrument: exchange option requires the "
                          "Black-Scholes model");
      const double tau = spec.maturity - t;
      if (!(tau > 0))
        throw MissingQuote("instrument: exchange option expired at quote "
                           "date");
      const int k = spec.leg_k, j = spec.leg_j;
      const ExchangeQuote q = margrabe(
          x[k], x[j], spec.ratio, model.sigma_bar[k], model.sigma_bar[j],
          model.corr(k, j), model.q[k], model.q[j], tau);
      out.price = q.price;
      out.du[k] = q.d_k;
      out.du[j] = q.d_j;
      out.d2u(k, k) = q.d2_kk;
      out.d2u(k, j) = q.d2_kj;
      out.d2u(j, k) = q.d2_jk;
      out.d2u(j, j) = q.d2_jj;
      out.support = {k, j};
      return out;
    }
    case InstrumentKind::SolverPriced: {
      if (!instrument.artifact)
        throw MissingQuote("instrument: solver-priced instrument has no "
                           "loaded artifact");
      const SolverArtifact& art = *instrument.artifact;
      if (art.portfolio.model.d != d)
        throw ShapeMismatch("instrument: artifact state dimension mismatch");
      if (art.portfolio.size() != 1)
        throw ConfigError("instrument: solver-priced instrument must wrap a "
                          "single-contract artifact");
      const int n = nearest_grid_index(art.grid, t);
      Matrix state(1, d);
      state.row(0) = x;
      const StepEval slice = evaluate(art, n, state, /*want_gamma=*/true);
      out.price = slice.y(0, 0);
      for (int l = 0; l < d; ++l) out.du[l] = slice.delta(0, l);
      if (slice.has_gamma)
        for (int k = 0; k < d; ++k)
          for (int l = 0; l < d; ++l) out.d2u(k, l) = slice.gamma(0, k * d + l);
      out.support.resize(d);
      for (int l = 0; l < d; ++l) out.support[l] = l;
      return out;
    }
  }
  throw ConfigError("instrument: unknown instrument kind");
}

// ---------------------------------------------------------------------------
// Hedge configuration.

struct HedgeConfig {
  HedgeStrategy strategy = HedgeStrategy::Delta;
  int n_rebalance = 1;  // rebalance dates {j·T/N : j = 0..N-1}
  std::vector<std::pair<int, int>> index_set;  // 0-based pairs (i, l)
  std::vector<Instrument> instruments;
  bool horizon_tau = false;  // report at the stopping time instead of T
  double lsqr_atol = 1e-10;
  double lsqr_btol = 1e-10;
  int lsqr_max_iter = -1;
  int path_block = 2048;   // batch size for Greek evaluation
  int n_threads = 0;       // 0 = hardware concurrency
  bool check_self_financing = false;  // assert ledger identity at 1e-10
};

inline void validate_hedge_config(const HedgeConfig& config,
                                  const ModelSpec& model,
                                  const TimeGrid& grid) {
  if (config.n_rebalance < 1 || grid.steps % config.n_rebalance != 0)
    throw ConfigError("hedge: rebalance count must divide the grid");
  for (const auto& [i, l] : config.index_set)
    if (i < 0 || i >= model.d || l < 0 || l >= model.d)
      throw ConfigError("hedge: second-order index pair out of range");
  const bool second_order = config.strategy == HedgeStrategy::DeltaGamma ||
                            config.strategy == HedgeStrategy::DeltaVegaSecondOrder;
  if (!second_order && config.strategy == HedgeStrategy::Delta &&
      !config.instruments.empty())
    throw ConfigError("hedge: delta strategy takes no instruments");
  if ((config.strategy == HedgeStrategy::DeltaVega ||
       config.strategy == HedgeStrategy::DeltaVegaSecondOrder) &&
      model.d <= model.m)
    throw ConfigError("hedge: delta-vega strategies need non-tradeable "
                      "state components (d > m)");
  for (const auto& instrument : config.instruments) {
    const auto& spec = instrument.spec;
    switch (spec.kind) {
      case InstrumentKind::BSVanilla:
        if (spec.asset < 0 || spec.asset >= model.m)
          throw ConfigError("hedge: instrument asset index out of range");
        if (!(spec.maturity > grid.horizon))
          throw ConfigError("hedge: instrument must mature after the "
                            "backtest horizon");
        break;
      case InstrumentKind::MargrabeExchange:
        if (spec.leg_k < 0 || spec.leg_k >= model.m || spec.leg_j < 0 ||
            spec.leg_j >= model.m || spec.leg_k == spec.leg_j)
          throw ConfigError("hedge: exchange instrument legs invalid");
        if (!(spec.maturity > grid.horizon))
          throw ConfigError("hedge: instrument must mature after the "
                            "backtest horizon");
        break;
      case InstrumentKind::SolverPriced:
        if (!instrument.artifact)
          throw ConfigError("hedge: solver-priced instrument not loaded");
        if (instrument.artifact->grid.horizon < grid.horizon)
          throw ConfigError("hedge: instrument artifact horizon shorter "
                            "than the backtest");
        break;
    }
  }
}

// ---------------------------------------------------------------------------
// Greek sources: trained artifacts or closed forms (for testability).

class GreekSource {
 public:
  virtual ~GreekSource() = default;
  // Slice at grid index n for a batch of states.
  virtual StepEval slice(int n, const Matrix& states, bool want_gamma) = 0;
  virtual const PortfolioSpec& portfolio() const = 0;
};

class SolverGreeks final : public GreekSource {
 public:
  SolverGreeks(std::shared_ptr<const SolverArtifact> artifact,
               const TimeGrid& hedge_grid)
      : artifact_(std::move(artifact)) {
    if (artifact_->grid.steps != hedge_grid.steps ||
        std::abs(artifact_->grid.horizon - hedge_grid.horizon) > 1e-12)
      throw ConfigError("hedge: artifact grid must match the hedge grid");
  }

  StepEval slice(int n, const Matrix& states, bool want_gamma) override {
    return evaluate(*artifact_, n, states, want_gamma);
  }
  const PortfolioSpec& portfolio() const override {
    return artifact_->portfolio;
  }

 private:
  std::shared_ptr<const SolverArtifact> artifact_;
};

// Analytic Greeks for European contracts with closed forms in the
// Black-Scholes model: vanilla calls/puts and exchange calls.
class ClosedFormGreeks final : public GreekSource {
 public:
  ClosedFormGreeks(PortfolioSpec portfolio, TimeGrid grid)
      : portfolio_(std::move(portfolio)), grid_(grid) {
    if (portfolio_.model.kind != ModelKind::BlackScholes)
      throw ConfigError("closed-form greeks: requires the Black-Scholes "
                        "model");
    for (const auto& contract : portfolio_.contracts) {
      if (contract.reflection_intervals != 1)
        throw ConfigError("closed-form greeks: only European contracts "
                          "have closed forms");
      if (contract.kind != PayoffKind::VanillaCall &&
          contract.kind != PayoffKind::VanillaPut &&
          contract.kind != PayoffKind::ExchangeCall)
        throw ConfigError("closed-form greeks: unsupported payoff kind");
    }
  }

  StepEval slice(int n, const Matrix& states, bool want_gamma) override {
    const ModelSpec& model = portfolio_.model;
    const int n_batch = int(states.rows());
    const int n_contracts = portfolio_.size();
    const int d = model.d;
    const double t = grid_.t(n);
    const double tau = grid_.horizon - t;
    StepEval out;
    out.n_batch = n_batch;
    out.n_contracts = n_contracts;
    out.d = d;
    out.y_tilde.resize(n_batch, n_contracts);
    out.z_tilde.resize(n_batch, n_contracts * d);
    out.delta.resize(n_batch, n_contracts * d);
    out.gamma.setZero(n_batch, n_contracts * d * d);
    out.gamma_raw.setZero(n_batch, n_contracts * d * d);
    out.has_gamma = true;
    if (n >= grid_.steps) {
      for (int b = 0; b < n_batch; ++b) {
        const RowVector x = states.row(b);
        const Matrix sig = sigma_at(model, t, x);
        for (int j = 0; j < n_contracts; ++j) {
          out.y_tilde(b, j) = payoff(portfolio_.contracts[j], x);
          const RowVector grad =
              payoff_gradient(portfolio_.contracts[j], x);
          out.z_tilde.row(b).segment(j * d, d) = grad * sig;
          out.delta.row(b).segment(j * d, d) = grad;
        }
      }
      out.y = out.y_tilde;
      out.z = out.z_tilde;
      return out;
    }
    for (int b = 0; b < n_batch; ++b) {
      const RowVector x = states.row(b);
      const Matrix sig = sigma_at(model, t, x);
      for (int j = 0; j < n_contracts; ++j) {
        const auto& contract = portfolio_.contracts[j];
        RowVector delta_row = RowVector::Zero(d);
        Matrix hess = Matrix::Zero(d, d);
        double price = 0;
        if (contract.kind == PayoffKind::ExchangeCall) {
          const int ka = contract.assets[0], ja = contract.assets[1];
          const ExchangeQuote q = margrabe(
              x[ka], x[ja], contract.strike, model.sigma_bar[ka],
              model.sigma_bar[ja], model.corr(ka, ja), model.q[ka],
              model.q[ja], tau);
          price = q.price;
          delta_row[ka] = q.d_k;
          delta_row[ja] = q.d_j;
          hess(ka, ka) = q.d2_kk;
          hess(ka, ja) = q.d2_kj;
          hess(ja, ka) = q.d2_jk;
          hess(ja, ja) = q.d2_jj;
        } else {
          const int a = contract.assets[0];
          const VanillaQuote q = bs_vanilla(
              x[a], contract.strike, model.r, model.q[a],
              model.sigma_bar[a], tau,
              contract.kind == PayoffKind::VanillaCall ? OptionKind::Call
                                                       : OptionKind::Put);
          price = q.price;
          delta_row[a] = q.delta;
          hess(a, a) = q.gamma;
        }
        out.y_tilde(b, j) = price;
        out.delta.row(b).segment(j * d, d) = delta_row;
        out.z_tilde.row(b).segment(j * d, d) = delta_row * sig;
        if (want_gamma)
          for (int k = 0; k < d; ++k)
            for (int l = 0; l < d; ++l)
              out.gamma(b, j * d * d + k * d + l) = hess(k, l);
      }
    }
    out.y = out.y_tilde;
    out.z = out.z_tilde;
    return out;
  }

  const PortfolioSpec& portfolio() const override { return portfolio_; }

 private:
  PortfolioSpec portfolio_;
  TimeGrid grid_;
};

// ---------------------------------------------------------------------------
// First-order weights: α = Σ_{active j} Delta^j over the tradeables.

inline Vector delta_weights(const StepEval& greeks, int sample,
                            const std::vector<std::uint8_t>& active, int m) {
  Vector alpha = Vector::Zero(m);
  for (int j = 0; j < greeks.n_contracts; ++j) {
    if (!active[j]) continue;
    for (int i = 0; i < m; ++i)
      alpha[i] += greeks.delta(sample, j * greeks.d + i);
  }
  return alpha;
}

// ---------------------------------------------------------------------------
// Second-order system.

enum class ConstraintKind { GammaPair, Vega };

struct SecondOrderSystem {
  SparseMatrixCOO a;
  Vector b;
  std::vector<ConstraintKind> row_kind;
  std::vector<std::pair<int, int>> row_label;  // (i, l) or (l, -1) for vega
};

// Rows: for the vega strategies, one first-order row per non-tradeable
// component l = m..d-1 (Σ_k β_k ∂_l u^k = Σ_j Delta^j_l); for the gamma
// strategies, one row per pair (i, l) in the index set
// (Σ_k β_k ∂²_{li} u^k = Σ_j Gamma^j_{li}).  The combined strategy stacks
// vega rows first.
inline SecondOrderSystem assemble_second_order(
    const HedgeConfig& config, const ModelSpec& model, const StepEval& greeks,
    int sample, const std::vector<std::uint8_t>& active,
    const std::vector<InstrumentQuote>& quotes) {
  const int d = model.d;
  const int m = model.m;
  const int n_instruments = int(quotes.size());
  const bool vega_rows = config.strategy == HedgeStrategy::DeltaVega ||
                         config.strategy == HedgeStrategy::DeltaVegaSecondOrder;
  const bool gamma_rows = config.strategy == HedgeStrategy::DeltaGamma ||
                          config.strategy == HedgeStrategy::DeltaVegaSecondOrder;
  SecondOrderSystem sys;
  int n_rows = 0;
  if (vega_rows) n_rows += d - m;
  if (gamma_rows) n_rows += int(config.index_set.size());
  sys.a.rows = n_rows;
  sys.a.cols = n_instruments;
  sys.b = Vector::Zero(n_rows);
  int row = 0;
  if (vega_rows) {
    for (int l = m; l < d; ++l, ++row) {
      sys.row_kind.push_back(ConstraintKind::Vega);
      sys.row_label.push_back({l, -1});
      for (int j = 0; j < greeks.n_contracts; ++j)
        if (active[j]) sys.b[row] += greeks.delta(sample, j * d + l);
      for (int k = 0; k < n_instruments; ++k) {
        const double v = quotes[k].du[l];
        if (v != 0.0) sys.a.add(row, k, v);
      }
    }
  }
  if (gamma_rows) {
    for (const auto& [i, l] : config.index_set) {
      sys.row_kind.push_back(ConstraintKind::GammaPair);
      sys.row_label.push_back({i, l});
      for (int j = 0; j < greeks.n_contracts; ++j)
        if (active[j]) sys.b[row] += greeks.gamma(sample, j * d * d + l * d + i);
      for (int k = 0; k < n_instruments; ++k) {
        const double v = quotes[k].d2u(l, i);
        if (v != 0.0) sys.a.add(row, k, v);
      }
      ++row;
    }
  }
  return sys;
}

// Minimum-norm least-squares weights of the second-order system.
inline LsqrResult lsqr_solve(const SecondOrderSystem& sys, double atol = 1e-10,
                             double btol = 1e-10, int max_iter = -1) {
  return lsqr(sys.a, sys.b, atol, btol, max_iter);
}

struct WeightResult {
  Vector alpha;  // m
  Vector beta;   // K
  bool lsqr_converged = true;
};

// Full weight computation for any strategy.  The delta strategy (and the
// degenerate second-order strategies with no rows and no instruments) go
// through the identical summation path.
inline WeightResult gamma_weights(const HedgeConfig& config,
                                  const ModelSpec& model,
                                  const StepEval& greeks, int sample,
                                  const std::vector<std::uint8_t>& active,
                                  const std::vector<InstrumentQuote>& quotes) {
  WeightResult out;
  const int n_instruments = int(quotes.size());
  out.beta = Vector::Zero(n_instruments);
  if (config.strategy != HedgeStrategy::Delta && n_instruments > 0) {
    const SecondOrderSystem sys = assemble_second_order(
        config, model, greeks, sample, active, quotes);
    if (sys.a.rows > 0 && sys.a.nnz() > 0) {
      const LsqrResult solution = lsqr_solve(
          sys, config.lsqr_atol, config.lsqr_btol, config.lsqr_max_iter);
      out.beta = solution.x;
      out.lsqr_converged = solution.converged;
    }
  }
  out.alpha = delta_weights(greeks, sample, active, model.m);
  for (int k = 0; k < n_instruments; ++k) {
    if (out.beta[k] == 0.0) continue;
    for (int i = 0; i < model.m; ++i)
      out.alpha[i] -= out.beta[k] * quotes[k].du[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stopping rule: first rebalance date that is an interior exercise date of
// the contract with immediate exercise value above the continuation value;
// otherwise the terminal index.

inline int stopping_time(const SolverArtifact& artifact,
                         const PathEnsemble& paths, int path,
                         int contract_index,
                         const std::vector<int>& rebalance_indices) {
  const auto& contract = artifact.portfolio.contracts[contract_index];
  for (int n : rebalance_indices) {
    if (!is_reflection_node(contract, artifact.grid, n)) continue;
    Matrix state(1, paths.d);
    state.row(0) = paths.state(path, n);
    const StepEval slice =
        evaluate(artifact, n, state, /*want_gamma=*/false);
    if (payoff(contract, state.row(0)) > slice.y_tilde(0, contract_index))
      return n;
  }
  return artifact.grid.steps;
}

// ---------------------------------------------------------------------------
// Self-financing backtest ledger.

struct LedgerRow {
  int path = 0;
  int step = 0;
  double t = 0;
  double p = 0;
  double bank = 0;
  Vector alpha;
  Vector beta;
  std::vector<std::uint8_t> exercised;
};

struct HedgeResult {
  int n_paths = 0;
  int n_tradeables = 0;
  int n_instruments = 0;
  double y0_total = 0;              // Σ_j Ŷ_0 at the shared initial state
  std::vector<double> p_horizon;    // per path, value at the report horizon
  std::vector<double> t_horizon;    // per path
  std::vector<int> tau;             // [path][contract]: exercise step index
  std::vector<std::uint8_t> failed; // per path: excluded from reporting
  int excluded = 0;
  long long lsqr_warnings = 0;
};

using LedgerWriter = std::function<void(const LedgerRow&)>;

namespace detail {

struct PathLedgerState {
  Vector alpha;
  Vector beta;
  double bank = 0;
  double p = 0;
  std::vector<std::uint8_t> active;
  bool frozen = false;  // horizon reached (stopping-time reporting)
  bool failed = false;
  double p_horizon = 0;
  double t_horizon = 0;
};

}  // namespace detail

// Run the discrete hedge over an ensemble.  The ledger visits every
// rebalance date and the terminal date; weights are recomputed at
// rebalance dates from the Greeks of the non-exercised contracts, the
// bank account absorbs accrual, dividends, rebalancing flows, and
// exercise settlements, and the portfolio value is marked from holdings.
inline HedgeResult run_hedge(const PortfolioSpec& portfolio,
                             const TimeGrid& grid, GreekSource& source,
                             const HedgeConfig& config,
                             const PathEnsemble& paths,
                             const LedgerWriter& writer = nullptr) {
  validate_hedge_config(config, portfolio.model, grid);
  if (paths.grid.steps != grid.steps ||
      std::abs(paths.grid.horizon - grid.horizon) > 1e-12)
    throw ConfigError("run_hedge: ensemble grid mismatch");
  const ModelSpec& model = portfolio.model;
  const int n_contracts = portfolio.size();
  const int d = model.d;
  const int m = model.m;
  const int n_instruments = int(config.instruments.size());
  const bool want_gamma = config.strategy == HedgeStrategy::DeltaGamma ||
                          config.strategy == HedgeStrategy::DeltaVegaSecondOrder;
  const int stride = grid.steps / config.n_rebalance;

  // Visited indices: all rebalance dates plus the terminal date.
  std::vector<int> visited;
  for (int j = 0; j < config.n_rebalance; ++j) visited.push_back(j * stride);
  visited.push_back(grid.steps);

  HedgeResult result;
  result.n_paths = paths.n_paths;
  result.n_tradeables = m;
  result.n_instruments = n_instruments;
  result.p_horizon.assign(paths.n_paths, 0.0);
  result.t_horizon.assign(paths.n_paths, grid.horizon);
  result.tau.assign(std::size_t(paths.n_paths) * n_contracts, grid.steps);
  result.failed.assign(paths.n_paths, 0);

  {
    // All paths share the initial state, so the normalizer Σ_j Ŷ_0 is a
    // single evaluation at the first node.
    Matrix x0(1, d);
    x0.row(0) = paths.state(0, 0);
    const StepEval slice0 = source.slice(0, x0, /*want_gamma=*/false);
    double y0 = 0;
    for (int j = 0; j < n_contracts; ++j) y0 += slice0.y(0, j);
    result.y0_total = y0;
  }

  std::vector<long long> lsqr_warn_per_block;

  auto process_block = [&](int path_begin, int path_end,
                           long long& lsqr_warnings) {
    const int block = path_end - path_begin;
    std::vector<detail::PathLedgerState> states(block);
    for (auto& s : states) {
      s.alpha = Vector::Zero(m);
      s.beta = Vector::Zero(n_instruments);
      s.active.assign(n_contracts, 1);
    }
    Matrix x_block(block, d);
    std::vector<InstrumentQuote> quotes(n_instruments);
    double t_prev = 0;
    for (std::size_t pos = 0; pos < visited.size(); ++pos) {
      const int n = visited[pos];
      const double t = grid.t(n);
      const bool terminal = n == grid.steps;
      for (int b = 0; b < block; ++b)
        x_block.row(b) = paths.state(path_begin + b, n);
      StepEval greeks;
      try {
        greeks = source.slice(n, x_block, want_gamma);
      } catch (const Error&) {
        // A whole-block failure poisons every path in the block.
        for (int b = 0; b < block; ++b) states[b].failed = true;
        break;
      }
      for (int b = 0; b < block; ++b) {
        auto& s = states[b];
        if (s.frozen || s.failed) continue;
        const int path = path_begin + b;
        const RowVector x = x_block.row(b);
        try {
          // 1. Bank accrual and dividend income over [t_prev, t].
          if (n > 0) {
            const double accrual = std::exp(model.r * (t - t_prev));
            double dividends = 0;
            const RowVector x_prev = paths.state(path, visited[pos - 1]);
            for (int i = 0; i < m; ++i)
              dividends += s.alpha[i] * model.q[i] * x_prev[i] * (t - t_prev);
            s.bank = accrual * s.bank + dividends;
          }
          // 2. Exercise settlements.
          for (int j = 0; j < n_contracts; ++j) {
            if (!s.active[j]) continue;
            const auto& contract = portfolio.contracts[j];
            bool settle = false;
            if (terminal) {
              settle = true;
            } else if (n > 0 && is_reflection_node(contract, grid, n) &&
                       payoff(contract, x) > greeks.y_tilde(b, j)) {
              settle = true;
            }
            if (settle) {
              s.bank -= payoff(contract, x);
              s.active[j] = 0;
              result.tau[std::size_t(path) * n_contracts + j] = n;
            }
          }
          // 3. Instrument quotes at (t, x) (needed for marking and flows).
          for (int k = 0; k < n_instruments; ++k)
            quotes[k] = quote_instrument(model, config.instruments[k], t, x);
          // 4. Mark portfolio value from holdings.
          double mark = s.bank;
          for (int j = 0; j < n_contracts; ++j)
            if (s.active[j]) mark -= greeks.y(b, j);
          for (int i = 0; i < m; ++i) mark += s.alpha[i] * x[i];
          for (int k = 0; k < n_instruments; ++k)
            mark += s.beta[k] * quotes[k].price;
          s.p = mark;
          // 5. Rebalance (not at the terminal date).
          if (!terminal) {
            const WeightResult w = gamma_weights(config, model, greeks, b,
                                                 s.active, quotes);
            if (!w.lsqr_converged) ++lsqr_warnings;
            if (n == 0) {
              // Bank defined so that the initial portfolio value is zero.
              double y0 = 0;
              for (int j = 0; j < n_contracts; ++j) y0 += greeks.y(b, j);
              double cost = 0;
              for (int i = 0; i < m; ++i) cost += w.alpha[i] * x[i];
              for (int k = 0; k < n_instruments; ++k)
                cost += w.beta[k] * quotes[k].price;
              s.bank = y0 - cost;
              s.p = 0;
            } else {
              double flow = 0;
              for (int i = 0; i < m; ++i)
                flow += (w.alpha[i] - s.alpha[i]) * x[i];
              for (int k = 0; k < n_instruments; ++k)
                flow += (w.beta[k] - s.beta[k]) * quotes[k].price;
              s.bank -= flow;
              if (config.check_self_financing) {
                double mark_new = s.bank;
                for (int j = 0; j < n_contracts; ++j)
                  if (s.active[j]) mark_new -= greeks.y(b, j);
                for (int i = 0; i < m; ++i) mark_new += w.alpha[i] * x[i];
                for (int k = 0; k < n_instruments; ++k)
                  mark_new += w.beta[k] * quotes[k].price;
                const double scale =
                    std::max({std::abs(s.p), std::abs(mark_new), 1.0});
                if (std::abs(mark_new - s.p) > 1e-10 * scale)
                  throw NumericError("run_hedge: rebalance broke the "
                                     "self-financing identity");
              }
            }
            s.alpha = w.alpha;
            s.beta = w.beta;
          }
          // 6. Horizon bookkeeping.
          bool all_settled = true;
          for (int j = 0; j < n_contracts; ++j)
            if (s.active[j]) all_settled = false;
          if (terminal || (config.horizon_tau && all_settled)) {
            s.p_horizon = s.p;
            s.t_horizon = t;
            s.frozen = true;
          }
          if (writer) {
            LedgerRow row;
            row.path = path;
            row.step = n;
            row.t = t;
            row.p = s.p;
            row.bank = s.bank;
            row.alpha = s.alpha;
            row.beta = s.beta;
            row.exercised.resize(n_contracts);
            for (int j = 0; j < n_contracts; ++j)
              row.exercised[j] = s.active[j] ? 0 : 1;
            writer(row);
          }
        } catch (const Error&) {
          s.failed = true;
        }
      }
      t_prev = t;
    }
    for (int b = 0; b < block; ++b) {
      const int path = path_begin + b;
      const auto& s = states[b];
      if (s.failed) {
        result.failed[path] = 1;
      } else {
        result.p_horizon[path] = s.p_horizon;
        result.t_horizon[path] = s.t_horizon;
      }
    }
  };

  const int block_size = std::max(1, config.path_block);
  const int n_blocks = (paths.n_paths + block_size - 1) / block_size;
  int n_threads = config.n_threads > 0
                      ? config.n_threads
                      : int(std::thread::hardware_concurrency());
  if (n_threads < 1) n_threads = 1;
  if (writer) n_threads = 1;  // keep dump rows in deterministic order
  n_threads = std::min(n_threads, n_blocks);

  lsqr_warn_per_block.assign(n_blocks, 0);
  if (n_threads <= 1) {
    for (int blk = 0; blk < n_blocks; ++blk) {
      const int begin = blk * block_size;
      const int end = std::min(paths.n_paths, begin + block_size);
      process_block(begin, end, lsqr_warn_per_block[blk]);
    }
  } else {
    std::vector<std::thread> pool;
    // Static partition: thread w takes blocks w, w+n_threads, ...
    for (int w = 0; w < n_threads; ++w) {
      pool.emplace_back([&, w]() {
        for (int blk = w; blk < n_blocks; blk += n_threads) {
          const int begin = blk * block_size;
          const int end = std::min(paths.n_paths, begin + block_size);
          process_block(begin, end, lsqr_warn_per_block[blk]);
        }
      });
    }
    for (auto& th : pool) th.join();
  }
  for (int blk = 0; blk < n_blocks; ++blk)
    result.lsqr_warnings += lsqr_warn_per_block[blk];
  for (int p = 0; p < paths.n_paths; ++p)
    if (result.failed[p]) ++result.excluded;
  return result;
}

// Finite-difference time decay of the first-order weights between two
// consecutive rebalance dates (diagnostic only).
inline Vector charm_estimate(const Vector& alpha_now,
                             const Vector& alpha_prev, double dt) {
  if (alpha_now.size() != alpha_prev.size())
    throw ShapeMismatch("charm_estimate: weight vectors differ in size");
  if (!(dt > 0)) throw DomainError("charm_estimate: dt must be positive");
  return -(alpha_now - alpha_prev) / dt;
}

}  // namespace bsdehedge
