#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "bsdehedge/common.hpp"
#include "bsdehedge/linalg.hpp"
#include "bsdehedge/market_models.hpp"

namespace bsdehedge {

enum class PayoffKind {
  GeometricCall,
  GeometricPut,
  ArithmeticPutOnSubset,
  CallOnMax,
  PutOnMin,
  CashOrNothing,
  VanillaCall,
  VanillaPut,
  ExchangeCall
};

// One Bermudan contract: payoff family, strike, asset subset, and the
// exercise schedule {k·T/R : k = 0..R}.  R = 1 means European (interior
// reflection set empty); R = N' approximates the American limit.
struct ContractSpec {
  PayoffKind kind = PayoffKind::VanillaCall;
  double strike = 0;
  std::vector<int> assets;  // 0-based; empty = all state components
  double omega = 1.0;       // +1 call-type, -1 put-type (set by validate)
  double lower_barrier = 0;  // CashOrNothing only
  double upper_barrier = 0;  // CashOrNothing only
  int reflection_intervals = 1;  // R: exercise dates k·T/R, k=0..R
};

inline bool is_put_type(PayoffKind kind) {
  return kind == PayoffKind::GeometricPut ||
         kind == PayoffKind::ArithmeticPutOnSubset ||
         kind == PayoffKind::PutOnMin || kind == PayoffKind::VanillaPut;
}

inline void validate_contract(ContractSpec& contract, int d) {
  for (int a : contract.assets)
    if (a < 0 || a >= d)
      throw ConfigError("contract: asset index out of range");
  switch (contract.kind) {
    case PayoffKind::VanillaCall:
    case PayoffKind::VanillaPut:
      if (contract.assets.size() != 1)
        throw ConfigError("contract: vanilla payoff needs one asset index");
      break;
    case PayoffKind::ExchangeCall:
      if (contract.assets.size() != 2)
        throw ConfigError("contract: exchange payoff needs two asset indices");
      break;
    default:
      break;
  }
  if (contract.kind == PayoffKind::CashOrNothing) {
    if (!(contract.upper_barrier > contract.lower_barrier))
      throw ConfigError("contract: cash-or-nothing needs lower < upper");
  } else if (contract.kind != PayoffKind::ExchangeCall &&
             !(contract.strike > 0)) {
    throw ConfigError("contract: strike must be positive");
  }
  if (contract.reflection_intervals < 1)
    throw ConfigError("contract: reflection interval count must be >= 1");
  contract.omega = is_put_type(contract.kind) ? -1.0 : 1.0;
}

// The subset a contract actually reads (empty means all components).
inline std::vector<int> contract_subset(const ContractSpec& contract, int d) {
  if (!contract.assets.empty()) return contract.assets;
  std::vector<int> all(d);
  for (int i = 0; i < d; ++i) all[i] = i;
  return all;
}

// True when t_n is an interior exercise date of the contract: the schedule
// is {k·T/R}, and both endpoints are excluded from reflection.
inline bool is_reflection_node(const ContractSpec& contract,
                               const TimeGrid& grid, int n) {
  if (n <= 0 || n >= grid.steps) return false;
  const int r = contract.reflection_intervals;
  if (grid.steps % r != 0)
    throw ConfigError("contract: exercise dates do not lie on the grid");
  return n % (grid.steps / r) == 0;
}

// ---------------------------------------------------------------------------
// Payoffs and almost-everywhere gradients.  At exact kinks the
// out-of-the-money branch (zero slope) is returned; the cash-or-nothing
// payoff has zero gradient everywhere it is defined.

inline double payoff(const ContractSpec& contract, const RowVector& x) {
  const auto subset = contract_subset(contract, int(x.size()));
  switch (contract.kind) {
    case PayoffKind::GeometricCall:
    case PayoffKind::GeometricPut: {
      double log_sum = 0.0;
      for (int a : subset) {
        if (!(x[a] > 0))
          throw DomainError("payoff: geometric payoff needs positive state");
        log_sum += std::log(x[a]);
      }
      const double geo = std::exp(log_sum / double(subset.size()));
      return std::max(contract.omega * (geo - contract.strike), 0.0);
    }
    case PayoffKind::ArithmeticPutOnSubset: {
      double mean = 0.0;
      for (int a : subset) mean += x[a];
      mean /= double(subset.size());
      return std::max(contract.strike - mean, 0.0);
    }
    case PayoffKind::CallOnMax: {
      double best = x[subset[0]];
      for (int a : subset) best = std::max(best, x[a]);
      return std::max(best - contract.strike, 0.0);
    }
    case PayoffKind::PutOnMin: {
      double worst = x[subset[0]];
      for (int a : subset) worst = std::min(worst, x[a]);
      return std::max(contract.strike - worst, 0.0);
    }
    case PayoffKind::CashOrNothing: {
      for (int a : subset)
        if (x[a] < contract.lower_barrier || x[a] > contract.upper_barrier)
          return 0.0;
      return 1.0;
    }
    case PayoffKind::VanillaCall:
      return std::max(x[contract.assets[0]] - contract.strike, 0.0);
    case PayoffKind::VanillaPut:
      return std::max(contract.strike - x[contract.assets[0]], 0.0);
    case PayoffKind::ExchangeCall:
      return std::max(
          x[contract.assets[0]] - contract.strike * x[contract.assets[1]],
          0.0);
  }
  throw ConfigError("payoff: unknown payoff kind");
}

inline RowVector payoff_gradient(const ContractSpec& contract,
                                 const RowVector& x) {
  RowVector g = RowVector::Zero(x.size());
  const auto subset = contract_subset(contract, int(x.size()));
  switch (contract.kind) {
    case PayoffKind::GeometricCall:
    case PayoffKind::GeometricPut: {
      double log_sum = 0.0;
      for (int a : subset) {
        if (!(x[a] > 0))
          throw DomainError("payoff_gradient: geometric payoff needs "
                            "positive state");
        log_sum += std::log(x[a]);
      }
      const double geo = std::exp(log_sum / double(subset.size()));
      if (contract.omega * (geo - contract.strike) > 0)
        for (int a : subset)
          g[a] = contract.omega * geo / (double(subset.size()) * x[a]);
      return g;
    }
    case PayoffKind::ArithmeticPutOnSubset: {
      double mean = 0.0;
      for (int a : subset) mean += x[a];
      mean /= double(subset.size());
      if (contract.strike - mean > 0)
        for (int a : subset) g[a] = -1.0 / double(subset.size());
      return g;
    }
    case PayoffKind::CallOnMax: {
      int best = subset[0];
      for (int a : subset)
        if (x[a] > x[best]) best = a;
      if (x[best] - contract.strike > 0) g[best] = 1.0;
      return g;
    }
    case PayoffKind::PutOnMin: {
      int worst = subset[0];
      for (int a : subset)
        if (x[a] < x[worst]) worst = a;
      if (contract.strike - x[worst] > 0) g[worst] = -1.0;
      return g;
    }
    case PayoffKind::CashOrNothing:
      return g;
    case PayoffKind::VanillaCall:
      if (x[contract.assets[0]] - contract.strike > 0)
        g[contract.assets[0]] = 1.0;
      return g;
    case PayoffKind::VanillaPut:
      if (contract.strike - x[contract.assets[0]] > 0)
        g[contract.assets[0]] = -1.0;
      return g;
    case PayoffKind::ExchangeCall:
      if (x[contract.assets[0]] - contract.strike * x[contract.assets[1]] >
          0) {
        g[contract.assets[0]] = 1.0;
        g[contract.assets[1]] = -contract.strike;
      }
      return g;
  }
  throw ConfigError("payoff_gradient: unknown payoff kind");
}

// ---------------------------------------------------------------------------
// Portfolio: an ordered collection of contracts driven by one model.

struct PortfolioSpec {
  ModelSpec model;
  std::vector<ContractSpec> contracts;

  int size() const { return int(contracts.size()); }
};

inline void validate_portfolio(PortfolioSpec& portfolio,
                               const TimeGrid& grid) {
  if (portfolio.contracts.empty())
    throw ConfigError("portfolio: needs at least one contract");
  for (auto& contract : portfolio.contracts) {
    validate_contract(contract, portfolio.model.d);
    if (grid.steps % contract.reflection_intervals != 0)
      throw ConfigError("portfolio: exercise dates of a contract do not lie "
                        "on the time grid");
  }
}

inline Vector payoff_all(const PortfolioSpec& portfolio, const RowVector& x) {
  Vector out(portfolio.size());
  for (int j = 0; j < portfolio.size(); ++j)
    out[j] = payoff(portfolio.contracts[j], x);
  return out;
}

inline Matrix payoff_gradient_all(const PortfolioSpec& portfolio,
                                  const RowVector& x) {
  Matrix out(portfolio.size(), x.size());
  for (int j = 0; j < portfolio.size(); ++j)
    out.row(j) = payoff_gradient(portfolio.contracts[j], x);
  return out;
}

// ---------------------------------------------------------------------------
// Generator of the backward equations: value and analytic Jacobians of the
// driver at (t, x, y, z), rows independent across contracts.

struct DriverEval {
  Vector f;   // J
  Matrix gx;  // J×d, (∂f_j/∂x_l)
  Vector gy;  // J,   (∂f_j/∂y_j)
  Matrix gz;  // J×d, (∂f_j/∂z_{j,l})
};

inline DriverEval driver(const ModelSpec& model, double t, const RowVector& x,
                         const Vector& y, const Matrix& z) {
  const int n_rows = int(y.size());
  if (z.rows() != n_rows || z.cols() != model.d)
    throw ShapeMismatch("driver: z must be J×d");
  DriverEval out;
  out.f.resize(n_rows);
  out.gx = Matrix::Zero(n_rows, model.d);
  out.gy = Vector::Constant(n_rows, -model.r);
  out.gz.resize(n_rows, model.d);
  if (model.kind == ModelKind::BlackScholes) {
    // f_j = -r y_j - θ·(z_j Σ⁻¹), θ_i = (μ̄_i - r + q_i)/σ̄_i.
    Vector theta(model.m);
    for (int i = 0; i < model.m; ++i)
      theta[i] =
          (model.mu_bar[i] - model.r + model.q[i]) / model.sigma_bar[i];
    // z Σ⁻¹ θ = z·(Σ⁻¹θ); precompute u = Σ⁻¹θ by forward substitution.
    const Vector u =
        model.chol.triangularView<Eigen::Lower>().solve(theta);
    for (int j = 0; j < n_rows; ++j) {
      out.f[j] = -model.r * y[j] - z.row(j).dot(u);
      out.gz.row(j) = -u.transpose();
    }
    return out;
  }
  // Heston: f_j = -r y_j - (μ̄ - r + q)·s·(z_j σ⁻¹)_1; the s factor cancels
  // against the spot inside σ, leaving -c·z_{j,1}/(ρ√ν).
  const double premium = model.mu_bar[0] - model.r + model.q[0];
  const Matrix w = apply_sigma_inverse(model, t, x, z);
  const double root_nu = std::sqrt(std::abs(x[1]));
  for (int j = 0; j < n_rows; ++j) {
    out.f[j] = -model.r * y[j] - premium * x[0] * w(j, 0);
    out.gz(j, 0) = -premium / (model.heston.rho * root_nu);
    out.gz(j, 1) = 0.0;
    out.gx(j, 0) = 0.0;
    out.gx(j, 1) =
        premium * z(j, 0) / (2.0 * model.heston.rho * std::pow(std::abs(x[1]), 1.5));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reflection operators.  Both trigger on the same indicator
// 1{t_n interior exercise date} · 1{payoff(x) > ỹ}.

inline bool reflection_triggered(const ContractSpec& contract,
                                 const TimeGrid& grid, int n,
                                 const RowVector& x, double y_tilde) {
  return is_reflection_node(contract, grid, n) &&
         payoff(contract, x) > y_tilde;
}

inline double reflect_y(const ContractSpec& contract, const TimeGrid& grid,
                        int n, const RowVector& x, double y_tilde) {
  if (!is_reflection_node(contract, grid, n)) return y_tilde;
  const double exercise = payoff(contract, x);
  return exercise > y_tilde ? exercise : y_tilde;
}

inline RowVector reflect_z(const ContractSpec& contract,
                           const ModelSpec& model, const TimeGrid& grid,
                           int n, const RowVector& x, double y_tilde,
                           const RowVector& z_tilde) {
  if (!reflection_triggered(contract, grid, n, x, y_tilde)) return z_tilde;
  return payoff_gradient(contract, x) * sigma_at(model, grid.t(n), x);
}

}  // namespace bsdehedge
