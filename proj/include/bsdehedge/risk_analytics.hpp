#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "bsdehedge/common.hpp"
#include "bsdehedge/hedging_engine.hpp"

namespace bsdehedge {

// ---------------------------------------------------------------------------
// Normalized, discounted hedging error per path:
//   e^{-r t_horizon} P_horizon / Σ_j Ŷ_0.
// Failed paths are dropped (count preserved by the caller via
// HedgeResult::excluded).

inline std::vector<double> pnl(const HedgeResult& result, double r) {
  if (std::abs(result.y0_total) < 1e-300)
    throw ZeroNormalizer("pnl: initial portfolio value is zero");
  std::vector<double> out;
  out.reserve(result.p_horizon.size());
  for (std::size_t p = 0; p < result.p_horizon.size(); ++p) {
    if (result.failed[p]) continue;
    out.push_back(std::exp(-r * result.t_horizon[p]) * result.p_horizon[p] /
                  result.y0_total);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Empirical tail measures.

struct RiskSummary {
  double mean = 0;
  double variance = 0;      // sample variance (n-1 denominator)
  double var95 = 0;         // 5th-percentile order statistic
  double es95 = 0;          // mean of samples strictly below var95
  double es99 = 0;
  double semivariance = 0;  // mean squared deviation below the mean
  int n = 0;
  int excluded = 0;
};

// Lower order statistic at level α: the ⌈(1-α)·n⌉-th smallest sample.
inline double value_at_risk(const std::vector<double>& sorted, double alpha) {
  const int n = int(sorted.size());
  // Ceiling with a tolerance: levels like 0.95 are not binary fractions,
  // so (1-alpha)*n can land a hair above an exact integer rank and must
  // not be pushed to the next order statistic.
  int rank = int(std::ceil((1.0 - alpha) * n - 1e-9));
  rank = std::clamp(rank, 1, n);
  return sorted[rank - 1];
}

inline double expected_shortfall(const std::vector<double>& sorted,
                                 double var) {
  double sum = 0;
  int count = 0;
  for (double x : sorted) {
    if (x >= var) break;
    sum += x;
    ++count;
  }
  return count == 0 ? var : sum / count;
}

inline RiskSummary risk_measures(const std::vector<double>& samples,
                                 int excluded = 0) {
  const int n = int(samples.size());
  if (n < 20)
    throw InsufficientSample("risk_measures: need at least 20 samples for "
                             "tail measures");
  RiskSummary out;
  out.n = n;
  out.excluded = excluded;
  double sum = 0;
  for (double x : samples) sum += x;
  out.mean = sum / n;
  double ss = 0;
  for (double x : samples) ss += (x - out.mean) * (x - out.mean);
  out.variance = ss / (n - 1);
  double semi = 0;
  int n_below = 0;
  for (double x : samples) {
    if (x < out.mean) {
      semi += (x - out.mean) * (x - out.mean);
      ++n_below;
    }
  }
  out.semivariance = n_below == 0 ? 0.0 : semi / n_below;
  std::vector<double> sorted = samples;
  std::sort(sorted.begin(), sorted.end());
  out.var95 = value_at_risk(sorted, 0.95);
  out.es95 = expected_shortfall(sorted, out.var95);
  const double var99 = value_at_risk(sorted, 0.99);
  out.es99 = expected_shortfall(sorted, var99);
  return out;
}

// ---------------------------------------------------------------------------
// Gaussian kernel density on a uniform grid.

struct KdeCurve {
  std::vector<double> x;
  std::vector<double> density;
  double bandwidth = 0;
};

inline KdeCurve kde(const std::vector<double>& samples, int n_grid = 512) {
  const int n = int(samples.size());
  if (n < 2) throw DegenerateSample("kde: need at least two samples");
  if (n_grid < 2) throw ConfigError("kde: grid needs at least two points");
  double mean = 0;
  for (double x : samples) mean += x;
  mean /= n;
  double ss = 0;
  for (double x : samples) ss += (x - mean) * (x - mean);
  const double sd = std::sqrt(ss / (n - 1));
  if (!(sd > 0)) throw DegenerateSample("kde: zero sample spread");
  const double h = 1.8 * sd * std::pow(double(n), -0.2);
  const auto [mn_it, mx_it] = std::minmax_element(samples.begin(), samples.end());
  const double lo = *mn_it - 3 * h;
  const double hi = *mx_it + 3 * h;
  KdeCurve out;
  out.bandwidth = h;
  out.x.resize(n_grid);
  out.density.resize(n_grid);
  const double step = (hi - lo) / (n_grid - 1);
  const double norm = 1.0 / (n * h * std::sqrt(2.0 * 3.14159265358979323846));
  for (int g = 0; g < n_grid; ++g) {
    const double xg = lo + g * step;
    double acc = 0;
    for (double s : samples) {
      const double u = (xg - s) / h;
      acc += std::exp(-0.5 * u * u);
    }
    out.x[g] = xg;
    out.density[g] = norm * acc;
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV writers.  Numbers use shortest round-trip formatting so reports are
// byte-stable across runs with the same seed.

struct ReportRow {
  std::string preset;
  std::string strategy;
  int n_rebalance = 0;
  RiskSummary risk;
};

inline void write_report_header(std::ostream& os) {
  os << "strategy,N_rebalance,mean,variance,var95,es95,es99,semivariance,"
        "n_paths,excluded\n";
}

inline void write_report_row(std::ostream& os, const ReportRow& row) {
  os << row.strategy << ',' << format_int(row.n_rebalance) << ','
     << format_double(row.risk.mean) << ',' << format_double(row.risk.variance)
     << ',' << format_double(row.risk.var95) << ','
     << format_double(row.risk.es95) << ',' << format_double(row.risk.es99)
     << ',' << format_double(row.risk.semivariance) << ','
     << format_int(row.risk.n) << ',' << format_int(row.risk.excluded)
     << '\n';
}

inline void write_kde_csv(std::ostream& os, const KdeCurve& curve) {
  os << "x,density\n";
  for (std::size_t g = 0; g < curve.x.size(); ++g)
    os << format_double(curve.x[g]) << ',' << format_double(curve.density[g])
       << '\n';
}

inline void write_ledger_header(std::ostream& os, int n_tradeables,
                                int n_instruments) {
  os << "path,step,t,P,B";
  for (int i = 0; i < n_tradeables; ++i) os << ",alpha_" << (i + 1);
  for (int k = 0; k < n_instruments; ++k) os << ",beta_" << (k + 1);
  os << ",exercised_mask\n";
}

inline void write_ledger_row(std::ostream& os, const LedgerRow& row) {
  os << format_int(row.path) << ',' << format_int(row.step) << ','
     << format_double(row.t) << ',' << format_double(row.p) << ','
     << format_double(row.bank);
  for (int i = 0; i < row.alpha.size(); ++i)
    os << ',' << format_double(row.alpha[i]);
  for (int k = 0; k < row.beta.size(); ++k)
    os << ',' << format_double(row.beta[k]);
  os << ',';
  for (std::size_t j = 0; j < row.exercised.size(); ++j)
    os << (row.exercised[j] ? '1' : '0');
  os << '\n';
}

}  // namespace bsdehedge
