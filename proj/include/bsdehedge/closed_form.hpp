#pragma once

#include <cmath>

#include "bsdehedge/common.hpp"

namespace bsdehedge {

// Standard normal distribution.  The cdf goes through the complementary
// error function so that tail values keep full double precision.
inline double normal_cdf(double x) {
  return 0.5 * std::erfc(-x * 0.70710678118654752440084436210485);
}

inline double normal_pdf(double x) {
  return 0.39894228040143267793994605993438 * std::exp(-0.5 * x * x);
}

enum class OptionKind { Call, Put };

// Price and sensitivities of a European vanilla option in the scalar
// Black-Scholes model with continuous dividend yield.
struct VanillaQuote {
  double price = 0;
  double delta = 0;
  double gamma = 0;
  double vega = 0;
  double vomma = 0;
  double vanna = 0;
  double d1 = 0;
  double d2 = 0;
};

inline VanillaQuote bs_vanilla(double s, double k, double r, double q,
                               double sigma, double tau, OptionKind kind) {
  if (!(s > 0) || !(k > 0) || !(sigma > 0) || !(tau > 0))
    throw DomainError("bs_vanilla: requires S, K, sigma, tau > 0");
  VanillaQuote out;
  const double vol = sigma * std::sqrt(tau);
  out.d1 = (std::log(s / k) + (r - q + 0.5 * sigma * sigma) * tau) / vol;
  out.d2 = out.d1 - vol;
  const double df_q = std::exp(-q * tau);
  const double df_r = std::exp(-r * tau);
  const double pdf1 = normal_pdf(out.d1);
  if (kind == OptionKind::Call) {
    out.price = s * df_q * normal_cdf(out.d1) - k * df_r * normal_cdf(out.d2);
    out.delta = df_q * normal_cdf(out.d1);
  } else {
    out.price = k * df_r * normal_cdf(-out.d2) - s * df_q * normal_cdf(-out.d1);
    out.delta = -df_q * normal_cdf(-out.d1);
  }
  out.gamma = df_q * pdf1 / (s * vol);
  out.vega = s * df_q * pdf1 * std::sqrt(tau);
  out.vomma = out.vega * out.d1 * out.d2 / sigma;
  out.vanna = -df_q * pdf1 * out.d2 / sigma;
  return out;
}

// Quote for the option to exchange K units of asset j against one unit of
// asset k, with payoff max(S_k − K S_j, 0) at expiry.
struct ExchangeQuote {
  double price = 0;
  double d_k = 0;    // ∂C/∂S_k
  double d_j = 0;    // ∂C/∂S_j
  double d2_kk = 0;  // ∂²C/∂S_k²
  double d2_kj = 0;  // ∂²C/∂S_k∂S_j
  double d2_jk = 0;  // ∂²C/∂S_j∂S_k
  double d2_jj = 0;  // ∂²C/∂S_j²
  double d1 = 0;
  double d2 = 0;
  double sigma_kj = 0;  // relative volatility of the two legs
};

inline ExchangeQuote margrabe(double s_k, double s_j, double k_ratio,
                              double sigma_k, double sigma_j, double rho,
                              double q_k, double q_j, double tau,
                              double degeneracy_tol = 1e-10) {
  if (!(s_k > 0) || !(s_j > 0) || !(tau > 0) || !(k_ratio > 0))
    throw DomainError("margrabe: requires S_k, S_j, K, tau > 0");
  ExchangeQuote out;
  const double var =
      sigma_k * sigma_k + sigma_j * sigma_j - 2.0 * rho * sigma_k * sigma_j;
  out.sigma_kj = var > 0 ? std::sqrt(var) : 0.0;
  if (out.sigma_kj <= degeneracy_tol)
    throw DegenerateSpread("margrabe: relative volatility " +
                           format_double(out.sigma_kj) +
                           " below tolerance; legs are exchange-degenerate");
  const double vol = out.sigma_kj * std::sqrt(tau);
  out.d1 = (std::log(s_k / (k_ratio * s_j)) +
            (q_j - q_k + 0.5 * var) * tau) /
           vol;
  out.d2 = out.d1 - vol;
  const double df_k = std::exp(-q_k * tau);
  const double df_j = std::exp(-q_j * tau);
  out.price = df_k * s_k * normal_cdf(out.d1) -
              df_j * k_ratio * s_j * normal_cdf(out.d2);
  out.d_k = df_k * normal_cdf(out.d1);
  out.d_j = -df_j * k_ratio * normal_cdf(out.d2);
  out.d2_kk = df_k * normal_pdf(out.d1) / (vol * s_k);
  out.d2_jk = -df_k * normal_pdf(out.d1) / (vol * s_j);
  out.d2_kj = -df_j * k_ratio * normal_pdf(out.d2) / (vol * s_k);
  out.d2_jj = df_j * k_ratio * normal_pdf(out.d2) / (vol * s_j);
  return out;
}

}  // namespace bsdehedge
