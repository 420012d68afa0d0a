#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <vector>

#include "bsdehedge/common.hpp"
#include "bsdehedge/contracts.hpp"
#include "bsdehedge/linalg.hpp"
#include "bsdehedge/market_models.hpp"
#include "bsdehedge/neural_regression.hpp"

namespace bsdehedge {

enum class SchemeKind { OSM, RDBDP };

inline const char* scheme_name(SchemeKind scheme) {
  return scheme == SchemeKind::OSM ? "osm" : "rdbdp";
}

// Training hyper-parameters for the backward regression loops.
struct TrainConfig {
  long long steps_last = 1 << 16;  // SGD iterations at the last time step
  long long steps_rest = 1 << 12;  // SGD iterations at earlier steps
  int batch_size = 1024;
  double theta_y = 0.5;  // implicit weight of the y-update
  int hidden_layers = 4;
  int hidden_width = 50;
  bool batch_norm = true;
  double lr0 = 1e-3, lr1 = 1e-4, lr2 = 1e-5;
  std::uint64_t seed = 1;
};

// Networks trained for one time step.  The gamma entry is unused (empty)
// for the plain backward-dynamic-programming scheme.
struct StepNets {
  ParamSet y;
  ParamSet z;
  ParamSet gamma;
};

struct SolverArtifact {
  SchemeKind scheme = SchemeKind::OSM;
  double theta_y = 0.5;
  TimeGrid grid;
  PortfolioSpec portfolio;
  std::vector<StepNets> nets;  // index n = 0..N'-1
  std::vector<double> final_loss_z;  // per step diagnostics
  std::vector<double> final_loss_y;
  std::uint64_t seed = 0;
  double wall_time_sec = 0;
  TrainConfig config;
};

// ---------------------------------------------------------------------------
// Evaluation of one time slice.  Flat layouts, per batch row:
//   z-blocks:     index j*d + l           (contract j, state component l)
//   gamma-blocks: index j*d*d + k*d + l   (contract j, entry (k, l))

struct StepEval {
  int n_batch = 0, n_contracts = 0, d = 0;
  Matrix y_tilde;   // B×J continuation values
  Matrix y;         // B×J reflected values
  Matrix z_tilde;   // B×(J·d)
  Matrix z;         // B×(J·d) reflected
  Matrix delta;     // B×(J·d): Z σ⁻¹
  Matrix gamma_raw; // B×(J·d·d): network output γ (OSM only)
  Matrix gamma;     // B×(J·d·d): recovered second-order sensitivities
  bool has_gamma = false;
};

// Evaluate the slice at time index n on a batch of states.  Passing
// nets == nullptr selects the terminal closed forms (required at n = N').
inline StepEval evaluate_step(const PortfolioSpec& portfolio,
                              const TimeGrid& grid, int n,
                              const Matrix& states, const StepNets* nets,
                              bool want_gamma) {
  const ModelSpec& model = portfolio.model;
  const int n_batch = int(states.rows());
  const int n_contracts = portfolio.size();
  const int d = model.d;
  if (states.cols() != d)
    throw ShapeMismatch("evaluate_step: states must be B×d");
  StepEval out;
  out.n_batch = n_batch;
  out.n_contracts = n_contracts;
  out.d = d;
  const double t = grid.t(n);

  if (n >= grid.steps || nets == nullptr) {
    if (n != grid.steps)
      throw ConfigError("evaluate_step: interior step needs trained nets");
    out.y_tilde.resize(n_batch, n_contracts);
    out.z_tilde.resize(n_batch, n_contracts * d);
    out.delta.resize(n_batch, n_contracts * d);
    for (int b = 0; b < n_batch; ++b) {
      const RowVector x = states.row(b);
      const Matrix sig = sigma_at(model, t, x);
      for (int j = 0; j < n_contracts; ++j) {
        out.y_tilde(b, j) = payoff(portfolio.contracts[j], x);
        const RowVector grad = payoff_gradient(portfolio.contracts[j], x);
        out.z_tilde.row(b).segment(j * d, d) = grad * sig;
        out.delta.row(b).segment(j * d, d) = grad;
      }
    }
    out.y = out.y_tilde;
    out.z = out.z_tilde;
    out.gamma_raw = Matrix::Zero(n_batch, n_contracts * d * d);
    out.gamma = out.gamma_raw;
    out.has_gamma = false;
    return out;
  }

  out.y_tilde = forward(nets->y, states, /*training=*/false);
  out.z_tilde = forward(nets->z, states, /*training=*/false);
  out.has_gamma = want_gamma;
  if (want_gamma) {
    if (nets->gamma.weights.empty())
      throw ConfigError("evaluate_step: artifact has no gamma network");
    out.gamma_raw = forward(nets->gamma, states, /*training=*/false);
    out.gamma.resize(n_batch, n_contracts * d * d);
  }
  out.y = out.y_tilde;
  out.z = out.z_tilde;
  out.delta.resize(n_batch, n_contracts * d);

  Matrix z_rows(n_contracts, d);
  for (int b = 0; b < n_batch; ++b) {
    const RowVector x = states.row(b);
    const Matrix sig = sigma_at(model, t, x);
    for (int j = 0; j < n_contracts; ++j) {
      const auto& contract = portfolio.contracts[j];
      if (reflection_triggered(contract, grid, n, x, out.y_tilde(b, j))) {
        const double exercise = payoff(contract, x);
        out.y(b, j) = exercise;
        z_rows.row(j) = payoff_gradient(contract, x) * sig;
        out.z.row(b).segment(j * d, d) = z_rows.row(j);
      } else {
        for (int l = 0; l < d; ++l)
          z_rows(j, l) = out.z_tilde(b, j * d + l);
      }
    }
    const Matrix delta_rows = apply_sigma_inverse(model, t, x, z_rows);
    for (int j = 0; j < n_contracts; ++j)
      out.delta.row(b).segment(j * d, d) = delta_rows.row(j);
    if (want_gamma) {
      for (int j = 0; j < n_contracts; ++j) {
        Matrix gam(d, d);
        for (int k = 0; k < d; ++k)
          for (int l = 0; l < d; ++l)
            gam(k, l) = out.gamma_raw(b, j * d * d + k * d + l);
        const Matrix correction =
            delta_grad_sigma_contraction(model, t, x, delta_rows.row(j));
        const Matrix hess =
            apply_sigma_transpose_inverse(model, t, x, gam - correction);
        for (int k = 0; k < d; ++k)
          for (int l = 0; l < d; ++l)
            out.gamma(b, j * d * d + k * d + l) = hess(k, l);
      }
    }
  }
  return out;
}

inline StepEval evaluate(const SolverArtifact& artifact, int n,
                         const Matrix& states, bool want_gamma = true) {
  if (n < 0 || n > artifact.grid.steps)
    throw ConfigError("evaluate: step index out of range");
  const bool terminal = n == artifact.grid.steps;
  return evaluate_step(artifact.portfolio, artifact.grid, n, states,
                       terminal ? nullptr : &artifact.nets[n],
                       want_gamma && artifact.scheme == SchemeKind::OSM &&
                           !terminal);
}

// ---------------------------------------------------------------------------
// Fresh one-step training batches: simulate from x0 to t_{n+1}, keep only
// (X_n, X_{n+1}, ΔW_n).  Malliavin blocks are rebuilt from X_n and ΔW_n.

struct StepBatch {
  int n = 0;
  Matrix x_n;    // B×d
  Matrix x_np1;  // B×d
  Matrix dw;     // B×d
};

// Training batches are drawn as antithetic pairs: the second half of the
// batch re-runs the first half's paths with every Gaussian increment
// negated.  Both halves are exact draws from the path distribution, so
// every expectation is unchanged, while odd-symmetric noise components of
// the batch-mean gradient cancel within pairs — which tightens the
// stochastic optimization considerably near payoff kinks.
inline StepBatch draw_step_batch(const ModelSpec& model, const TimeGrid& grid,
                                 int n, int batch_size,
                                 std::uint64_t stream_id) {
  StepBatch out;
  out.n = n;
  const int d = model.d;
  out.x_n.resize(batch_size, d);
  out.x_np1.resize(batch_size, d);
  out.dw.resize(batch_size, d);
  const NormalStream rng(stream_id);
  const double dt = grid.dt();
  const double root_dt = std::sqrt(dt);
  const int n_base = (batch_size + 1) / 2;
  std::vector<double> z(d), x(d), x_next(d);
  for (int p = 0; p < batch_size; ++p) {
    const bool mirror = p >= n_base;
    const std::uint64_t draw_row = std::uint64_t(mirror ? p - n_base : p);
    for (int i = 0; i < d; ++i) x[i] = model.x0[i];
    for (int k = 0; k <= n; ++k) {
      rng.fill_normals(draw_row, std::uint32_t(k), z.data(), d);
      if (mirror)
        for (int i = 0; i < d; ++i) z[i] = -z[i];
      if (k == n) {
        for (int i = 0; i < d; ++i) {
          out.x_n(p, i) = x[i];
          out.dw(p, i) = root_dt * z[i];
        }
      }
      euler_step(model, grid.t(k), dt, x.data(), z.data(), x_next.data());
      x = x_next;
    }
    for (int i = 0; i < d; ++i) out.x_np1(p, i) = x[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loss of the (ψ, χ) regression at step n.  `psi` is the candidate Z-block
// (B×J·d), `chi` the candidate γ-block (B×J·d·d), `next` the slice at
// t_{n+1}.  Returns the scalar loss and its exact gradients with respect
// to the two network outputs.

struct ZLossResult {
  double loss = 0;
  Matrix grad_psi;  // B×(J·d)
  Matrix grad_chi;  // B×(J·d·d)
};

inline ZLossResult loss_z(const PortfolioSpec& portfolio, const TimeGrid& grid,
                          const StepBatch& batch, const Matrix& psi,
                          const Matrix& chi, const StepEval& next) {
  const ModelSpec& model = portfolio.model;
  const int n_batch = int(batch.x_n.rows());
  const int n_contracts = portfolio.size();
  const int d = model.d;
  if (psi.rows() != n_batch || psi.cols() != n_contracts * d)
    throw ShapeMismatch("loss_z: psi must be B×(J·d)");
  if (chi.rows() != n_batch || chi.cols() != n_contracts * d * d)
    throw ShapeMismatch("loss_z: chi must be B×(J·d·d)");
  const double dt = grid.dt();
  const double t_n = grid.t(batch.n);
  const double t_np1 = grid.t(batch.n + 1);
  const double inv_bj = 1.0 / (double(n_batch) * double(n_contracts));

  ZLossResult out;
  out.grad_psi = Matrix::Zero(n_batch, n_contracts * d);
  out.grad_chi = Matrix::Zero(n_batch, n_contracts * d * d);

  Matrix z_next(n_contracts, d);
  Matrix chi_j(d, d);
  for (int b = 0; b < n_batch; ++b) {
    const RowVector x_n = batch.x_n.row(b);
    const RowVector x_np1 = batch.x_np1.row(b);
    const RowVector dw = batch.dw.row(b);
    const Matrix sigma_n = sigma_at(model, t_n, x_n);
    const Matrix dnx_np1 =
        malliavin_step(model, t_n, x_n, sigma_n, dw, dt);
    for (int j = 0; j < n_contracts; ++j)
      for (int l = 0; l < d; ++l) z_next(j, l) = next.z(b, j * d + l);
    const DriverEval dj =
        driver(model, t_np1, x_np1, next.y.row(b).transpose(), z_next);
    for (int j = 0; j < n_contracts; ++j) {
      RowVector delta_next(d);
      for (int l = 0; l < d; ++l) delta_next[l] = next.delta(b, j * d + l);
      const RowVector dny = delta_next * dnx_np1;
      for (int k = 0; k < d; ++k)
        for (int l = 0; l < d; ++l)
          chi_j(k, l) = chi(b, j * d * d + k * d + l);
      const Matrix m = chi_j * sigma_n;
      RowVector psi_j(d);
      for (int l = 0; l < d; ++l) psi_j[l] = psi(b, j * d + l);
      const RowVector res = dny +
                            dt * (dj.gx.row(j) * dnx_np1 + dj.gy[j] * dny +
                                  dj.gz.row(j) * m) -
                            psi_j - dw * m;
      out.loss += res.squaredNorm() * inv_bj;
      out.grad_psi.row(b).segment(j * d, d) = -2.0 * inv_bj * res;
      const RowVector v = dt * dj.gz.row(j) - dw;
      const RowVector t_res = res * sigma_n.transpose();
      for (int k = 0; k < d; ++k)
        for (int l = 0; l < d; ++l)
          out.grad_chi(b, j * d * d + k * d + l) =
              2.0 * inv_bj * v[k] * t_res[l];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loss of the y regression at step n.  `phi` is the candidate continuation
// block (B×J); `psi_hat` the already-trained Z-block at X_n (B×J·d), whose
// reflection is recomputed against the *current* phi and treated as a
// constant.  `next` is the slice at t_{n+1}.

struct YLossResult {
  double loss = 0;
  Matrix grad_phi;  // B×J
};

inline YLossResult loss_y(const PortfolioSpec& portfolio, const TimeGrid& grid,
                          const StepBatch& batch, const Matrix& phi,
                          const Matrix& psi_hat, const StepEval& next,
                          double theta_y) {
  const ModelSpec& model = portfolio.model;
  const int n_batch = int(batch.x_n.rows());
  const int n_contracts = portfolio.size();
  const int d = model.d;
  if (phi.rows() != n_batch || phi.cols() != n_contracts)
    throw ShapeMismatch("loss_y: phi must be B×J");
  const double dt = grid.dt();
  const double t_n = grid.t(batch.n);
  const double t_np1 = grid.t(batch.n + 1);

  YLossResult out;
  out.grad_phi = Matrix::Zero(n_batch, n_contracts);

  Matrix z_next(n_contracts, d);
  Matrix z_hat(n_contracts, d);
  for (int b = 0; b < n_batch; ++b) {
    const RowVector x_n = batch.x_n.row(b);
    const RowVector x_np1 = batch.x_np1.row(b);
    const RowVector dw = batch.dw.row(b);
    for (int j = 0; j < n_contracts; ++j)
      for (int l = 0; l < d; ++l) z_next(j, l) = next.z(b, j * d + l);
    // Explicit part of the θ-scheme: driver at t_{n+1} on the continuation
    // value and the reflected Z of the next slice.
    const DriverEval dj_next = driver(model, t_np1, x_np1,
                                      next.y_tilde.row(b).transpose(), z_next);
    // Reflection of the trained Z against the current continuation value.
    bool any_reflection = false;
    for (int j = 0; j < n_contracts; ++j) {
      const auto& contract = portfolio.contracts[j];
      if (reflection_triggered(contract, grid, batch.n, x_n, phi(b, j))) {
        any_reflection = true;
        break;
      }
    }
    const Matrix sigma_n =
        any_reflection ? sigma_at(model, t_n, x_n) : Matrix();
    for (int j = 0; j < n_contracts; ++j) {
      const auto& contract = portfolio.contracts[j];
      if (reflection_triggered(contract, grid, batch.n, x_n, phi(b, j)))
        z_hat.row(j) = payoff_gradient(contract, x_n) * sigma_n;
      else
        for (int l = 0; l < d; ++l) z_hat(j, l) = psi_hat(b, j * d + l);
    }
    const DriverEval dj_now =
        driver(model, t_n, x_n, phi.row(b).transpose(), z_hat);
    for (int j = 0; j < n_contracts; ++j) {
      const double res = next.y(b, j) + (1.0 - theta_y) * dt * dj_next.f[j] +
                         theta_y * dt * dj_now.f[j] - phi(b, j) -
                         z_hat.row(j).dot(dw);
      out.loss += res * res / double(n_batch);
      out.grad_phi(b, j) = 2.0 / double(n_batch) * res *
                           (theta_y * dt * dj_now.gy[j] - 1.0);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Joint (φ, ψ) loss of the plain reflected backward scheme.

struct RdbdpLossResult {
  double loss = 0;
  Matrix grad_phi;  // B×J
  Matrix grad_psi;  // B×(J·d)
};

inline RdbdpLossResult rdbdp_loss(const PortfolioSpec& portfolio,
                                  const TimeGrid& grid, const StepBatch& batch,
                                  const Matrix& phi, const Matrix& psi,
                                  const StepEval& next) {
  const ModelSpec& model = portfolio.model;
  const int n_batch = int(batch.x_n.rows());
  const int n_contracts = portfolio.size();
  const int d = model.d;
  const double dt = grid.dt();
  const double t_n = grid.t(batch.n);

  RdbdpLossResult out;
  out.grad_phi = Matrix::Zero(n_batch, n_contracts);
  out.grad_psi = Matrix::Zero(n_batch, n_contracts * d);

  Matrix psi_rows(n_contracts, d);
  for (int b = 0; b < n_batch; ++b) {
    const RowVector x_n = batch.x_n.row(b);
    const RowVector dw = batch.dw.row(b);
    for (int j = 0; j < n_contracts; ++j)
      for (int l = 0; l < d; ++l) psi_rows(j, l) = psi(b, j * d + l);
    const DriverEval dj =
        driver(model, t_n, x_n, phi.row(b).transpose(), psi_rows);
    for (int j = 0; j < n_contracts; ++j) {
      const double res = next.y(b, j) + dt * dj.f[j] - phi(b, j) -
                         psi_rows.row(j).dot(dw);
      out.loss += res * res / double(n_batch);
      const double scale = 2.0 / double(n_batch) * res;
      out.grad_phi(b, j) = scale * (dt * dj.gy[j] - 1.0);
      for (int l = 0; l < d; ++l)
        out.grad_psi(b, j * d + l) = scale * (dt * dj.gz(j, l) - dw[l]);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Backward training loops.

namespace role_tag {
constexpr std::uint64_t kY = 1;
constexpr std::uint64_t kZ = 2;
constexpr std::uint64_t kGamma = 3;
}  // namespace role_tag

namespace detail {

inline void check_finite_loss(double loss, const char* which, int step,
                              long long iteration) {
  if (!std::isfinite(loss))
    throw NumericError(std::string(which) + " diverged (non-finite loss) at "
                       "time step " + format_int(step) + ", iteration " +
                       format_int(iteration));
}

inline MLPSpec make_spec(int d, int out_dim, const TrainConfig& config) {
  MLPSpec spec;
  spec.input_dim = d;
  spec.hidden_layers = config.hidden_layers;
  spec.hidden_width = config.hidden_width;
  spec.output_dim = out_dim;
  spec.batch_norm = config.batch_norm;
  return spec;
}

// Fresh state batches used to measure the normalization statistics once a
// step's optimization has finished.
inline std::vector<Matrix> stats_batches(const ModelSpec& model,
                                         const TimeGrid& grid, int n,
                                         const TrainConfig& config) {
  constexpr int kStatsBatches = 16;
  std::vector<Matrix> out;
  out.reserve(kStatsBatches);
  for (int b = 0; b < kStatsBatches; ++b) {
    out.push_back(draw_step_batch(
                      model, grid, n, config.batch_size,
                      derive_stream(config.seed,
                                    {stream_tag::kTrainBatch,
                                     std::uint64_t(n), 2, std::uint64_t(b)}))
                      .x_n);
  }
  return out;
}

// Rescale the affine output layer so that the freshly initialized network
// already covers the location and spread of its regression target.  A
// tanh network out of the box produces outputs of order one; growing the
// output weights toward a payoff-sized range costs the optimizer a number
// of steps proportional to the range itself, which is exactly what a
// short warm-up budget cannot afford.  Matching the first two moments of
// the target up front removes that burn-in without touching the
// architecture.
inline void scale_output_layer(ParamSet& p, const RowVector& target_mean,
                               const RowVector& target_std) {
  Matrix& w_out = p.weights.back();
  Vector& b_out = p.biases.back();
  for (int k = 0; k < w_out.cols(); ++k) {
    w_out.col(k) *= target_std[k];
    b_out[k] = target_mean[k];
  }
}

// Empirical first/second moments of the regression responses seen by the
// three networks at the from-scratch step n = N−1: the next-slice value
// for the continuation network, the Malliavin chain-rule response for the
// Z network, and the Brownian cross-response (the discrete projection the
// γ block is regressed on) for the Γ network.
struct OutputScaleTargets {
  RowVector y_mean, y_std;
  RowVector z_mean, z_std;
  RowVector gamma_mean, gamma_std;
};

inline OutputScaleTargets terminal_scale_targets(const PortfolioSpec& portfolio,
                                                 const TimeGrid& grid,
                                                 const TrainConfig& config) {
  const ModelSpec& model = portfolio.model;
  const int d = model.d;
  const int n_contracts = portfolio.size();
  const int n = grid.steps - 1;
  const StepBatch batch = draw_step_batch(
      model, grid, n, config.batch_size,
      derive_stream(config.seed,
                    {stream_tag::kTrainBatch, std::uint64_t(n), 3, 0}));
  const StepEval next =
      evaluate_step(portfolio, grid, n + 1, batch.x_np1, nullptr,
                    /*want_gamma=*/false);
  const int n_batch = int(batch.x_n.rows());
  const double dt = grid.dt();
  const double t_n = grid.t(n);

  Matrix y_t(n_batch, n_contracts);
  Matrix z_t(n_batch, n_contracts * d);
  Matrix g_t(n_batch, n_contracts * d * d);
  Matrix cross(d, d);
  for (int b = 0; b < n_batch; ++b) {
    const RowVector x_n = batch.x_n.row(b);
    const RowVector dw = batch.dw.row(b);
    const Matrix sigma_n = sigma_at(model, t_n, x_n);
    const Matrix dnx_np1 = malliavin_step(model, t_n, x_n, sigma_n, dw, dt);
    for (int j = 0; j < n_contracts; ++j) {
      y_t(b, j) = next.y(b, j);
      RowVector delta_next(d);
      for (int l = 0; l < d; ++l) delta_next[l] = next.delta(b, j * d + l);
      const RowVector dny = delta_next * dnx_np1;
      for (int l = 0; l < d; ++l) z_t(b, j * d + l) = dny[l];
      for (int k = 0; k < d; ++k) cross.row(k) = (dw[k] / dt) * dny;
      const Matrix resp = apply_sigma_inverse(model, t_n, x_n, cross);
      for (int k = 0; k < d; ++k)
        for (int i = 0; i < d; ++i)
          g_t(b, j * d * d + k * d + i) = resp(k, i);
    }
  }
  auto moments = [&](const Matrix& t, RowVector& mean, RowVector& stdev) {
    mean = t.colwise().mean();
    stdev = ((t.rowwise() - mean).array().square().colwise().mean())
                .sqrt()
                .matrix();
  };
  OutputScaleTargets out;
  moments(y_t, out.y_mean, out.y_std);
  moments(z_t, out.z_mean, out.z_std);
  moments(g_t, out.gamma_mean, out.gamma_std);
  return out;
}

}  // namespace detail

inline SolverArtifact osm_train(const PortfolioSpec& portfolio,
                                const TimeGrid& grid,
                                const TrainConfig& config) {
  const auto start = std::chrono::steady_clock::now();
  const ModelSpec& model = portfolio.model;
  const int n_contracts = portfolio.size();
  const int d = model.d;
  const int n_steps = grid.steps;

  SolverArtifact artifact;
  artifact.scheme = SchemeKind::OSM;
  artifact.theta_y = config.theta_y;
  artifact.grid = grid;
  artifact.portfolio = portfolio;
  artifact.nets.resize(n_steps);
  artifact.final_loss_z.assign(n_steps, 0.0);
  artifact.final_loss_y.assign(n_steps, 0.0);
  artifact.seed = config.seed;
  artifact.config = config;

  StepNets current;
  for (int n = n_steps - 1; n >= 0; --n) {
    const bool last_step = n == n_steps - 1;
    const long long iters = last_step ? config.steps_last : config.steps_rest;
    if (last_step) {
      current.y = init_params(
          detail::make_spec(d, n_contracts, config),
          derive_stream(config.seed, {stream_tag::kInit, std::uint64_t(n),
                                      role_tag::kY}));
      current.z = init_params(
          detail::make_spec(d, n_contracts * d, config),
          derive_stream(config.seed, {stream_tag::kInit, std::uint64_t(n),
                                      role_tag::kZ}));
      current.gamma = init_params(
          detail::make_spec(d, n_contracts * d * d, config),
          derive_stream(config.seed, {stream_tag::kInit, std::uint64_t(n),
                                      role_tag::kGamma}));
      const detail::OutputScaleTargets scales =
          detail::terminal_scale_targets(portfolio, grid, config);
      detail::scale_output_layer(current.y, scales.y_mean, scales.y_std);
      detail::scale_output_layer(current.z, scales.z_mean, scales.z_std);
      detail::scale_output_layer(current.gamma, scales.gamma_mean,
                                 scales.gamma_std);
    } else {
      current.y = transfer_init(artifact.nets[n + 1].y);
      current.z = transfer_init(artifact.nets[n + 1].z);
      current.gamma = transfer_init(artifact.nets[n + 1].gamma);
      current.y.bn_frozen = true;
      current.z.bn_frozen = true;
      current.gamma.bn_frozen = true;
    }
    const StepNets* next_nets = n + 1 < n_steps ? &artifact.nets[n + 1] : nullptr;

    // Phase 1: fit ψ (Z) and χ (γ) on the martingale-projection loss.
    AdamState adam_z = AdamState::like(current.z);
    AdamState adam_chi = AdamState::like(current.gamma);
    double last_loss_z = 0;
    for (long long it = 0; it < iters; ++it) {
      const StepBatch batch = draw_step_batch(
          model, grid, n, config.batch_size,
          derive_stream(config.seed, {stream_tag::kTrainBatch,
                                      std::uint64_t(n), 0, std::uint64_t(it)}));
      const StepEval next = evaluate_step(portfolio, grid, n + 1, batch.x_np1,
                                          next_nets, /*want_gamma=*/false);
      ForwardCache cache_z, cache_chi;
      const Matrix psi = forward(current.z, batch.x_n, true, &cache_z);
      const Matrix chi = forward(current.gamma, batch.x_n, true, &cache_chi);
      const ZLossResult zl = loss_z(portfolio, grid, batch, psi, chi, next);
      detail::check_finite_loss(zl.loss, "z-regression", n, it);
      last_loss_z = zl.loss;
      const double lr = lr_schedule(it, iters, config.lr0, config.lr1,
                                    config.lr2);
      const Gradients gz = backward(current.z, cache_z, zl.grad_psi);
      const Gradients gchi = backward(current.gamma, cache_chi, zl.grad_chi);
      adam_step(adam_z, current.z, gz, lr);
      adam_step(adam_chi, current.gamma, gchi, lr);
      update_running_stats(current.z, cache_z);
      update_running_stats(current.gamma, cache_chi);
    }
    {
      const std::vector<Matrix> stat_batches =
          detail::stats_batches(model, grid, n, config);
      finalize_running_stats(current.z, stat_batches);
      finalize_running_stats(current.gamma, stat_batches);
    }
    artifact.final_loss_z[n] = last_loss_z;

    // Phase 2: fit φ (continuation value) with ψ̂ frozen.
    AdamState adam_y = AdamState::like(current.y);
    double last_loss_y = 0;
    for (long long it = 0; it < iters; ++it) {
      const StepBatch batch = draw_step_batch(
          model, grid, n, config.batch_size,
          derive_stream(config.seed, {stream_tag::kTrainBatch,
                                      std::uint64_t(n), 1, std::uint64_t(it)}));
      const StepEval next = evaluate_step(portfolio, grid, n + 1, batch.x_np1,
                                          next_nets, /*want_gamma=*/false);
      ForwardCache cache_y;
      const Matrix phi = forward(current.y, batch.x_n, true, &cache_y);
      const Matrix psi_hat = forward(current.z, batch.x_n, false);
      const YLossResult yl =
          loss_y(portfolio, grid, batch, phi, psi_hat, next, config.theta_y);
      detail::check_finite_loss(yl.loss, "y-regression", n, it);
      last_loss_y = yl.loss;
      const double lr = lr_schedule(it, iters, config.lr0, config.lr1,
                                    config.lr2);
      const Gradients gy = backward(current.y, cache_y, yl.grad_phi);
      adam_step(adam_y, current.y, gy, lr);
      update_running_stats(current.y, cache_y);
    }
    finalize_running_stats(current.y,
                           detail::stats_batches(model, grid, n, config));
    artifact.final_loss_y[n] = last_loss_y;
    artifact.nets[n] = current;
  }
  artifact.wall_time_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();
  return artifact;
}

inline SolverArtifact rdbdp_train(const PortfolioSpec& portfolio,
                                  const TimeGrid& grid,
                                  const TrainConfig& config) {
  const auto start = std::chrono::steady_clock::now();
  const ModelSpec& model = portfolio.model;
  const int n_contracts = portfolio.size();
  const int d = model.d;
  const int n_steps = grid.steps;

  SolverArtifact artifact;
  artifact.scheme = SchemeKind::RDBDP;
  artifact.theta_y = 0.0;
  artifact.grid = grid;
  artifact.portfolio = portfolio;
  artifact.nets.resize(n_steps);
  artifact.final_loss_z.assign(n_steps, 0.0);
  artifact.final_loss_y.assign(n_steps, 0.0);
  artifact.seed = config.seed;
  artifact.config = config;

  StepNets current;
  for (int n = n_steps - 1; n >= 0; --n) {
    const bool last_step = n == n_steps - 1;
    const long long iters = last_step ? config.steps_last : config.steps_rest;
    if (last_step) {
      current.y = init_params(
          detail::make_spec(d, n_contracts, config),
          derive_stream(config.seed, {stream_tag::kInit, std::uint64_t(n),
                                      role_tag::kY}));
      current.z = init_params(
          detail::make_spec(d, n_contracts * d, config),
          derive_stream(config.seed, {stream_tag::kInit, std::uint64_t(n),
                                      role_tag::kZ}));
      const detail::OutputScaleTargets scales =
          detail::terminal_scale_targets(portfolio, grid, config);
      detail::scale_output_layer(current.y, scales.y_mean, scales.y_std);
      detail::scale_output_layer(current.z, scales.z_mean, scales.z_std);
    } else {
      current.y = transfer_init(artifact.nets[n + 1].y);
      current.z = transfer_init(artifact.nets[n + 1].z);
      current.y.bn_frozen = true;
      current.z.bn_frozen = true;
    }
    current.gamma = ParamSet{};
    const StepNets* next_nets = n + 1 < n_steps ? &artifact.nets[n + 1] : nullptr;

    AdamState adam_y = AdamState::like(current.y);
    AdamState adam_z = AdamState::like(current.z);
    double last_loss = 0;
    for (long long it = 0; it < iters; ++it) {
      const StepBatch batch = draw_step_batch(
          model, grid, n, config.batch_size,
          derive_stream(config.seed, {stream_tag::kTrainBatch,
                                      std::uint64_t(n), 0, std::uint64_t(it)}));
      const StepEval next = evaluate_step(portfolio, grid, n + 1, batch.x_np1,
                                          next_nets, /*want_gamma=*/false);
      ForwardCache cache_y, cache_z;
      const Matrix phi = forward(current.y, batch.x_n, true, &cache_y);
      const Matrix psi = forward(current.z, batch.x_n, true, &cache_z);
      const RdbdpLossResult rl =
          rdbdp_loss(portfolio, grid, batch, phi, psi, next);
      detail::check_finite_loss(rl.loss, "joint regression", n, it);
      last_loss = rl.loss;
      const double lr = lr_schedule(it, iters, config.lr0, config.lr1,
                                    config.lr2);
      const Gradients gy = backward(current.y, cache_y, rl.grad_phi);
      const Gradients gz = backward(current.z, cache_z, rl.grad_psi);
      adam_step(adam_y, current.y, gy, lr);
      adam_step(adam_z, current.z, gz, lr);
      update_running_stats(current.y, cache_y);
      update_running_stats(current.z, cache_z);
    }
    {
      const std::vector<Matrix> stat_batches =
          detail::stats_batches(model, grid, n, config);
      finalize_running_stats(current.y, stat_batches);
      finalize_running_stats(current.z, stat_batches);
    }
    artifact.final_loss_y[n] = last_loss;
    artifact.final_loss_z[n] = last_loss;
    artifact.nets[n] = current;
  }
  artifact.wall_time_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();
  return artifact;
}

}  // namespace bsdehedge
