#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "bsdehedge/common.hpp"
#include "bsdehedge/linalg.hpp"
#include "bsdehedge/rng.hpp"

namespace bsdehedge {

enum class ModelKind { BlackScholes, Heston };

struct HestonParams {
  double kappa = 0;
  double nu_bar = 0;
  double rho = 0;
  double eta = 0;
};

// Forward diffusion: either a correlated multi-asset Black-Scholes model
// (m = d tradeable assets) or a single-asset Heston model (m = 1, d = 2,
// state = (spot, variance)).  Units: rates and drifts per year, vols per
// square-root year.
struct ModelSpec {
  ModelKind kind = ModelKind::BlackScholes;
  int d = 1;  // state dimension
  int m = 1;  // number of tradeable assets
  Vector mu_bar;     // per-asset drift (size m)
  Vector sigma_bar;  // per-asset volatility (size m; BS only)
  Vector q;          // dividend yields (size m)
  double r = 0;      // risk-free rate
  Matrix corr;       // asset correlation (m×m; BS only)
  HestonParams heston;  // Heston only
  Vector x0;         // initial state (size d)
  Matrix chol;       // lower-triangular factor of corr (filled by validate)

  double singularity_tol = 1e-10;
};

inline void validate_model(ModelSpec& model, bool feller_strict = false) {
  if (model.x0.size() != model.d)
    throw ConfigError("model: x0 must have length d");
  if (model.kind == ModelKind::BlackScholes) {
    if (model.m != model.d)
      throw ConfigError("model: Black-Scholes requires m = d");
    if (model.mu_bar.size() != model.m || model.sigma_bar.size() != model.m ||
        model.q.size() != model.m)
      throw ConfigError("model: coefficient vectors must have length m");
    if (model.corr.rows() != model.m || model.corr.cols() != model.m)
      throw ConfigError("model: correlation must be m×m");
    for (int i = 0; i < model.m; ++i)
      if (std::abs(model.corr(i, i) - 1.0) > 1e-12)
        throw ConfigError("model: correlation diagonal must be 1");
    model.chol = cholesky_factor(model.corr);
  } else {
    if (model.m != 1 || model.d != 2)
      throw ConfigError("model: Heston requires m = 1, d = 2");
    if (model.mu_bar.size() != 1 || model.q.size() != 1)
      throw ConfigError("model: Heston mu_bar and q must have length 1");
    const auto& h = model.heston;
    if (!(h.kappa > 0) || !(h.nu_bar > 0) || !(h.eta > 0))
      throw ConfigError("model: Heston kappa, nu_bar, eta must be positive");
    if (std::abs(h.rho) >= 1)
      throw ConfigError("model: Heston |rho| must be < 1");
    if (feller_strict && 2.0 * h.kappa * h.nu_bar < h.eta * h.eta)
      throw ConfigError("model: Feller condition 2*kappa*nu_bar >= eta^2 "
                        "violated under strict flag");
    if (!(model.x0[1] >= 0))
      throw ConfigError("model: Heston initial variance must be >= 0");
    model.chol = Matrix::Identity(1, 1);
  }
}

// Uniform time grid t_n = n * horizon / steps.
struct TimeGrid {
  double horizon = 1.0;
  int steps = 1;

  double dt() const { return horizon / steps; }
  double t(int n) const { return horizon * n / steps; }
};

inline void validate_grid(const TimeGrid& grid) {
  if (!(grid.horizon > 0) || grid.steps < 1)
    throw ConfigError("grid: requires horizon > 0 and steps >= 1");
}

// ---------------------------------------------------------------------------
// Model coefficients and their analytic Jacobians.

inline Vector mu_at(const ModelSpec& model, double /*t*/, const RowVector& x) {
  if (model.kind == ModelKind::BlackScholes)
    return model.mu_bar.cwiseProduct(x.transpose());
  Vector out(2);
  out[0] = model.mu_bar[0] * x[0];
  out[1] = model.heston.kappa * (model.heston.nu_bar - x[1]);
  return out;
}

inline Matrix sigma_at(const ModelSpec& model, double /*t*/,
                       const RowVector& x) {
  if (model.kind == ModelKind::BlackScholes) {
    Matrix s = model.chol;
    for (int i = 0; i < model.d; ++i)
      s.row(i) *= model.sigma_bar[i] * x[i];
    return s;
  }
  const auto& h = model.heston;
  const double root_nu = std::sqrt(std::abs(x[1]));
  Matrix s(2, 2);
  s(0, 0) = h.rho * root_nu * x[0];
  s(0, 1) = std::sqrt(1.0 - h.rho * h.rho) * root_nu * x[0];
  s(1, 0) = 0.0;
  s(1, 1) = h.eta * root_nu;
  return s;
}

// Jacobian of the drift: (∇μ)_{il} = ∂μ_i/∂x_l.
inline Matrix mu_jacobian(const ModelSpec& model, double /*t*/,
                          const RowVector& /*x*/) {
  if (model.kind == ModelKind::BlackScholes)
    return Matrix(model.mu_bar.asDiagonal());
  Matrix j = Matrix::Zero(2, 2);
  j(0, 0) = model.mu_bar[0];
  j(1, 1) = -model.heston.kappa;
  return j;
}

// Jacobian of diffusion column k: (∇σ^k)_{il} = ∂σ_{ik}/∂x_l.
inline Matrix sigma_col_jacobian(const ModelSpec& model, double /*t*/,
                                 const RowVector& x, int k) {
  if (model.kind == ModelKind::BlackScholes) {
    Matrix j = Matrix::Zero(model.d, model.d);
    for (int i = 0; i < model.d; ++i)
      j(i, i) = model.sigma_bar[i] * model.chol(i, k);
    return j;
  }
  const auto& h = model.heston;
  const double root_nu = std::sqrt(std::abs(x[1]));
  Matrix j = Matrix::Zero(2, 2);
  if (k == 0) {
    j(0, 0) = h.rho * root_nu;
    j(0, 1) = h.rho * x[0] / (2.0 * root_nu);
  } else {
    const double c = std::sqrt(1.0 - h.rho * h.rho);
    j(0, 0) = c * root_nu;
    j(0, 1) = c * x[0] / (2.0 * root_nu);
    j(1, 1) = h.eta / (2.0 * root_nu);
  }
  return j;
}

// ---------------------------------------------------------------------------
// Simulated path ensemble on a uniform grid, with flat storage.

struct PathEnsemble {
  TimeGrid grid;
  int n_paths = 0;
  int d = 0;
  std::uint64_t seed = 0;
  std::vector<double> states;      // [path][step 0..N][component]
  std::vector<double> increments;  // [path][step 0..N-1][component]

  Eigen::Map<const RowVector> state(int path, int step) const {
    return Eigen::Map<const RowVector>(
        states.data() + (std::size_t(path) * (grid.steps + 1) + step) * d, d);
  }
  Eigen::Map<const RowVector> increment(int path, int step) const {
    return Eigen::Map<const RowVector>(
        increments.data() + (std::size_t(path) * grid.steps + step) * d, d);
  }
};

namespace stream_tag {
constexpr std::uint64_t kSimulation = 0x53494D00ULL;  // path simulation
constexpr std::uint64_t kTrainBatch = 0x54524E00ULL;  // SGD batch draws
constexpr std::uint64_t kInit = 0x494E4954ULL;        // network init
}  // namespace stream_tag

// One Euler step of the state.  `z` holds d independent standard normals.
inline void euler_step(const ModelSpec& model, double t, double dt,
                       const double* x, const double* z, double* x_next) {
  const double root_dt = std::sqrt(dt);
  if (model.kind == ModelKind::BlackScholes) {
    // dW = sqrt(dt) z; diffusion = diag(sigma_bar .* x) * chol * dW.
    const int d = model.d;
    for (int i = 0; i < d; ++i) {
      double corr_noise = 0.0;
      for (int k = 0; k <= i; ++k) corr_noise += model.chol(i, k) * z[k];
      x_next[i] = x[i] * (1.0 + model.mu_bar[i] * dt +
                          model.sigma_bar[i] * root_dt * corr_noise);
    }
    return;
  }
  // Heston with full-state absolute-value truncation: the diffusion is
  // evaluated at |nu| and the whole next state is reflected at zero.
  const auto& h = model.heston;
  const double s = x[0];
  const double nu_abs = std::abs(x[1]);
  const double root_nu = std::sqrt(nu_abs);
  const double dw1 = root_dt * z[0];
  const double dw2 = root_dt * z[1];
  const double c = std::sqrt(1.0 - h.rho * h.rho);
  const double s_next = s + model.mu_bar[0] * s * dt +
                        h.rho * root_nu * s * dw1 + c * root_nu * s * dw2;
  const double nu_next =
      x[1] + h.kappa * (h.nu_bar - x[1]) * dt + h.eta * root_nu * dw2;
  x_next[0] = std::abs(s_next);
  x_next[1] = std::abs(nu_next);
  (void)t;
}

inline PathEnsemble simulate_paths(const ModelSpec& model,
                                   const TimeGrid& grid, int n_paths,
                                   std::uint64_t seed) {
  validate_grid(grid);
  if (n_paths < 1) throw ConfigError("simulate_paths: n_paths must be >= 1");
  PathEnsemble out;
  out.grid = grid;
  out.n_paths = n_paths;
  out.d = model.d;
  out.seed = seed;
  const int n_steps = grid.steps;
  const int d = model.d;
  out.states.resize(std::size_t(n_paths) * (n_steps + 1) * d);
  out.increments.resize(std::size_t(n_paths) * n_steps * d);
  const NormalStream rng(derive_stream(seed, {stream_tag::kSimulation}));
  const double dt = grid.dt();
  const double root_dt = std::sqrt(dt);
  std::vector<double> z(d);
  for (int p = 0; p < n_paths; ++p) {
    double* path_states =
        out.states.data() + std::size_t(p) * (n_steps + 1) * d;
    double* path_incs = out.increments.data() + std::size_t(p) * n_steps * d;
    for (int i = 0; i < d; ++i) path_states[i] = model.x0[i];
    for (int n = 0; n < n_steps; ++n) {
      rng.fill_normals(std::uint64_t(p), std::uint32_t(n), z.data(), d);
      double* inc = path_incs + std::size_t(n) * d;
      for (int i = 0; i < d; ++i) inc[i] = root_dt * z[i];
      euler_step(model, grid.t(n), dt, path_states + std::size_t(n) * d,
                 z.data(), path_states + std::size_t(n + 1) * d);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// One-step Malliavin derivative blocks of the forward scheme.

struct MalliavinEnsemble {
  TimeGrid grid;
  int n_paths = 0;
  int d = 0;
  std::vector<double> d_now;   // [path][step][d*d]: D_n X_n = σ(t_n, X_n)
  std::vector<double> d_next;  // [path][step][d*d]: D_n X_{n+1}

  Eigen::Map<const Matrix> at_now(int path, int step) const {
    return Eigen::Map<const Matrix>(
        d_now.data() + (std::size_t(path) * grid.steps + step) * d * d, d, d);
  }
  Eigen::Map<const Matrix> at_next(int path, int step) const {
    return Eigen::Map<const Matrix>(
        d_next.data() + (std::size_t(path) * grid.steps + step) * d * d, d,
        d);
  }
};

// Advance a Malliavin block one step:
// D_nX_{n+1} = D + Δt ∇μ D + Σ_k ∇σ^k D ΔW^k.
inline Matrix malliavin_step(const ModelSpec& model, double t,
                             const RowVector& x, const Matrix& d_block,
                             const RowVector& dw, double dt) {
  if (model.kind == ModelKind::BlackScholes) {
    // Row i of every Jacobian term is a scalar multiple of row i of D:
    // factor 1 + μ̄_i Δt + σ̄_i (Σ ΔW)_i.
    Matrix out = d_block;
    for (int i = 0; i < model.d; ++i) {
      double corr_noise = 0.0;
      for (int k = 0; k <= i; ++k) corr_noise += model.chol(i, k) * dw[k];
      out.row(i) *= 1.0 + model.mu_bar[i] * dt +
                    model.sigma_bar[i] * corr_noise;
    }
    return out;
  }
  Matrix out = d_block + dt * (mu_jacobian(model, t, x) * d_block);
  for (int k = 0; k < model.d; ++k)
    out += sigma_col_jacobian(model, t, x, k) * d_block * dw[k];
  return out;
}

inline MalliavinEnsemble simulate_malliavin(const ModelSpec& model,
                                            const PathEnsemble& paths) {
  if (paths.d != model.d)
    throw ShapeMismatch("simulate_malliavin: ensemble dimension mismatch");
  MalliavinEnsemble out;
  out.grid = paths.grid;
  out.n_paths = paths.n_paths;
  out.d = paths.d;
  const int d = paths.d;
  const int n_steps = paths.grid.steps;
  out.d_now.resize(std::size_t(paths.n_paths) * n_steps * d * d);
  out.d_next.resize(out.d_now.size());
  const double dt = paths.grid.dt();
  for (int p = 0; p < paths.n_paths; ++p) {
    for (int n = 0; n < n_steps; ++n) {
      const RowVector x = paths.state(p, n);
      const Matrix d_now = sigma_at(model, paths.grid.t(n), x);
      const Matrix d_next =
          malliavin_step(model, paths.grid.t(n), x, d_now,
                         paths.increment(p, n), dt);
      const std::size_t base = (std::size_t(p) * n_steps + n) * d * d;
      Eigen::Map<Matrix>(out.d_now.data() + base, d, d) = d_now;
      Eigen::Map<Matrix>(out.d_next.data() + base, d, d) = d_next;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Right-multiplication by σ(t,x)⁻¹ without forming the inverse (except the
// closed-form 2×2 Heston case).  Rows of `v` are treated independently.

inline void check_bs_nondegenerate(const ModelSpec& model, const RowVector& x) {
  for (int i = 0; i < model.d; ++i)
    if (std::abs(model.sigma_bar[i] * x[i]) <= model.singularity_tol)
      throw SingularDiffusion("diffusion is singular: |sigma_bar_i x_i| <= "
                              "tolerance at component " + format_int(i));
}

inline Matrix apply_sigma_inverse(const ModelSpec& model, double /*t*/,
                                  const RowVector& x, const Matrix& v) {
  if (v.cols() != model.d)
    throw ShapeMismatch("apply_sigma_inverse: block must have d columns");
  if (model.kind == ModelKind::BlackScholes) {
    check_bs_nondegenerate(model, x);
    // v σ⁻¹ = (v Σ⁻¹) ./ (σ̄⊙x)ᵀ with Σ lower-triangular:
    // solve Σᵀ wᵀ = vᵀ column-wise, then scale columns.
    Matrix w = model.chol.transpose()
                   .triangularView<Eigen::Upper>()
                   .solve(v.transpose())
                   .transpose();
    for (int i = 0; i < model.d; ++i)
      w.col(i) /= model.sigma_bar[i] * x[i];
    return w;
  }
  const auto& h = model.heston;
  const double root_nu = std::sqrt(std::abs(x[1]));
  if (root_nu <= model.singularity_tol || std::abs(x[0]) <= model.singularity_tol)
    throw SingularDiffusion("diffusion is singular at state");
  const double a = h.rho * root_nu * x[0];
  const double b = std::sqrt(1.0 - h.rho * h.rho) * root_nu * x[0];
  const double c = h.eta * root_nu;
  if (std::abs(a) <= model.singularity_tol)
    throw SingularDiffusion("diffusion is singular: rho*sqrt(nu)*s ~ 0");
  // σ = [[a, b], [0, c]] (upper triangular) ⇒ σ⁻¹ = [[1/a, -b/(a c)], [0, 1/c]].
  Matrix out(v.rows(), 2);
  out.col(0) = v.col(0) / a;
  out.col(1) = v.col(1) / c - v.col(0) * (b / (a * c));
  return out;
}

// (σᵀ)⁻¹ M for a d×d block M, used to map γ-blocks to Hessians.
inline Matrix apply_sigma_transpose_inverse(const ModelSpec& model, double t,
                                            const RowVector& x,
                                            const Matrix& m) {
  if (m.rows() != model.d)
    throw ShapeMismatch("apply_sigma_transpose_inverse: block must have d rows");
  if (model.kind == ModelKind::BlackScholes) {
    check_bs_nondegenerate(model, x);
    // (σᵀ)⁻¹ = diag(1/(σ̄⊙x)) Σ⁻ᵀ: solve Σᵀ N = M, then scale rows.
    Matrix n = model.chol.transpose().triangularView<Eigen::Upper>().solve(m);
    for (int i = 0; i < model.d; ++i)
      n.row(i) /= model.sigma_bar[i] * x[i];
    return n;
  }
  // Heston: σᵀ lower triangular 2×2; apply closed-form inverse transpose.
  const Matrix s = sigma_at(model, t, x);
  const double a = s(0, 0), b = s(0, 1), c = s(1, 1);
  if (std::abs(a) <= model.singularity_tol ||
      std::abs(c) <= model.singularity_tol)
    throw SingularDiffusion("diffusion is singular at state");
  // (σᵀ)⁻¹ = (σ⁻¹)ᵀ = [[1/a, 0], [-b/(a c), 1/c]].
  Matrix out(2, m.cols());
  out.row(0) = m.row(0) / a;
  out.row(1) = m.row(1) / c - m.row(0) * (b / (a * c));
  return out;
}

// Contraction C_{kl} = Σ_i Delta_i ∂σ_{ik}/∂x_l (row k equals Delta·∇σ^k),
// the correction subtracted from γ before Hessian recovery.
inline Matrix delta_grad_sigma_contraction(const ModelSpec& model, double t,
                                           const RowVector& x,
                                           const RowVector& delta) {
  if (delta.size() != model.d)
    throw ShapeMismatch("delta_grad_sigma_contraction: delta must be 1×d");
  Matrix c(model.d, model.d);
  if (model.kind == ModelKind::BlackScholes) {
    for (int k = 0; k < model.d; ++k)
      for (int l = 0; l < model.d; ++l)
        c(k, l) = delta[l] * model.sigma_bar[l] * model.chol(l, k);
    return c;
  }
  for (int k = 0; k < model.d; ++k)
    c.row(k) = delta * sigma_col_jacobian(model, t, x, k);
  return c;
}

}  // namespace bsdehedge
