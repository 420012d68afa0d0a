#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <vector>

#include "bsdehedge/common.hpp"

namespace bsdehedge {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

// Lower-triangular Cholesky factor L with A = L Lᵀ.  A must be symmetric;
// a pivot at or below `pivot_tol` raises NotPositiveDefinite.
inline Matrix cholesky_factor(const Matrix& a, double pivot_tol = 1e-12) {
  if (a.rows() != a.cols())
    throw ShapeMismatch("cholesky_factor: matrix must be square");
  const Eigen::Index n = a.rows();
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < i; ++j)
      if (std::abs(a(i, j) - a(j, i)) > 1e-12 * (1.0 + std::abs(a(i, j))))
        throw ShapeMismatch("cholesky_factor: matrix must be symmetric");
  Matrix l = Matrix::Zero(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    double diag = a(j, j);
    for (Eigen::Index k = 0; k < j; ++k) diag -= l(j, k) * l(j, k);
    if (!(diag > pivot_tol))
      throw NotPositiveDefinite("cholesky_factor: pivot " +
                                format_double(diag) + " at index " +
                                format_int(j));
    l(j, j) = std::sqrt(diag);
    for (Eigen::Index i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (Eigen::Index k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / l(j, j);
    }
  }
  return l;
}

// ---------------------------------------------------------------------------
// Sparse matrix in coordinate form.  Duplicate entries accumulate.
struct SparseMatrixCOO {
  int rows = 0;
  int cols = 0;
  std::vector<int> row_index;
  std::vector<int> col_index;
  std::vector<double> value;

  void add(int i, int j, double v) {
    if (i < 0 || i >= rows || j < 0 || j >= cols)
      throw ShapeMismatch("SparseMatrixCOO::add: index out of range");
    row_index.push_back(i);
    col_index.push_back(j);
    value.push_back(v);
  }

  std::size_t nnz() const { return value.size(); }

  // y = A x
  Vector multiply(const Vector& x) const {
    if (x.size() != cols)
      throw ShapeMismatch("SparseMatrixCOO::multiply: size mismatch");
    Vector y = Vector::Zero(rows);
    for (std::size_t k = 0; k < value.size(); ++k)
      y[row_index[k]] += value[k] * x[col_index[k]];
    return y;
  }

  // y = Aᵀ x
  Vector multiply_transpose(const Vector& x) const {
    if (x.size() != rows)
      throw ShapeMismatch("SparseMatrixCOO::multiply_transpose: size mismatch");
    Vector y = Vector::Zero(cols);
    for (std::size_t k = 0; k < value.size(); ++k)
      y[col_index[k]] += value[k] * x[row_index[k]];
    return y;
  }

  Matrix to_dense() const {
    Matrix m = Matrix::Zero(rows, cols);
    for (std::size_t k = 0; k < value.size(); ++k)
      m(row_index[k], col_index[k]) += value[k];
    return m;
  }
};

// ---------------------------------------------------------------------------
// Iterative least-squares solver on the Golub-Kahan bidiagonalization
// (the classic LSQR recurrence).  Started from x = 0 it converges to the
// minimum-norm least-squares solution, which makes it equally usable for
// over-determined, under-determined and rank-deficient systems.
struct LsqrResult {
  Vector x;
  int iterations = 0;
  int stop_reason = 0;      // 1..3 converged, 7 iteration cap
  bool converged = false;   // false => NoConvergence diagnostic
  double residual_norm = 0; // ‖b − Ax‖
  double normal_residual_norm = 0;  // ‖Aᵀ(b − Ax)‖
};

inline LsqrResult lsqr(const SparseMatrixCOO& a, const Vector& b,
                       double atol = 1e-10, double btol = 1e-10,
                       int max_iter = -1, double conlim = 1e12) {
  if (b.size() != a.rows)
    throw ShapeMismatch("lsqr: right-hand side has wrong length");
  const int n = a.cols;
  if (max_iter < 0) max_iter = 4 * std::max(n, 1);

  LsqrResult out;
  out.x = Vector::Zero(n);

  const double eps = std::numeric_limits<double>::epsilon();
  const double ctol = conlim > 0 ? 1.0 / conlim : 0.0;

  Vector u = b;
  const double bnorm = u.norm();
  double beta = bnorm;
  Vector v = Vector::Zero(n);
  double alpha = 0.0;
  if (beta > 0) {
    u /= beta;
    v = a.multiply_transpose(u);
    alpha = v.norm();
    if (alpha > 0) v /= alpha;
  }
  double arnorm = alpha * beta;
  if (arnorm == 0.0) {  // b = 0: minimum-norm solution is x = 0.
    out.converged = true;
    out.stop_reason = 1;
    return out;
  }

  Vector w = v;
  double rhobar = alpha;
  double phibar = beta;
  double rnorm = beta;
  double anorm = 0.0, acond = 0.0, ddnorm = 0.0;
  double xnorm = 0.0, xxnorm = 0.0, z = 0.0;
  double cs2 = -1.0, sn2 = 0.0;
  int istop = 0;
  int itn = 0;

  while (itn < max_iter) {
    ++itn;
    u = a.multiply(v) - alpha * u;
    beta = u.norm();
    if (beta > 0) {
      u /= beta;
      anorm = std::sqrt(anorm * anorm + alpha * alpha + beta * beta);
      v = a.multiply_transpose(u) - beta * v;
      alpha = v.norm();
      if (alpha > 0) v /= alpha;
    }

    const double rho = std::sqrt(rhobar * rhobar + beta * beta);
    const double cs = rhobar / rho;
    const double sn = beta / rho;
    const double theta = sn * alpha;
    rhobar = -cs * alpha;
    const double phi = cs * phibar;
    phibar = sn * phibar;
    const double tau = sn * phi;

    const double t1 = phi / rho;
    const double t2 = -theta / rho;
    ddnorm += (w / rho).squaredNorm();
    out.x += t1 * w;
    w = v + t2 * w;

    // Running estimate of ‖x‖ via a second plane rotation.
    const double delta = sn2 * rho;
    const double gambar = -cs2 * rho;
    const double rhs = phi - delta * z;
    const double zbar = rhs / gambar;
    xnorm = std::sqrt(xxnorm + zbar * zbar);
    const double gamma = std::sqrt(gambar * gambar + theta * theta);
    cs2 = gambar / gamma;
    sn2 = theta / gamma;
    z = rhs / gamma;
    xxnorm += z * z;

    acond = anorm * std::sqrt(ddnorm);
    rnorm = phibar;
    arnorm = alpha * std::abs(tau);

    const double test1 = rnorm / bnorm;
    const double test2 = arnorm / (anorm * rnorm + eps);
    const double test3 = 1.0 / (acond + eps);
    const double t1r = test1 / (1.0 + anorm * xnorm / bnorm);
    const double rtol = btol + atol * anorm * xnorm / bnorm;

    if (itn >= max_iter) istop = 7;
    if (1.0 + test3 <= 1.0) istop = 6;
    if (1.0 + test2 <= 1.0) istop = 5;
    if (1.0 + t1r <= 1.0) istop = 4;
    if (test3 <= ctol) istop = 3;
    if (test2 <= atol) istop = 2;
    if (test1 <= rtol) istop = 1;
    if (istop != 0) break;
  }

  out.iterations = itn;
  out.stop_reason = istop == 0 ? 7 : istop;
  out.converged = out.stop_reason >= 1 && out.stop_reason <= 6;
  out.residual_norm = rnorm;
  out.normal_residual_norm = arnorm;
  return out;
}

}  // namespace bsdehedge
