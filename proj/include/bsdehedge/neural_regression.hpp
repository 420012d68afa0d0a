#pragma once

#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <vector>

#include "bsdehedge/common.hpp"
#include "bsdehedge/linalg.hpp"
#include "bsdehedge/rng.hpp"

namespace bsdehedge {

// Fully-connected tanh network with an affine output layer and optional
// batch normalization after each hidden affine map.
struct MLPSpec {
  int input_dim = 1;
  int hidden_layers = 4;
  int hidden_width = 50;
  int output_dim = 1;
  bool batch_norm = true;

  bool operator==(const MLPSpec&) const = default;
};

struct BatchNormLayer {
  Vector scale;     // trainable unless the set is frozen
  Vector shift;     // trainable unless the set is frozen
  Vector run_mean;  // running statistics used in inference mode
  Vector run_var;
};

constexpr double kBatchNormEps = 1e-5;
// Features whose batch variance falls below this floor are treated as
// constants in the backward pass (see backward()).
constexpr double kBatchNormVarFloor = 1e-12;
constexpr double kBatchNormMomentum = 0.99;

// All parameters of one network.  Convention: activations are row-major
// batches (n×features) and affine maps are x·W + b with W (in×out).
struct ParamSet {
  MLPSpec spec;
  std::vector<Matrix> weights;
  std::vector<Vector> biases;
  std::vector<BatchNormLayer> bn;  // one per hidden layer when enabled
  // Once frozen, the normalization layers stop changing entirely: the
  // scale/shift pairs leave the optimization, the running statistics are
  // immutable, and training-mode forwards normalize with the running
  // statistics rather than the batch.
  bool bn_frozen = false;
};

inline void check_spec(const MLPSpec& spec) {
  if (spec.input_dim < 1 || spec.output_dim < 1 || spec.hidden_layers < 0 ||
      (spec.hidden_layers > 0 && spec.hidden_width < 1))
    throw ConfigError("mlp: all layer dimensions must be positive");
}

// Fan-based uniform initialization; batch-norm starts at identity with
// fresh (0, 1) running statistics.
inline ParamSet init_params(const MLPSpec& spec, std::uint64_t stream_id) {
  check_spec(spec);
  ParamSet p;
  p.spec = spec;
  const UniformStream rng(stream_id);
  const int n_affine = spec.hidden_layers + 1;
  p.weights.resize(n_affine);
  p.biases.resize(n_affine);
  std::uint64_t draw_index = 0;
  double spare = 0.0;
  bool have_spare = false;
  auto next_uniform = [&]() {
    if (have_spare) {
      have_spare = false;
      return spare;
    }
    const auto pair = rng.uniform_pair(draw_index++, 0, 0);
    spare = pair[1];
    have_spare = true;
    return pair[0];
  };
  for (int l = 0; l < n_affine; ++l) {
    const int fan_in = l == 0 ? spec.input_dim : spec.hidden_width;
    const int fan_out = l == n_affine - 1 ? spec.output_dim : spec.hidden_width;
    const double bound = std::sqrt(6.0 / double(fan_in + fan_out));
    p.weights[l].resize(fan_in, fan_out);
    for (int i = 0; i < fan_in; ++i)
      for (int j = 0; j < fan_out; ++j)
        p.weights[l](i, j) = bound * (2.0 * next_uniform() - 1.0);
    p.biases[l] = Vector::Zero(fan_out);
  }
  if (spec.batch_norm) {
    p.bn.resize(spec.hidden_layers);
    for (auto& layer : p.bn) {
      layer.scale = Vector::Ones(spec.hidden_width);
      layer.shift = Vector::Zero(spec.hidden_width);
      layer.run_mean = Vector::Zero(spec.hidden_width);
      layer.run_var = Vector::Ones(spec.hidden_width);
    }
  }
  return p;
}

// Activation record of one training-mode forward pass, consumed by backward.
struct ForwardCache {
  std::vector<Matrix> layer_input;  // input to affine l (n×fan_in)
  std::vector<Matrix> normalized;   // x̂ after batch normalization (hidden)
  std::vector<Matrix> activated;    // tanh output of hidden layer
  std::vector<Vector> batch_mean;   // statistics used for normalization
  std::vector<Vector> batch_var;    // biased variance + eps NOT included
  std::vector<Vector> bn_live;      // 1 where batch stats were used, else 0
};

// Forward pass.  In training mode hidden pre-activations are normalized
// with the statistics of the batch itself; in inference mode, or when the
// normalization layers are frozen, with the stored running statistics.  A
// frozen layer is a fixed affine map in every mode, which is what lets a
// warm start from the neighbouring time step keep its function values.
// Two further details of the live (unfrozen, training) path: features
// whose batch variance vanishes (every sample identical, as happens when
// the state is deterministic) also fall back to the running statistics,
// since batch statistics would collapse them to exactly zero; and the
// function never mutates the parameters — running statistics are advanced
// explicitly via update_running_stats / finalize_running_stats.
inline Matrix forward(const ParamSet& p, const Matrix& batch, bool training,
                      ForwardCache* cache = nullptr) {
  if (batch.cols() != p.spec.input_dim)
    throw ShapeMismatch("forward: batch width must equal input_dim");
  if (batch.rows() < 1) throw ShapeMismatch("forward: batch is empty");
  const int n_hidden = p.spec.hidden_layers;
  if (cache) {
    cache->layer_input.assign(n_hidden + 1, Matrix());
    cache->normalized.assign(n_hidden, Matrix());
    cache->activated.assign(n_hidden, Matrix());
    cache->batch_mean.assign(n_hidden, Vector());
    cache->batch_var.assign(n_hidden, Vector());
    cache->bn_live.assign(n_hidden, Vector());
  }
  Matrix h = batch;
  for (int l = 0; l < n_hidden; ++l) {
    if (cache) cache->layer_input[l] = h;
    Matrix a = (h * p.weights[l]).rowwise() + p.biases[l].transpose();
    if (p.spec.batch_norm) {
      const auto& layer = p.bn[l];
      Vector mean, var, live;
      if (training && !p.bn_frozen) {
        const Vector bmean = a.colwise().mean();
        const Vector bvar = (a.rowwise() - bmean.transpose())
                                .array()
                                .square()
                                .colwise()
                                .mean();
        live = (bvar.array() > kBatchNormVarFloor).cast<double>();
        mean = live.array() * bmean.array() +
               (1.0 - live.array()) * layer.run_mean.array();
        var = live.array() * bvar.array() +
              (1.0 - live.array()) * layer.run_var.array();
      } else {
        mean = layer.run_mean;
        var = layer.run_var;
        live = Vector::Zero(mean.size());
      }
      if (cache) {
        cache->batch_mean[l] = mean;
        cache->batch_var[l] = var;
        cache->bn_live[l] = live;
      }
      Matrix xhat = (a.rowwise() - mean.transpose()).array().rowwise() /
                    (var.array() + kBatchNormEps).sqrt().transpose();
      if (cache) cache->normalized[l] = xhat;
      a = (xhat.array().rowwise() * layer.scale.transpose().array())
              .rowwise() +
          layer.shift.transpose().array();
    }
    h = a.array().tanh();
    if (cache) cache->activated[l] = h;
  }
  if (cache) cache->layer_input[n_hidden] = h;
  return (h * p.weights[n_hidden]).rowwise() +
         p.biases[n_hidden].transpose();
}

// Advance running statistics from the batch statistics of a cached
// training-mode forward pass.
inline void update_running_stats(ParamSet& p, const ForwardCache& cache) {
  if (!p.spec.batch_norm || p.bn_frozen) return;
  for (int l = 0; l < p.spec.hidden_layers; ++l) {
    auto& layer = p.bn[l];
    layer.run_mean = kBatchNormMomentum * layer.run_mean +
                     (1.0 - kBatchNormMomentum) * cache.batch_mean[l];
    layer.run_var = kBatchNormMomentum * layer.run_var +
                    (1.0 - kBatchNormMomentum) * cache.batch_var[l];
  }
}

// Replace the running statistics with the population statistics of the
// supplied batches, measured with the weights frozen.  An exponential
// average taken while the weights move lags them; where the feature
// variance is small (for instance when every sample shares the same
// initial state) that lag is amplified by 1/sqrt(var + eps) and wrecks
// inference-mode outputs.  Measuring once after the optimization loop
// makes inference agree with the trained batch behaviour.
inline void finalize_running_stats(ParamSet& p,
                                   const std::vector<Matrix>& batches) {
  if (!p.spec.batch_norm || p.bn_frozen || batches.empty()) return;
  const int n_hidden = p.spec.hidden_layers;
  std::vector<Vector> mean_acc(n_hidden), var_acc(n_hidden);
  for (const Matrix& batch : batches) {
    ForwardCache cache;
    forward(p, batch, true, &cache);
    for (int l = 0; l < n_hidden; ++l) {
      if (mean_acc[l].size() == 0) {
        mean_acc[l] = cache.batch_mean[l];
        var_acc[l] = cache.batch_var[l];
      } else {
        mean_acc[l] += cache.batch_mean[l];
        var_acc[l] += cache.batch_var[l];
      }
    }
  }
  const double scale = 1.0 / double(batches.size());
  for (int l = 0; l < n_hidden; ++l) {
    p.bn[l].run_mean = scale * mean_acc[l];
    p.bn[l].run_var = scale * var_acc[l];
  }
}

struct Gradients {
  std::vector<Matrix> weights;
  std::vector<Vector> biases;
  std::vector<Vector> bn_scale;
  std::vector<Vector> bn_shift;
};

// Reverse-mode gradients for a training-mode forward pass.  `upstream` is
// dLoss/dOutput (n×output_dim); returns exact parameter gradients (batch
// normalization differentiated through the batch statistics).
inline Gradients backward(const ParamSet& p, const ForwardCache& cache,
                          const Matrix& upstream) {
  const int n_hidden = p.spec.hidden_layers;
  Gradients g;
  g.weights.resize(n_hidden + 1);
  g.biases.resize(n_hidden + 1);
  if (p.spec.batch_norm) {
    g.bn_scale.resize(n_hidden);
    g.bn_shift.resize(n_hidden);
  }
  // Output layer.
  g.weights[n_hidden] = cache.layer_input[n_hidden].transpose() * upstream;
  g.biases[n_hidden] = upstream.colwise().sum();
  Matrix grad_h = upstream * p.weights[n_hidden].transpose();
  for (int l = n_hidden - 1; l >= 0; --l) {
    // Through tanh.
    Matrix grad_a =
        grad_h.array() * (1.0 - cache.activated[l].array().square());
    if (p.spec.batch_norm) {
      const auto& layer = p.bn[l];
      const auto& xhat = cache.normalized[l];
      g.bn_scale[l] = (grad_a.array() * xhat.array()).colwise().sum();
      g.bn_shift[l] = grad_a.colwise().sum();
      // Through the normalization.  Features normalized with batch
      // statistics get the full derivative (statistics included);
      // features that fell back to the running statistics in the forward
      // pass were normalized by constants, so they backpropagate as a
      // fixed affine map.
      const double n = double(xhat.rows());
      Matrix grad_xhat =
          grad_a.array().rowwise() * layer.scale.transpose().array();
      const RowVector sum_gx = grad_xhat.colwise().sum();
      const RowVector sum_gx_xhat =
          (grad_xhat.array() * xhat.array()).colwise().sum();
      const RowVector inv_std =
          (cache.batch_var[l].array() + kBatchNormEps)
              .sqrt()
              .inverse()
              .transpose();
      const RowVector live = cache.bn_live[l].transpose();
      const Matrix grad_batch =
          ((grad_xhat * n).rowwise() - sum_gx -
           (xhat.array().rowwise() * sum_gx_xhat.array()).matrix())
              .array()
              .rowwise() *
          (inv_std.array() / n);
      const Matrix grad_fixed =
          grad_xhat.array().rowwise() * inv_std.array();
      grad_a = (grad_batch.array().rowwise() * live.array()) +
               (grad_fixed.array().rowwise() * (1.0 - live.array()));
    }
    g.weights[l] = cache.layer_input[l].transpose() * grad_a;
    g.biases[l] = grad_a.colwise().sum();
    if (l > 0) grad_h = grad_a * p.weights[l].transpose();
  }
  return g;
}

// ---------------------------------------------------------------------------
// Adam optimizer with bias correction.

struct AdamState {
  long long step = 0;
  std::vector<Matrix> m_w, v_w;
  std::vector<Vector> m_b, v_b, m_scale, v_scale, m_shift, v_shift;

  static AdamState like(const ParamSet& p) {
    AdamState s;
    for (const auto& w : p.weights) {
      s.m_w.push_back(Matrix::Zero(w.rows(), w.cols()));
      s.v_w.push_back(Matrix::Zero(w.rows(), w.cols()));
    }
    for (const auto& b : p.biases) {
      s.m_b.push_back(Vector::Zero(b.size()));
      s.v_b.push_back(Vector::Zero(b.size()));
    }
    for (const auto& layer : p.bn) {
      s.m_scale.push_back(Vector::Zero(layer.scale.size()));
      s.v_scale.push_back(Vector::Zero(layer.scale.size()));
      s.m_shift.push_back(Vector::Zero(layer.shift.size()));
      s.v_shift.push_back(Vector::Zero(layer.shift.size()));
    }
    return s;
  }
};

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

namespace detail {
template <typename T>
void adam_update(T& param, T& m, T& v, const T& grad, double lr,
                 double bc1, double bc2) {
  m = kAdamBeta1 * m + (1.0 - kAdamBeta1) * grad;
  v = kAdamBeta2 * v + (1.0 - kAdamBeta2) * grad.cwiseProduct(grad);
  param.array() -=
      lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + kAdamEps);
}
}  // namespace detail

inline void adam_step(AdamState& state, ParamSet& p, const Gradients& g,
                      double lr) {
  state.step += 1;
  const double bc1 = 1.0 - std::pow(kAdamBeta1, double(state.step));
  const double bc2 = 1.0 - std::pow(kAdamBeta2, double(state.step));
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    detail::adam_update(p.weights[l], state.m_w[l], state.v_w[l],
                        g.weights[l], lr, bc1, bc2);
    detail::adam_update(p.biases[l], state.m_b[l], state.v_b[l], g.biases[l],
                        lr, bc1, bc2);
  }
  if (!p.bn_frozen) {
    for (std::size_t l = 0; l < p.bn.size(); ++l) {
      detail::adam_update(p.bn[l].scale, state.m_scale[l], state.v_scale[l],
                          g.bn_scale[l], lr, bc1, bc2);
      detail::adam_update(p.bn[l].shift, state.m_shift[l], state.v_shift[l],
                          g.bn_shift[l], lr, bc1, bc2);
    }
  }
}

// Piecewise-constant learning-rate schedule over a fixed step budget.
inline double lr_schedule(long long step, long long total,
                          double lr0 = 1e-3, double lr1 = 1e-4,
                          double lr2 = 1e-5) {
  if (3 * step < total) return lr0;
  if (3 * step < 2 * total) return lr1;
  return lr2;
}

// Warm start for the previous time step: deep copy of the parameters.
// The running statistics travel with the weights on purpose — once the
// normalization layers are frozen they keep normalizing with exactly
// these constants, so the copied network computes the same function it
// did at the step it came from.
inline ParamSet transfer_init(const ParamSet& source) { return source; }

// ---------------------------------------------------------------------------
// Serialization: little-endian doubles with a small header.

namespace detail {
inline void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
inline void write_vec(std::ostream& os, const Vector& v) {
  write_u64(os, std::uint64_t(v.size()));
  os.write(reinterpret_cast<const char*>(v.data()),
           std::streamsize(sizeof(double)) * v.size());
}
inline Vector read_vec(std::istream& is) {
  Vector v(Eigen::Index(read_u64(is)));
  is.read(reinterpret_cast<char*>(v.data()),
          std::streamsize(sizeof(double)) * v.size());
  return v;
}
inline void write_mat(std::ostream& os, const Matrix& m) {
  write_u64(os, std::uint64_t(m.rows()));
  write_u64(os, std::uint64_t(m.cols()));
  os.write(reinterpret_cast<const char*>(m.data()),
           std::streamsize(sizeof(double)) * m.size());
}
inline Matrix read_mat(std::istream& is) {
  const auto rows = Eigen::Index(read_u64(is));
  const auto cols = Eigen::Index(read_u64(is));
  Matrix m(rows, cols);
  is.read(reinterpret_cast<char*>(m.data()),
          std::streamsize(sizeof(double)) * m.size());
  return m;
}
}  // namespace detail

constexpr std::uint64_t kParamSetMagic = 0x42484E455431ULL;  // "BHNET1"

inline void save_params(std::ostream& os, const ParamSet& p,
                        std::uint64_t role_tag, std::uint64_t step_index) {
  detail::write_u64(os, kParamSetMagic);
  detail::write_u64(os, role_tag);
  detail::write_u64(os, step_index);
  detail::write_u64(os, std::uint64_t(p.spec.input_dim));
  detail::write_u64(os, std::uint64_t(p.spec.hidden_layers));
  detail::write_u64(os, std::uint64_t(p.spec.hidden_width));
  detail::write_u64(os, std::uint64_t(p.spec.output_dim));
  detail::write_u64(os, p.spec.batch_norm ? 1 : 0);
  detail::write_u64(os, p.bn_frozen ? 1 : 0);
  for (const auto& w : p.weights) detail::write_mat(os, w);
  for (const auto& b : p.biases) detail::write_vec(os, b);
  for (const auto& layer : p.bn) {
    detail::write_vec(os, layer.scale);
    detail::write_vec(os, layer.shift);
    detail::write_vec(os, layer.run_mean);
    detail::write_vec(os, layer.run_var);
  }
}

inline ParamSet load_params(std::istream& is, std::uint64_t* role_tag = nullptr,
                            std::uint64_t* step_index = nullptr) {
  if (detail::read_u64(is) != kParamSetMagic)
    throw ConfigError("load_params: not a network parameter file");
  const std::uint64_t role = detail::read_u64(is);
  const std::uint64_t step = detail::read_u64(is);
  if (role_tag) *role_tag = role;
  if (step_index) *step_index = step;
  ParamSet p;
  p.spec.input_dim = int(detail::read_u64(is));
  p.spec.hidden_layers = int(detail::read_u64(is));
  p.spec.hidden_width = int(detail::read_u64(is));
  p.spec.output_dim = int(detail::read_u64(is));
  p.spec.batch_norm = detail::read_u64(is) != 0;
  p.bn_frozen = detail::read_u64(is) != 0;
  const int n_affine = p.spec.hidden_layers + 1;
  p.weights.resize(n_affine);
  p.biases.resize(n_affine);
  for (auto& w : p.weights) w = detail::read_mat(is);
  for (auto& b : p.biases) b = detail::read_vec(is);
  if (p.spec.batch_norm) {
    p.bn.resize(p.spec.hidden_layers);
    for (auto& layer : p.bn) {
      layer.scale = detail::read_vec(is);
      layer.shift = detail::read_vec(is);
      layer.run_mean = detail::read_vec(is);
      layer.run_var = detail::read_vec(is);
    }
  }
  if (!is) throw ConfigError("load_params: truncated parameter file");
  return p;
}

}  // namespace bsdehedge
