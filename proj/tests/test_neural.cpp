#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>
#include <vector>

#include "bsdehedge/neural_regression.hpp"

namespace bsdehedge {
namespace {

Matrix random_batch(std::mt19937& gen, int rows, int cols, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Matrix x(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) x(i, j) = normal(gen);
  return x;
}

// Scalar objective sum(output .* probe) whose output-gradient is `probe`,
// so analytic parameter gradients come from one backward() call.
double probe_loss(const ParamSet& p, const Matrix& batch, const Matrix& probe) {
  return (forward(p, batch, true).array() * probe.array()).sum();
}

// Central finite differences on every entry of every parameter against the
// reverse-mode gradients.  `tol` is a relative tolerance with an absolute
// floor of 1 in the denominator.
void check_gradients(ParamSet p, const Matrix& batch, double tol) {
  std::mt19937 gen(901);
  Matrix probe = random_batch(gen, int(batch.rows()), p.spec.output_dim);

  ForwardCache cache;
  forward(p, batch, true, &cache);
  const Gradients g = backward(p, cache, probe);

  const double h = 1e-6;
  long long n_checked = 0;
  auto check_entry = [&](double& slot, double analytic, const char* what) {
    const double saved = slot;
    slot = saved + h;
    const double up = probe_loss(p, batch, probe);
    slot = saved - h;
    const double down = probe_loss(p, batch, probe);
    slot = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double denom = std::max(std::abs(analytic) + std::abs(numeric), 1.0);
    EXPECT_LT(std::abs(analytic - numeric) / denom, tol)
        << what << ": analytic " << analytic << " numeric " << numeric;
    ++n_checked;
  };

  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    for (int i = 0; i < p.weights[l].rows(); ++i)
      for (int j = 0; j < p.weights[l].cols(); ++j)
        check_entry(p.weights[l](i, j), g.weights[l](i, j), "weight");
    for (int j = 0; j < p.biases[l].size(); ++j)
      check_entry(p.biases[l](j), g.biases[l](j), "bias");
  }
  if (p.spec.batch_norm && !p.bn_frozen) {
    for (std::size_t l = 0; l < p.bn.size(); ++l) {
      for (int j = 0; j < p.bn[l].scale.size(); ++j)
        check_entry(p.bn[l].scale(j), g.bn_scale[l](j), "bn scale");
      for (int j = 0; j < p.bn[l].shift.size(); ++j)
        check_entry(p.bn[l].shift(j), g.bn_shift[l](j), "bn shift");
    }
  }
  EXPECT_GT(n_checked, 0);
}

TEST(NeuralInit, ShapesAndDeterminism) {
  MLPSpec spec;
  spec.input_dim = 3;
  spec.hidden_layers = 2;
  spec.hidden_width = 5;
  spec.output_dim = 4;
  spec.batch_norm = true;
  const ParamSet p = init_params(spec, 11);
  ASSERT_EQ(p.weights.size(), 3u);
  EXPECT_EQ(p.weights[0].rows(), 3);
  EXPECT_EQ(p.weights[0].cols(), 5);
  EXPECT_EQ(p.weights[1].rows(), 5);
  EXPECT_EQ(p.weights[1].cols(), 5);
  EXPECT_EQ(p.weights[2].rows(), 5);
  EXPECT_EQ(p.weights[2].cols(), 4);
  ASSERT_EQ(p.biases.size(), 3u);
  for (const auto& b : p.biases) EXPECT_EQ(b.norm(), 0.0);
  ASSERT_EQ(p.bn.size(), 2u);
  for (const auto& layer : p.bn) {
    EXPECT_EQ(layer.scale, Vector::Ones(5));
    EXPECT_EQ(layer.shift, Vector::Zero(5));
    EXPECT_EQ(layer.run_mean, Vector::Zero(5));
    EXPECT_EQ(layer.run_var, Vector::Ones(5));
  }
  EXPECT_FALSE(p.bn_frozen);

  const ParamSet p2 = init_params(spec, 11);
  const ParamSet p3 = init_params(spec, 12);
  EXPECT_EQ(p.weights[0], p2.weights[0]);
  EXPECT_EQ(p.weights[2], p2.weights[2]);
  EXPECT_NE(p.weights[0], p3.weights[0]);

  // Fan-based bound on the first layer: sqrt(6 / (3 + 5)).
  const double bound = std::sqrt(6.0 / 8.0);
  EXPECT_LE(p.weights[0].cwiseAbs().maxCoeff(), bound);
  EXPECT_GT(p.weights[0].cwiseAbs().maxCoeff(), 0.0);

  MLPSpec bad = spec;
  bad.input_dim = 0;
  EXPECT_THROW(init_params(bad, 1), ConfigError);
  bad = spec;
  bad.output_dim = -1;
  EXPECT_THROW(init_params(bad, 1), ConfigError);
  bad = spec;
  bad.hidden_layers = 2;
  bad.hidden_width = 0;
  EXPECT_THROW(init_params(bad, 1), ConfigError);
}

TEST(NeuralForward, RejectsBadBatchShapes) {
  MLPSpec spec;
  spec.input_dim = 3;
  spec.hidden_layers = 1;
  spec.hidden_width = 4;
  spec.output_dim = 2;
  const ParamSet p = init_params(spec, 3);
  EXPECT_THROW(forward(p, Matrix::Zero(5, 2), false), ShapeMismatch);
  EXPECT_THROW(forward(p, Matrix(0, 3), false), ShapeMismatch);
  EXPECT_EQ(forward(p, Matrix::Zero(5, 3), false).rows(), 5);
  EXPECT_EQ(forward(p, Matrix::Zero(5, 3), false).cols(), 2);
}

TEST(NeuralForward, AffineOnlyNetworkIsExact) {
  MLPSpec spec;
  spec.input_dim = 2;
  spec.hidden_layers = 0;
  spec.hidden_width = 0;
  spec.output_dim = 2;
  spec.batch_norm = false;
  ParamSet p = init_params(spec, 1);
  p.weights[0] << 1.0, 3.0, 2.0, 4.0;
  p.biases[0] << 0.5, -0.25;
  Matrix x(1, 2);
  x << 10.0, 100.0;
  const Matrix out = forward(p, x, false);
  EXPECT_DOUBLE_EQ(out(0, 0), 10.0 * 1.0 + 100.0 * 2.0 + 0.5);
  EXPECT_DOUBLE_EQ(out(0, 1), 10.0 * 3.0 + 100.0 * 4.0 - 0.25);
}

TEST(NeuralBackward, MatchesFiniteDifferencesWithoutBatchNorm) {
  MLPSpec spec;
  spec.input_dim = 3;
  spec.hidden_layers = 2;
  spec.hidden_width = 6;
  spec.output_dim = 2;
  spec.batch_norm = false;
  std::mt19937 gen(17);
  check_gradients(init_params(spec, 5), random_batch(gen, 7, 3), 1e-6);
}

TEST(NeuralBackward, MatchesFiniteDifferencesWithLiveBatchNorm) {
  MLPSpec spec;
  spec.input_dim = 3;
  spec.hidden_layers = 2;
  spec.hidden_width = 6;
  spec.output_dim = 2;
  spec.batch_norm = true;
  std::mt19937 gen(19);
  // Healthy batch variance keeps every feature on the live branch under
  // the +/- h probes, so the mask cannot flip mid-difference.
  check_gradients(init_params(spec, 5), random_batch(gen, 9, 3), 1e-5);
}

TEST(NeuralBackward, MatchesFiniteDifferencesWithFrozenBatchNorm) {
  MLPSpec spec;
  spec.input_dim = 2;
  spec.hidden_layers = 2;
  spec.hidden_width = 5;
  spec.output_dim = 3;
  spec.batch_norm = true;
  ParamSet p = init_params(spec, 8);
  std::mt19937 gen(23);
  // Non-trivial running statistics so the frozen affine map is not identity.
  for (auto& layer : p.bn) {
    layer.run_mean = 0.1 * Vector::Random(spec.hidden_width);
    layer.run_var =
        (Vector::Random(spec.hidden_width).array() * 0.2 + 1.0).matrix();
    layer.scale = (Vector::Random(spec.hidden_width).array() * 0.3 + 1.0)
                      .matrix();
    layer.shift = 0.2 * Vector::Random(spec.hidden_width);
  }
  p.bn_frozen = true;
  check_gradients(p, random_batch(gen, 6, 2), 1e-6);
}

TEST(NeuralBackward, MatchesFiniteDifferencesForAffineOnlyNetwork) {
  MLPSpec spec;
  spec.input_dim = 4;
  spec.hidden_layers = 0;
  spec.hidden_width = 0;
  spec.output_dim = 3;
  spec.batch_norm = false;
  std::mt19937 gen(29);
  check_gradients(init_params(spec, 2), random_batch(gen, 5, 4), 1e-7);
}

TEST(NeuralBatchNorm, ConstantBatchFallsBackToRunningStats) {
  MLPSpec spec;
  spec.input_dim = 2;
  spec.hidden_layers = 2;
  spec.hidden_width = 4;
  spec.output_dim = 1;
  spec.batch_norm = true;
  ParamSet p = init_params(spec, 6);
  for (auto& layer : p.bn) {
    layer.run_mean = 0.05 * Vector::Ones(4);
    layer.run_var = 1.5 * Vector::Ones(4);
  }
  // Every row identical: batch variance is exactly zero everywhere, so a
  // live training forward must normalize with the running statistics and
  // agree with inference mode bit for bit.
  Matrix x = Matrix::Ones(16, 2);
  x.col(1).array() = -0.3;
  ForwardCache cache;
  const Matrix train_out = forward(p, x, true, &cache);
  const Matrix infer_out = forward(p, x, false);
  EXPECT_EQ(train_out, infer_out);
  for (int l = 0; l < spec.hidden_layers; ++l) {
    EXPECT_EQ(cache.bn_live[l].norm(), 0.0);
    EXPECT_EQ(cache.batch_mean[l], p.bn[l].run_mean);
    EXPECT_EQ(cache.batch_var[l], p.bn[l].run_var);
  }
  // Gradients stay finite and match finite differences: the fallback branch
  // is a fixed affine map, and identical rows keep it engaged under the
  // +/- h probes.
  check_gradients(p, x, 1e-6);
}

TEST(NeuralBatchNorm, FrozenTrainingForwardEqualsInference) {
  MLPSpec spec;
  spec.input_dim = 3;
  spec.hidden_layers = 3;
  spec.hidden_width = 8;
  spec.output_dim = 2;
  spec.batch_norm = true;
  ParamSet p = init_params(spec, 4);
  std::mt19937 gen(31);
  const Matrix x = random_batch(gen, 12, 3);
  // Live: training and inference disagree (batch statistics differ from
  // the fresh running statistics).
  EXPECT_NE(forward(p, x, true), forward(p, x, false));
  p.bn_frozen = true;
  EXPECT_EQ(forward(p, x, true), forward(p, x, false));
}

TEST(NeuralBatchNorm, FrozenLayersAreExcludedFromOptimization) {
  MLPSpec spec;
  spec.input_dim = 2;
  spec.hidden_layers = 2;
  spec.hidden_width = 4;
  spec.output_dim = 1;
  spec.batch_norm = true;
  ParamSet p = init_params(spec, 9);
  p.bn_frozen = true;
  const ParamSet before = p;
  std::mt19937 gen(37);
  const Matrix x = random_batch(gen, 8, 2);
  ForwardCache cache;
  forward(p, x, true, &cache);
  const Gradients g = backward(p, cache, Matrix::Ones(8, 1));
  AdamState state = AdamState::like(p);
  adam_step(state, p, g, 1e-3);
  for (int l = 0; l < spec.hidden_layers; ++l) {
    EXPECT_EQ(p.bn[l].scale, before.bn[l].scale);
    EXPECT_EQ(p.bn[l].shift, before.bn[l].shift);
    EXPECT_EQ(p.bn[l].run_mean, before.bn[l].run_mean);
    EXPECT_EQ(p.bn[l].run_var, before.bn[l].run_var);
  }
  EXPECT_NE(p.weights[0], before.weights[0]);

  // update_running_stats is likewise a no-op on a frozen set.
  ParamSet q = before;
  update_running_stats(q, cache);
  EXPECT_EQ(q.bn[0].run_mean, before.bn[0].run_mean);
  EXPECT_EQ(q.bn[0].run_var, before.bn[0].run_var);
}

TEST(NeuralBatchNorm, RunningStatsFollowExponentialAverage) {
  MLPSpec spec;
  spec.input_dim = 2;
  spec.hidden_layers = 1;
  spec.hidden_width = 3;
  spec.output_dim = 1;
  spec.batch_norm = true;
  ParamSet p = init_params(spec, 13);
  std::mt19937 gen(41);
  const Matrix x = random_batch(gen, 32, 2);
  ForwardCache cache;
  forward(p, x, true, &cache);
  const Vector mean0 = p.bn[0].run_mean;
  const Vector var0 = p.bn[0].run_var;
  update_running_stats(p, cache);
  const Vector expect_mean =
      kBatchNormMomentum * mean0 + (1.0 - kBatchNormMomentum) * cache.batch_mean[0];
  const Vector expect_var =
      kBatchNormMomentum * var0 + (1.0 - kBatchNormMomentum) * cache.batch_var[0];
  EXPECT_LT((p.bn[0].run_mean - expect_mean).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LT((p.bn[0].run_var - expect_var).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(NeuralBatchNorm, FinalizeReplacesStatsWithPopulationAverage) {
  MLPSpec spec;
  spec.input_dim = 2;
  spec.hidden_layers = 2;
  spec.hidden_width = 4;
  spec.output_dim = 1;
  spec.batch_norm = true;
  ParamSet p = init_params(spec, 21);
  std::mt19937 gen(43);
  const Matrix b1 = random_batch(gen, 10, 2);
  const Matrix b2 = random_batch(gen, 10, 2, 2.0);

  // Batch statistics of the pre-activations do not depend on the stored
  // running statistics, so capture them first.
  ForwardCache c1, c2;
  forward(p, b1, true, &c1);
  forward(p, b2, true, &c2);

  ParamSet single = p;
  finalize_running_stats(single, {b1});
  for (int l = 0; l < spec.hidden_layers; ++l) {
    EXPECT_EQ(single.bn[l].run_mean, c1.batch_mean[l]);
    EXPECT_EQ(single.bn[l].run_var, c1.batch_var[l]);
  }

  ParamSet both = p;
  finalize_running_stats(both, {b1, b2});
  for (int l = 0; l < spec.hidden_layers; ++l) {
    const Vector em = 0.5 * (c1.batch_mean[l] + c2.batch_mean[l]);
    const Vector ev = 0.5 * (c1.batch_var[l] + c2.batch_var[l]);
    EXPECT_LT((both.bn[l].run_mean - em).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_LT((both.bn[l].run_var - ev).cwiseAbs().maxCoeff(), 1e-15);
  }

  // After finalizing on one batch, inference on that batch reproduces the
  // training-mode outputs (the whole point of the final measurement).
  const Matrix train_out = forward(single, b1, true);
  const Matrix infer_out = forward(single, b1, false);
  EXPECT_LT((train_out - infer_out).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(NeuralAdam, FirstStepMovesBySignedLearningRate) {
  MLPSpec spec;
  spec.input_dim = 1;
  spec.hidden_layers = 0;
  spec.hidden_width = 0;
  spec.output_dim = 1;
  spec.batch_norm = false;
  ParamSet p = init_params(spec, 1);
  const double w0 = p.weights[0](0, 0);
  Gradients g;
  g.weights = {Matrix::Constant(1, 1, 2.5)};
  g.biases = {Vector::Constant(1, -0.75)};
  AdamState state = AdamState::like(p);
  const double lr = 1e-3;
  adam_step(state, p, g, lr);
  EXPECT_EQ(state.step, 1);
  // Bias-corrected first step: m/bc1 = g, v/bc2 = g^2, so the update is
  // -lr * g / (|g| + eps) = -lr * sign(g) up to the epsilon.
  EXPECT_NEAR(p.weights[0](0, 0) - w0, -lr, 1e-8);
  EXPECT_NEAR(p.biases[0](0) - 0.0, lr, 1e-8);
  // A second identical step keeps the same direction and magnitude scale.
  const double w1 = p.weights[0](0, 0);
  adam_step(state, p, g, lr);
  EXPECT_EQ(state.step, 2);
  EXPECT_LT(p.weights[0](0, 0), w1);
  EXPECT_NEAR(p.weights[0](0, 0) - w1, -lr, 1e-4);
}

TEST(NeuralAdam, ScheduleDropsAtThirds) {
  EXPECT_DOUBLE_EQ(lr_schedule(0, 300), 1e-3);
  EXPECT_DOUBLE_EQ(lr_schedule(99, 300), 1e-3);
  EXPECT_DOUBLE_EQ(lr_schedule(100, 300), 1e-4);
  EXPECT_DOUBLE_EQ(lr_schedule(199, 300), 1e-4);
  EXPECT_DOUBLE_EQ(lr_schedule(200, 300), 1e-5);
  EXPECT_DOUBLE_EQ(lr_schedule(299, 300), 1e-5);
  EXPECT_DOUBLE_EQ(lr_schedule(50, 300, 0.5, 0.25, 0.125), 0.5);
  EXPECT_DOUBLE_EQ(lr_schedule(150, 300, 0.5, 0.25, 0.125), 0.25);
  EXPECT_DOUBLE_EQ(lr_schedule(250, 300, 0.5, 0.25, 0.125), 0.125);
}

TEST(NeuralTransfer, WarmStartPreservesFunction) {
  MLPSpec spec;
  spec.input_dim = 2;
  spec.hidden_layers = 2;
  spec.hidden_width = 6;
  spec.output_dim = 2;
  spec.batch_norm = true;
  ParamSet p = init_params(spec, 33);
  for (auto& layer : p.bn) {
    layer.run_mean = 0.2 * Vector::Ones(6);
    layer.run_var = 0.8 * Vector::Ones(6);
  }
  p.bn_frozen = true;
  std::mt19937 gen(47);
  const Matrix x = random_batch(gen, 5, 2);
  const ParamSet q = transfer_init(p);
  EXPECT_EQ(forward(p, x, false), forward(q, x, false));
  EXPECT_EQ(forward(p, x, true), forward(q, x, true));
  EXPECT_TRUE(q.bn_frozen);
  EXPECT_EQ(q.bn[1].run_mean, p.bn[1].run_mean);
}

TEST(NeuralSerialization, RoundTripIsExact) {
  MLPSpec spec;
  spec.input_dim = 3;
  spec.hidden_layers = 2;
  spec.hidden_width = 5;
  spec.output_dim = 4;
  spec.batch_norm = true;
  ParamSet p = init_params(spec, 55);
  p.bn_frozen = true;
  for (auto& layer : p.bn) {
    layer.run_mean = Vector::Random(5);
    layer.run_var = (Vector::Random(5).array().abs() + 0.5).matrix();
  }
  std::stringstream buffer;
  save_params(buffer, p, 0x5Au, 17u);
  std::uint64_t role = 0, step = 0;
  const ParamSet q = load_params(buffer, &role, &step);
  EXPECT_EQ(role, 0x5Au);
  EXPECT_EQ(step, 17u);
  EXPECT_EQ(q.spec, p.spec);
  EXPECT_EQ(q.bn_frozen, p.bn_frozen);
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    EXPECT_EQ(q.weights[l], p.weights[l]);
    EXPECT_EQ(q.biases[l], p.biases[l]);
  }
  for (std::size_t l = 0; l < p.bn.size(); ++l) {
    EXPECT_EQ(q.bn[l].scale, p.bn[l].scale);
    EXPECT_EQ(q.bn[l].shift, p.bn[l].shift);
    EXPECT_EQ(q.bn[l].run_mean, p.bn[l].run_mean);
    EXPECT_EQ(q.bn[l].run_var, p.bn[l].run_var);
  }
  std::mt19937 gen(59);
  const Matrix x = random_batch(gen, 4, 3);
  EXPECT_EQ(forward(p, x, false), forward(q, x, false));
}

TEST(NeuralSerialization, RejectsForeignAndTruncatedFiles) {
  std::stringstream garbage;
  garbage.write("not a network", 13);
  EXPECT_THROW(load_params(garbage), ConfigError);

  MLPSpec spec;
  spec.input_dim = 2;
  spec.hidden_layers = 1;
  spec.hidden_width = 3;
  spec.output_dim = 1;
  ParamSet p = init_params(spec, 2);
  std::stringstream buffer;
  save_params(buffer, p, 0, 0);
  const std::string whole = buffer.str();
  std::stringstream cut(whole.substr(0, whole.size() / 2));
  EXPECT_THROW(load_params(cut), ConfigError);
}

TEST(NeuralTraining, LearnsAQuadraticFunction) {
  MLPSpec spec;
  spec.input_dim = 1;
  spec.hidden_layers = 2;
  spec.hidden_width = 16;
  spec.output_dim = 1;
  spec.batch_norm = false;
  ParamSet p = init_params(spec, 77);
  AdamState state = AdamState::like(p);
  std::mt19937 gen(61);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  const long long total = 2000;
  for (long long step = 0; step < total; ++step) {
    Matrix x(64, 1);
    for (int i = 0; i < 64; ++i) x(i, 0) = uni(gen);
    const Matrix target = x.array().square();
    ForwardCache cache;
    const Matrix out = forward(p, x, true, &cache);
    const Matrix upstream = 2.0 / 64.0 * (out - target);
    const Gradients g = backward(p, cache, upstream);
    adam_step(state, p, g, lr_schedule(step, total, 1e-2, 1e-3, 1e-4));
  }
  Matrix grid(101, 1);
  for (int i = 0; i <= 100; ++i) grid(i, 0) = -1.0 + 0.02 * i;
  const Matrix fit = forward(p, grid, false);
  const double mse =
      (fit - grid.array().square().matrix()).array().square().mean();
  EXPECT_LT(mse, 1e-3);
}

}  // namespace
}  // namespace bsdehedge
