#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "bsdehedge/common.hpp"
#include "bsdehedge/contracts.hpp"
#include "bsdehedge/market_models.hpp"

namespace bsdehedge {
namespace {

ContractSpec make_contract(PayoffKind kind, double strike,
                           std::vector<int> assets, int d, int r_ex = 1) {
  ContractSpec c;
  c.kind = kind;
  c.strike = strike;
  c.assets = std::move(assets);
  c.reflection_intervals = r_ex;
  validate_contract(c, d);
  return c;
}

TEST(Payoffs, HandValues) {
  RowVector x(4);
  x << 100.0, 121.0, 80.0, 95.0;

  const auto vanilla_call =
      make_contract(PayoffKind::VanillaCall, 90.0, {0}, 4);
  EXPECT_DOUBLE_EQ(payoff(vanilla_call, x), 10.0);

  const auto vanilla_put = make_contract(PayoffKind::VanillaPut, 90.0, {2}, 4);
  EXPECT_DOUBLE_EQ(payoff(vanilla_put, x), 10.0);

  // Geometric mean of 100 and 121 is 110 exactly.
  const auto geo_call =
      make_contract(PayoffKind::GeometricCall, 100.0, {0, 1}, 4);
  EXPECT_NEAR(payoff(geo_call, x), 10.0, 1e-12);

  const auto geo_put =
      make_contract(PayoffKind::GeometricPut, 115.0, {0, 1}, 4);
  EXPECT_NEAR(payoff(geo_put, x), 5.0, 1e-12);

  const auto arith_put =
      make_contract(PayoffKind::ArithmeticPutOnSubset, 100.0, {0, 2}, 4);
  EXPECT_DOUBLE_EQ(payoff(arith_put, x), 10.0);  // mean 90

  const auto call_on_max =
      make_contract(PayoffKind::CallOnMax, 100.0, {0, 1, 2}, 4);
  EXPECT_DOUBLE_EQ(payoff(call_on_max, x), 21.0);

  const auto put_on_min =
      make_contract(PayoffKind::PutOnMin, 100.0, {0, 1, 2}, 4);
  EXPECT_DOUBLE_EQ(payoff(put_on_min, x), 20.0);

  ContractSpec exchange;
  exchange.kind = PayoffKind::ExchangeCall;
  exchange.strike = 1.2;
  exchange.assets = {1, 3};
  validate_contract(exchange, 4);
  EXPECT_NEAR(payoff(exchange, x), 121.0 - 1.2 * 95.0, 1e-12);

  ContractSpec digital;
  digital.kind = PayoffKind::CashOrNothing;
  digital.lower_barrier = 75.0;
  digital.upper_barrier = 125.0;
  validate_contract(digital, 4);
  EXPECT_DOUBLE_EQ(payoff(digital, x), 1.0);
  RowVector outside = x;
  outside[2] = 70.0;
  EXPECT_DOUBLE_EQ(payoff(digital, outside), 0.0);
}

TEST(Payoffs, OutOfTheMoneyIsZero) {
  RowVector x(2);
  x << 80.0, 90.0;
  EXPECT_DOUBLE_EQ(
      payoff(make_contract(PayoffKind::VanillaCall, 100.0, {0}, 2), x), 0.0);
  EXPECT_DOUBLE_EQ(
      payoff(make_contract(PayoffKind::GeometricCall, 100.0, {0, 1}, 2), x),
      0.0);
  EXPECT_DOUBLE_EQ(
      payoff(make_contract(PayoffKind::PutOnMin, 70.0, {0, 1}, 2), x), 0.0);
}

TEST(Payoffs, EmptyAssetListMeansAllComponents) {
  RowVector x(3);
  x << 64.0, 125.0, 8.0;  // geometric mean 40 exactly
  ContractSpec c;
  c.kind = PayoffKind::GeometricCall;
  c.strike = 30.0;
  validate_contract(c, 3);
  EXPECT_NEAR(payoff(c, x), 10.0, 1e-12);
}

TEST(Payoffs, GeometricNeedsPositiveStates) {
  RowVector x(2);
  x << 100.0, -1.0;
  EXPECT_THROW(
      payoff(make_contract(PayoffKind::GeometricCall, 100.0, {0, 1}, 2), x),
      DomainError);
}

TEST(PayoffGradients, MatchFiniteDifferencesAwayFromKinks) {
  const int d = 4;
  RowVector x(d);
  x << 105.0, 121.0, 80.0, 95.0;
  std::vector<ContractSpec> contracts = {
      make_contract(PayoffKind::VanillaCall, 90.0, {0}, d),
      make_contract(PayoffKind::VanillaPut, 90.0, {2}, d),
      make_contract(PayoffKind::GeometricCall, 100.0, {0, 1}, d),
      make_contract(PayoffKind::GeometricPut, 115.0, {0, 1}, d),
      make_contract(PayoffKind::ArithmeticPutOnSubset, 100.0, {0, 2}, d),
      make_contract(PayoffKind::CallOnMax, 100.0, {0, 1, 2}, d),
      make_contract(PayoffKind::PutOnMin, 100.0, {0, 1, 2}, d)};
  ContractSpec exchange;
  exchange.kind = PayoffKind::ExchangeCall;
  exchange.strike = 1.2;
  exchange.assets = {1, 3};
  validate_contract(exchange, d);
  contracts.push_back(exchange);

  for (const auto& contract : contracts) {
    const RowVector grad = payoff_gradient(contract, x);
    for (int l = 0; l < d; ++l) {
      const double h = 1e-6 * x[l];
      RowVector xp = x, xm = x;
      xp[l] += h;
      xm[l] -= h;
      const double fd = (payoff(contract, xp) - payoff(contract, xm)) /
                        (2 * h);
      EXPECT_NEAR(grad[l], fd, 1e-6)
          << "contract kind " << int(contract.kind) << " component " << l;
    }
  }
}

TEST(PayoffGradients, GeometricHandValue) {
  RowVector x(2);
  x << 100.0, 121.0;
  const auto c = make_contract(PayoffKind::GeometricCall, 100.0, {0, 1}, 2);
  const RowVector g = payoff_gradient(c, x);
  // d(geo)/dx_i = geo / (2 x_i) with geo = 110.
  EXPECT_NEAR(g[0], 110.0 / 200.0, 1e-12);
  EXPECT_NEAR(g[1], 110.0 / 242.0, 1e-12);
}

TEST(PayoffGradients, ZeroSlopeAtOutOfTheMoneyBranch) {
  RowVector x(1);
  x << 90.0;
  const auto c = make_contract(PayoffKind::VanillaCall, 100.0, {0}, 1);
  EXPECT_EQ(payoff_gradient(c, x)[0], 0.0);
  // At the exact kink the zero branch is returned too.
  x[0] = 100.0;
  EXPECT_EQ(payoff_gradient(c, x)[0], 0.0);
}

TEST(PayoffGradients, DigitalIsFlat) {
  ContractSpec digital;
  digital.kind = PayoffKind::CashOrNothing;
  digital.lower_barrier = 75.0;
  digital.upper_barrier = 125.0;
  validate_contract(digital, 2);
  RowVector x(2);
  x << 100.0, 110.0;
  EXPECT_EQ(payoff_gradient(digital, x).cwiseAbs().maxCoeff(), 0.0);
}

TEST(ContractValidation, RejectsBadSpecs) {
  ContractSpec c;
  c.kind = PayoffKind::VanillaCall;
  c.strike = 100.0;
  c.assets = {0, 1};  // vanilla takes exactly one index
  EXPECT_THROW(validate_contract(c, 2), ConfigError);

  c.assets = {5};
  EXPECT_THROW(validate_contract(c, 2), ConfigError);

  c.assets = {0};
  c.strike = -1.0;
  EXPECT_THROW(validate_contract(c, 2), ConfigError);

  c.strike = 100.0;
  c.reflection_intervals = 0;
  EXPECT_THROW(validate_contract(c, 2), ConfigError);

  ContractSpec digital;
  digital.kind = PayoffKind::CashOrNothing;
  digital.lower_barrier = 100.0;
  digital.upper_barrier = 100.0;
  EXPECT_THROW(validate_contract(digital, 1), ConfigError);
}

TEST(ContractValidation, SetsPayoffDirection) {
  auto call = make_contract(PayoffKind::GeometricCall, 100.0, {}, 2);
  auto put = make_contract(PayoffKind::GeometricPut, 100.0, {}, 2);
  EXPECT_EQ(call.omega, 1.0);
  EXPECT_EQ(put.omega, -1.0);
}

TEST(ExerciseSchedule, InteriorNodesOnly) {
  const TimeGrid grid{1.0, 20};
  // R = 10 on a 20-step grid: exercise dates every 2 steps, endpoints
  // excluded from reflection.
  const auto c = make_contract(PayoffKind::VanillaPut, 100.0, {0}, 1, 10);
  EXPECT_FALSE(is_reflection_node(c, grid, 0));
  EXPECT_FALSE(is_reflection_node(c, grid, 1));
  EXPECT_TRUE(is_reflection_node(c, grid, 2));
  EXPECT_FALSE(is_reflection_node(c, grid, 3));
  EXPECT_TRUE(is_reflection_node(c, grid, 18));
  EXPECT_FALSE(is_reflection_node(c, grid, 20));  // terminal handled apart

  // R = 1 is European: no interior reflection nodes at all.
  const auto euro = make_contract(PayoffKind::VanillaPut, 100.0, {0}, 1, 1);
  for (int n = 0; n <= 20; ++n)
    EXPECT_FALSE(is_reflection_node(euro, grid, n));
}

TEST(ExerciseSchedule, OffGridScheduleThrows) {
  const TimeGrid grid{1.0, 20};
  const auto c = make_contract(PayoffKind::VanillaPut, 100.0, {0}, 1, 3);
  EXPECT_THROW(is_reflection_node(c, grid, 5), ConfigError);

  PortfolioSpec portfolio;
  portfolio.model.kind = ModelKind::BlackScholes;
  portfolio.model.d = 1;
  portfolio.model.m = 1;
  portfolio.model.mu_bar = Vector::Zero(1);
  portfolio.model.sigma_bar = Vector::Constant(1, 0.2);
  portfolio.model.q = Vector::Zero(1);
  portfolio.model.corr = Matrix::Identity(1, 1);
  portfolio.model.x0 = Vector::Constant(1, 100.0);
  portfolio.contracts = {c};
  EXPECT_THROW(validate_portfolio(portfolio, grid), ConfigError);
}

TEST(Reflection, FloorsContinuationAtExerciseDates) {
  const TimeGrid grid{1.0, 10};
  const auto c = make_contract(PayoffKind::VanillaPut, 100.0, {0}, 1, 5);
  RowVector x(1);
  x << 90.0;  // immediate exercise pays 10
  // Interior exercise date, continuation below the exercise value: floored.
  EXPECT_DOUBLE_EQ(reflect_y(c, grid, 2, x, 7.0), 10.0);
  // Continuation above: untouched.
  EXPECT_DOUBLE_EQ(reflect_y(c, grid, 2, x, 12.0), 12.0);
  // Not an exercise date: untouched even below the payoff.
  EXPECT_DOUBLE_EQ(reflect_y(c, grid, 1, x, 7.0), 7.0);
  EXPECT_TRUE(reflection_triggered(c, grid, 2, x, 7.0));
  EXPECT_FALSE(reflection_triggered(c, grid, 2, x, 12.0));
  EXPECT_FALSE(reflection_triggered(c, grid, 1, x, 7.0));
}

TEST(Reflection, ReplacesSlopeWithExerciseSlope) {
  ModelSpec model;
  model.kind = ModelKind::BlackScholes;
  model.d = 1;
  model.m = 1;
  model.mu_bar = Vector::Zero(1);
  model.sigma_bar = Vector::Constant(1, 0.25);
  model.q = Vector::Zero(1);
  model.corr = Matrix::Identity(1, 1);
  model.x0 = Vector::Constant(1, 100.0);
  validate_model(model);
  const TimeGrid grid{1.0, 10};
  const auto c = make_contract(PayoffKind::VanillaPut, 100.0, {0}, 1, 5);
  RowVector x(1);
  x << 90.0;
  RowVector z_tilde(1);
  z_tilde << -5.0;
  // Triggered: z becomes payoff_gradient * sigma = (-1) * 0.25 * 90.
  const RowVector z_hit = reflect_z(c, model, grid, 2, x, 7.0, z_tilde);
  EXPECT_NEAR(z_hit[0], -22.5, 1e-12);
  // Not triggered: continuation slope kept.
  const RowVector z_keep = reflect_z(c, model, grid, 2, x, 12.0, z_tilde);
  EXPECT_EQ(z_keep[0], -5.0);
}

TEST(Driver, ScalarHandValue) {
  ModelSpec model;
  model.kind = ModelKind::BlackScholes;
  model.d = 1;
  model.m = 1;
  model.r = 0.1;
  model.mu_bar = Vector::Constant(1, 0.15);
  model.sigma_bar = Vector::Constant(1, 0.25);
  model.q = Vector::Constant(1, 0.02);
  model.corr = Matrix::Identity(1, 1);
  model.x0 = Vector::Constant(1, 100.0);
  validate_model(model);
  RowVector x(1);
  x << 100.0;
  Vector y(1);
  y << 3.0;
  Matrix z(1, 1);
  z << 2.0;
  const DriverEval eval = driver(model, 0.0, x, y, z);
  // f = -r y - (mu - r + q)/sigma * z = -0.3 - 0.28*2 = -0.86.
  EXPECT_NEAR(eval.f[0], -0.86, 1e-12);
  EXPECT_NEAR(eval.gy[0], -0.1, 1e-14);
  EXPECT_NEAR(eval.gz(0, 0), -0.28, 1e-12);
  EXPECT_EQ(eval.gx(0, 0), 0.0);
}

TEST(Driver, RowsAreIndependentAcrossContracts) {
  ModelSpec model;
  model.kind = ModelKind::BlackScholes;
  model.d = 2;
  model.m = 2;
  model.r = 0.05;
  model.mu_bar = Vector(2);
  model.mu_bar << 0.1, 0.2;
  model.sigma_bar = Vector(2);
  model.sigma_bar << 0.2, 0.4;
  model.q = Vector::Zero(2);
  model.corr = Matrix(2, 2);
  model.corr << 1.0, 0.5,
                0.5, 1.0;
  model.x0 = Vector::Constant(2, 100.0);
  validate_model(model);
  RowVector x(2);
  x << 95.0, 105.0;
  Vector y(2);
  y << 3.0, -1.0;
  Matrix z(2, 2);
  z << 1.0, 2.0,
       -0.5, 0.25;
  const DriverEval joint = driver(model, 0.0, x, y, z);
  for (int j = 0; j < 2; ++j) {
    const DriverEval solo =
        driver(model, 0.0, x, y.segment(j, 1), z.row(j));
    EXPECT_NEAR(joint.f[j], solo.f[0], 1e-14);
    EXPECT_LT((joint.gz.row(j) - solo.gz.row(0)).cwiseAbs().maxCoeff(),
              1e-14);
  }
}

TEST(Driver, JacobiansMatchFiniteDifferences) {
  ModelSpec model;
  model.kind = ModelKind::Heston;
  model.d = 2;
  model.m = 1;
  model.r = 0.1;
  model.mu_bar = Vector::Constant(1, 0.18);
  model.q = Vector::Constant(1, 0.01);
  model.heston = HestonParams{5.0, 0.16, 0.1, 0.9};
  model.x0 = Vector(2);
  model.x0 << 10.0, 0.0625;
  validate_model(model);
  RowVector x(2);
  x << 9.5, 0.09;
  Vector y(1);
  y << 2.0;
  Matrix z(1, 2);
  z << 0.7, -0.3;
  const double t = 0.1;
  const DriverEval eval = driver(model, t, x, y, z);

  // dy
  {
    Vector yp = y, ym = y;
    yp[0] += 1e-6;
    ym[0] -= 1e-6;
    const double fd = (driver(model, t, x, yp, z).f[0] -
                       driver(model, t, x, ym, z).f[0]) /
                      2e-6;
    EXPECT_NEAR(eval.gy[0], fd, 1e-7);
  }
  // dz
  for (int l = 0; l < 2; ++l) {
    Matrix zp = z, zm = z;
    zp(0, l) += 1e-6;
    zm(0, l) -= 1e-6;
    const double fd = (driver(model, t, x, y, zp).f[0] -
                       driver(model, t, x, y, zm).f[0]) /
                      2e-6;
    EXPECT_NEAR(eval.gz(0, l), fd, 1e-6);
  }
  // dx
  for (int l = 0; l < 2; ++l) {
    RowVector xp = x, xm = x;
    const double h = 1e-6 * std::max(1.0, std::abs(x[l]));
    xp[l] += h;
    xm[l] -= h;
    const double fd = (driver(model, t, xp, y, z).f[0] -
                       driver(model, t, xm, y, z).f[0]) /
                      (2 * h);
    EXPECT_NEAR(eval.gx(0, l), fd, 1e-5);
  }
}

TEST(Driver, BlackScholesStateIndependent) {
  ModelSpec model;
  model.kind = ModelKind::BlackScholes;
  model.d = 1;
  model.m = 1;
  model.r = 0.05;
  model.mu_bar = Vector::Constant(1, 0.1);
  model.sigma_bar = Vector::Constant(1, 0.3);
  model.q = Vector::Zero(1);
  model.corr = Matrix::Identity(1, 1);
  model.x0 = Vector::Constant(1, 100.0);
  validate_model(model);
  Vector y(1);
  y << 1.5;
  Matrix z(1, 1);
  z << 0.8;
  RowVector xa(1), xb(1);
  xa << 50.0;
  xb << 150.0;
  EXPECT_EQ(driver(model, 0.0, xa, y, z).f[0],
            driver(model, 0.3, xb, y, z).f[0]);
}

TEST(Driver, ShapeMismatchThrows) {
  ModelSpec model;
  model.kind = ModelKind::BlackScholes;
  model.d = 2;
  model.m = 2;
  model.mu_bar = Vector::Zero(2);
  model.sigma_bar = Vector::Constant(2, 0.2);
  model.q = Vector::Zero(2);
  model.corr = Matrix::Identity(2, 2);
  model.x0 = Vector::Constant(2, 100.0);
  validate_model(model);
  RowVector x = RowVector::Constant(2, 100.0);
  Vector y(1);
  y << 1.0;
  EXPECT_THROW(driver(model, 0.0, x, y, Matrix::Ones(1, 3)), ShapeMismatch);
  EXPECT_THROW(driver(model, 0.0, x, y, Matrix::Ones(2, 2)), ShapeMismatch);
}

}  // namespace
}  // namespace bsdehedge
