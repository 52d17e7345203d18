#include <gtest/gtest.h>

#include <cmath>

#include "diffanalog/gradient.hpp"
#include "diffanalog/memory.hpp"
#include "regression_models.hpp"

using namespace diffanalog;
using namespace diffanalog::expr;
using testing_models::rel_err;

namespace {

/// dx/dt = a x, x0 = 1, loss = x(1).
CompiledModel growth() {
  ModelBuilder b;
  b.add_state("x");
  b.add_trainable(analog_trainable("a", 0.0, -1.0, 1.0));
  b.set_derivative(0, param(0) * state(0));
  b.set_readout({1.0}, {state(0)});
  b.set_initial_state({1.0});
  return compile(b);
}

const LossSpec kIdentity(state(0), Matrix(1, 1));

/// One-state model with a mismatched gain; cheap enough for Monte Carlo statistics.
CompiledModel mismatched_gain(double sigma) {
  ModelBuilder b;
  b.add_state("x");
  b.add_trainable(analog_trainable("a", 0.5, 0.0, 2.0));
  b.set_derivative(0, b.mismatch(param(0) * sin(state(0)), sigma) - state(0));
  b.set_readout({1.0}, {state(0)});
  b.set_initial_state({0.7});
  return compile(b, 0.05);
}

}  // namespace

TEST(Gradient, BackpropAnalyticGrowth) {
  const auto m = growth();
  const auto g = grad_backprop(m, std::vector<double>{0.0}, {}, {}, m.initial_state,
                               {0.001, 1.0, Method::Rk4, 0}, kIdentity);
  EXPECT_NEAR(g.grad[0], 1.0, 1e-4);
  EXPECT_NEAR(g.loss, 1.0, 1e-12);
}

TEST(Gradient, ConstantLossHasZeroGradient) {
  const auto m = growth();
  const LossSpec loss(constant(3.0), Matrix(1, 1));
  const auto g = grad_backprop(m, std::vector<double>{0.4}, {}, {}, m.initial_state,
                               {0.01, 1.0, Method::Rk4, 0}, loss);
  EXPECT_EQ(g.grad[0], 0.0);
  const auto a = grad_adjoint(m, std::vector<double>{0.4}, {}, {}, m.initial_state,
                              {0.01, 1.0, Method::Rk4, 0}, loss);
  EXPECT_EQ(a.grad[0], 0.0);
}

TEST(Gradient, AdjointAnalyticGrowth) {
  const auto m = growth();
  const auto g = grad_adjoint(m, std::vector<double>{0.0}, {}, {}, m.initial_state,
                              {0.001, 1.0, Method::Rk4, 0}, kIdentity);
  EXPECT_NEAR(g.grad[0], 1.0, 1e-3);
}

TEST(Gradient, BackpropMatchesFiniteDifferencesOnSuite) {
  for (const auto& c : testing_models::suite()) {
    const auto g = grad_backprop(c.model, c.params, c.delta, c.inputs, c.x0, c.solve, c.loss);
    const auto fd = testing_models::finite_difference(c);
    for (std::size_t p = 0; p < fd.size(); ++p) {
      EXPECT_LE(rel_err(g.grad[p], fd[p]), 1e-4) << c.name << " param " << p;
    }
  }
}

TEST(Gradient, BackpropEulerMatchesFiniteDifferences) {
  auto c = testing_models::van_der_pol();
  c.solve.method = Method::Euler;
  const auto g = grad_backprop(c.model, c.params, c.delta, c.inputs, c.x0, c.solve, c.loss);
  const auto fd = testing_models::finite_difference(c);
  for (std::size_t p = 0; p < fd.size(); ++p) EXPECT_LE(rel_err(g.grad[p], fd[p]), 1e-4);
}

TEST(Gradient, BackpropThroughFixedNoisePath) {
  // With the Wiener path fixed by the seed, the pathwise derivative is exact.
  ModelBuilder b;
  b.add_state("x");
  b.add_trainable(analog_trainable("a", 1.0, 0.0, 2.0));
  b.add_trainable(analog_trainable("s", 0.3, 0.0, 1.0));
  b.set_derivative(0, neg(param(0) * state(0)) + 0.5);
  b.set_noise(0, param(1) * (1.0 + 0.1 * state(0) * state(0)));
  b.set_readout({0.5, 1.0}, {state(0)});
  testing_models::Case c{"noisy", compile(b), {1.2, 0.4}, {}, {}, {0.2},
                         {0.01, 1.0, Method::EulerMaruyama, 77}, LossSpec::mse(Matrix(2, 1, 1.0))};
  const auto g = grad_backprop(c.model, c.params, c.delta, c.inputs, c.x0, c.solve, c.loss);
  const auto fd = testing_models::finite_difference(c);
  for (std::size_t p = 0; p < fd.size(); ++p) EXPECT_LE(rel_err(g.grad[p], fd[p]), 1e-5);
}

TEST(Gradient, AdjointAgreesWithBackprop) {
  for (const auto& c : testing_models::suite()) {
    const auto b = grad_backprop(c.model, c.params, c.delta, c.inputs, c.x0, c.solve, c.loss);
    const auto a = grad_adjoint(c.model, c.params, c.delta, c.inputs, c.x0, c.solve, c.loss);
    EXPECT_NEAR(a.loss, b.loss, 1e-12 * std::max(1.0, std::abs(b.loss))) << c.name;
    for (std::size_t p = 0; p < b.grad.size(); ++p) {
      EXPECT_LE(rel_err(a.grad[p], b.grad[p]), 1e-3) << c.name << " param " << p;
    }
  }
}

TEST(Gradient, AdjointRejectsStochasticMethod) {
  auto c = testing_models::van_der_pol();
  c.solve.method = Method::EulerMaruyama;
  EXPECT_THROW(grad_adjoint(c.model, c.params, c.delta, c.inputs, c.x0, c.solve, c.loss), ConfigError);
}

TEST(Gradient, LossMayNotReferenceParameters) {
  const auto m = growth();
  const LossSpec bad(param(0) * state(0), Matrix(1, 1));
  EXPECT_THROW(grad_backprop(m, std::vector<double>{0.1}, {}, {}, m.initial_state, {0.1, 1.0, Method::Rk4, 0}, bad),
               ConfigError);
}

TEST(Gradient, AdjointMemoryFlatBackpropLinear) {
  auto c = testing_models::rc_ladder();
  const std::size_t state_bytes = c.model.n_states() * sizeof(double);
  auto peak = [](auto&& f) {
    const std::size_t base = MemoryCounter::current();
    MemoryCounter::reset_peak();
    f();
    return MemoryCounter::peak() - base;
  };
  std::vector<std::size_t> adj, bp;
  for (double dt : {0.01, 0.005}) {
    c.solve.dt = dt;
    adj.push_back(peak([&] { grad_adjoint(c.model, c.params, c.delta, c.inputs, c.x0, c.solve, c.loss); }));
    bp.push_back(peak([&] { grad_backprop(c.model, c.params, c.delta, c.inputs, c.x0, c.solve, c.loss); }));
  }
  EXPECT_LE(adj[1] > adj[0] ? adj[1] - adj[0] : adj[0] - adj[1], state_bytes);
  // 100 extra RK4 steps store 4 state-sized vectors each.
  EXPECT_NEAR(static_cast<double>(bp[1] - bp[0]), 100.0 * 4.0 * static_cast<double>(state_bytes),
              0.05 * 400.0 * static_cast<double>(state_bytes));
}

TEST(Gradient, McGradDegeneratesToSingleBackprop) {
  const auto m = mismatched_gain(0.0);
  const auto store = TrainableStore::init(m);
  const std::vector<BatchItem> batch{{{}, Matrix(1, 1, 0.2), {0.7}}};
  McOptions o;
  o.solve = {0.05, 1.0, Method::Rk4, 0};
  const auto est = mc_grad(m, store, batch, LossSpec::mse(Matrix(1, 1)), o);
  const auto g = grad_backprop(m, std::vector<double>{0.5}, std::vector<double>{1.0}, {}, batch[0].x0, o.solve,
                               LossSpec::mse(Matrix(1, 1, 0.2)));
  EXPECT_DOUBLE_EQ(est.loss_mean, g.loss);
  EXPECT_DOUBLE_EQ(est.grad[0], g.grad[0] * bound_slope(0.0, 2.0));
}

TEST(Gradient, McGradWorkerCountInvariant) {
  const auto m = mismatched_gain(0.1);
  const auto store = TrainableStore::init(m);
  std::vector<BatchItem> batch;
  for (int i = 0; i < 5; ++i) batch.push_back({{}, Matrix(1, 1, 0.1 * i), {0.2 * i}});
  McOptions o;
  o.solve = {0.05, 1.0, Method::Rk4, 0};
  o.n_mismatch = 4;
  o.seed = 123;
  const auto one = mc_grad(m, store, batch, LossSpec::mse(Matrix(1, 1)), o);
  o.workers = 3;
  const auto three = mc_grad(m, store, batch, LossSpec::mse(Matrix(1, 1)), o);
  EXPECT_EQ(one.grad, three.grad);
  EXPECT_EQ(one.loss_mean, three.loss_mean);
  EXPECT_EQ(one.loss_std, three.loss_std);
}

TEST(Gradient, McGradStandardErrorShrinksWithSamples) {
  const auto m = mismatched_gain(0.1);
  const auto store = TrainableStore::init(m);
  const std::vector<BatchItem> batch{{{}, Matrix(1, 1, 0.0), {0.7}}};
  auto spread = [&](std::size_t n) {
    std::vector<double> g;
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
      McOptions o;
      o.solve = {0.05, 1.0, Method::Rk4, 0};
      o.n_mismatch = n;
      o.seed = seed;
      g.push_back(mc_grad(m, store, batch, LossSpec::mse(Matrix(1, 1)), o).grad[0]);
    }
    double mean = 0.0;
    for (double v : g) mean += v;
    return sample_std(g, mean / static_cast<double>(g.size()));
  };
  const double ratio = spread(8) / spread(64);
  EXPECT_GT(ratio, std::sqrt(8.0) * 0.6);
  EXPECT_LT(ratio, std::sqrt(8.0) * 1.5);
}

TEST(Gradient, SampleErrorsCarryTheSampleLabel) {
  ModelBuilder b;
  b.add_state("x");
  b.add_trainable(analog_trainable("a", 1.0, 0.5, 2.0));
  b.set_derivative(0, param(0) / state(0));
  b.set_readout({1.0}, {state(0)});
  const auto m = compile(b);
  const std::vector<BatchItem> batch{{{}, Matrix(1, 1), {1.0}}, {{}, Matrix(1, 1), {0.0}}};
  McOptions o;
  o.solve = {0.1, 1.0, Method::Euler, 0};
  try {
    mc_grad(m, TrainableStore::init(m), batch, LossSpec::mse(Matrix(1, 1)), o);
    FAIL() << "expected an evaluation error";
  } catch (const EvalError& e) {
    EXPECT_NE(std::string(e.what()).find("batch item 1"), std::string::npos) << e.what();
  }
}
