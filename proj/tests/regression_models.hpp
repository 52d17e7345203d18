#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "diffanalog/gradient.hpp"
#include "diffanalog/model.hpp"
#include "diffanalog/solver.hpp"

namespace testing_models {

using namespace diffanalog;
using namespace diffanalog::expr;

struct Case {
  std::string name;
  CompiledModel model;
  std::vector<double> params;
  std::vector<double> delta;
  std::vector<double> inputs;
  std::vector<double> x0;
  SolveConfig solve;
  LossSpec loss;
};

/// Targets for a loss over all readouts; chosen away from the trajectory so
/// every gradient coordinate is well above rounding noise.
inline Matrix offset_targets(const CompiledModel& m, double v) {
  return Matrix(m.n_readouts(), m.n_outputs(), v);
}

inline Case van_der_pol() {
  ModelBuilder b;
  b.add_state("x");
  b.add_state("v");
  b.add_trainable(analog_trainable("mu", 1.0, 0.0, 5.0));
  b.add_trainable(analog_trainable("w", 1.0, 0.1, 3.0));
  b.set_derivative(0, state(1));
  b.set_derivative(1, param(0) * (1.0 - state(0) * state(0)) * state(1) - param(1) * param(1) * state(0));
  b.set_readout({0.5, 1.0}, {state(0), state(1)});
  b.set_initial_state({1.0, 0.0});
  Case c{"van_der_pol", compile(b, 0.01), {1.3, 1.1}, {}, {}, {1.0, 0.2}, {0.01, 1.0, Method::Rk4, 0}, {}};
  c.loss = LossSpec::mse(offset_targets(c.model, 0.3));
  return c;
}

inline Case lotka_volterra() {
  ModelBuilder b;
  b.add_state("prey");
  b.add_state("pred");
  for (const char* n : {"a", "b", "c", "d"}) b.add_trainable(analog_trainable(n, 1.0, 0.0, 3.0));
  b.set_derivative(0, param(0) * state(0) - param(1) * state(0) * state(1));
  b.set_derivative(1, param(3) * state(0) * state(1) - param(2) * state(1));
  b.set_readout({0.4, 0.8, 1.2}, {state(0), state(1)});
  Case c{"lotka_volterra", compile(b, 0.01), {1.1, 0.4, 0.9, 0.3}, {}, {}, {2.0, 1.0},
         {0.01, 1.2, Method::Rk4, 0}, {}};
  c.loss = LossSpec::mse(offset_targets(c.model, 1.0));
  return c;
}

/// Lorenz system over a short horizon (chaotic growth stays moderate).
inline Case lorenz() {
  ModelBuilder b;
  b.add_state("x");
  b.add_state("y");
  b.add_state("z");
  b.add_trainable(analog_trainable("sigma", 10.0, 1.0, 20.0));
  b.add_trainable(analog_trainable("rho", 28.0, 1.0, 40.0));
  b.add_trainable(analog_trainable("beta", 2.5, 0.5, 5.0));
  b.set_derivative(0, param(0) * (state(1) - state(0)));
  b.set_derivative(1, state(0) * (param(1) - state(2)) - state(1));
  b.set_derivative(2, state(0) * state(1) - param(2) * state(2));
  b.set_readout({0.25, 0.5}, {state(0), state(2)});
  Case c{"lorenz", compile(b, 0.005), {10.0, 28.0, 8.0 / 3.0}, {}, {}, {1.0, 1.0, 1.0},
         {0.005, 0.5, Method::Rk4, 0}, {}};
  c.loss = LossSpec::mse(offset_targets(c.model, 2.0));
  return c;
}

/// Three coupled phase oscillators with injection locking and a folded readout.
inline Case kuramoto3() {
  ModelBuilder b;
  for (int i = 0; i < 3; ++i) b.add_state("phi" + std::to_string(i));
  b.add_trainable(analog_trainable("k01", 0.5, -1.0, 1.0));
  b.add_trainable(analog_trainable("k12", -0.3, -1.0, 1.0));
  b.add_trainable(analog_trainable("k02", 0.2, -1.0, 1.0));
  b.add_trainable(analog_trainable("l", 0.5, 0.0, 4.0));
  const double pi = std::numbers::pi;
  const std::size_t e[3][2] = {{0, 1}, {1, 2}, {0, 2}};
  std::vector<std::vector<Expr>> terms(3);
  for (std::size_t k = 0; k < 3; ++k) {
    const Expr s = param(k) * sin((state(e[k][0]) - state(e[k][1])) * pi);
    terms[e[k][0]].push_back(neg(s));
    terms[e[k][1]].push_back(s);
  }
  for (std::size_t i = 0; i < 3; ++i) {
    terms[i].push_back(neg(param(3) * sin(state(i) * (2.0 * pi))));
    b.set_derivative(i, sum(terms[i]));
  }
  b.set_readout({1.0}, {fold(state(0)), fold(state(1)), fold(state(2))});
  Case c{"kuramoto3", compile(b, 0.01), {0.6, -0.4, 0.3, 0.7}, {}, {}, {0.2, 0.45, 0.7},
         {0.01, 1.0, Method::Rk4, 0}, {}};
  c.loss = LossSpec::mse(Matrix(1, 3, 0.5));
  return c;
}

/// Driven nonlinear RC ladder with mismatch, logistic and exponential terms (6 states).
inline Case rc_ladder() {
  ModelBuilder b;
  const int n = 6;
  for (int i = 0; i < n; ++i) b.add_state("v" + std::to_string(i));
  b.declare_input("drive");
  b.add_trainable(analog_trainable("g", 1.0, 0.1, 3.0));
  b.add_trainable(analog_trainable("c", 1.0, 0.2, 3.0));
  b.add_trainable(analog_trainable("gain", 2.0, 0.5, 5.0));
  for (int i = 0; i < n; ++i) {
    const Expr left = i == 0 ? input(0) * logistic(time() - 0.2, 4.0) : state(i - 1);
    Expr flow = b.mismatch(param(0) * (left - state(i)), 0.05);
    if (i + 1 < n) flow = flow - param(0) * (state(i) - state(i + 1));
    const Expr leak = 0.1 * (exp(0.5 * state(i)) - 1.0);
    b.set_derivative(i, (flow - leak + 0.2 * param(2) * logistic(state(i), 3.0)) / param(1));
  }
  b.set_readout({0.5, 1.0}, {state(0), state(2), state(5)});
  Case c{"rc_ladder", compile(b, 0.01), {1.2, 0.8, 2.0}, {}, {1.5}, std::vector<double>(n, 0.1),
         {0.01, 1.0, Method::Rk4, 0}, {}};
  c.delta = {1.03, 0.98, 1.01, 0.97, 1.02, 0.99};
  c.loss = LossSpec::mse(offset_targets(c.model, 0.8));
  return c;
}

inline std::vector<Case> suite() {
  return {van_der_pol(), lotka_volterra(), lorenz(), kuramoto3(), rc_ladder()};
}

/// Central finite differences of the loss in physical parameter space.
inline std::vector<double> finite_difference(const Case& c, double rel_step = 1e-6) {
  std::vector<double> g(c.params.size());
  for (std::size_t p = 0; p < c.params.size(); ++p) {
    const double h = rel_step * std::max(1.0, std::abs(c.params[p]));
    auto at = [&](double v) {
      auto q = c.params;
      q[p] = v;
      const Trajectory tr = solve(c.model, q, c.delta, c.inputs, c.x0, c.solve);
      return c.loss.evaluate(tr.readouts, nullptr);
    };
    g[p] = (at(c.params[p] + h) - at(c.params[p] - h)) / (2.0 * h);
  }
  return g;
}

inline double rel_err(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace testing_models
