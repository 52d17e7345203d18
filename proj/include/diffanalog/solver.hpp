#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <span>
#include <string>
#include <vector>

#include "diffanalog/common.hpp"
#include "diffanalog/memory.hpp"
#include "diffanalog/model.hpp"
#include "diffanalog/random.hpp"

namespace diffanalog {

enum class Method { Euler, Rk4, EulerMaruyama };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::Euler: return "euler";
    case Method::Rk4: return "rk4";
    case Method::EulerMaruyama: return "euler_maruyama";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  if (s == "euler") return Method::Euler;
  if (s == "rk4") return Method::Rk4;
  if (s == "euler_maruyama" || s == "em") return Method::EulerMaruyama;
  throw ConfigError("unknown solver method '" + s + "' (expected euler|rk4|euler_maruyama)");
}

struct SolveConfig {
  double dt = 0.01;
  double t_end = 1.0;
  Method method = Method::Rk4;
  std::uint64_t noise_seed = 0;
};

/// Step count and readout step indices for a model on a fixed grid.
struct Grid {
  std::size_t n_steps = 0;
  std::vector<std::size_t> readout_steps;
};

inline Grid make_grid(const CompiledModel& model, const SolveConfig& cfg) {
  if (!(cfg.dt > 0.0) || !std::isfinite(cfg.dt)) throw ConfigError("dt must be > 0");
  if (!(cfg.t_end > 0.0)) throw ConfigError("t_end must be > 0");
  const auto n = grid_index(cfg.t_end, cfg.dt);
  if (!n || *n == 0) throw ConfigError("t_end must be a positive integer multiple of dt");
  Grid g;
  g.n_steps = *n;
  for (double t : model.readout_times) {
    const auto k = grid_index(t, cfg.dt);
    if (!k) {
      throw ConfigError("readout time " + std::to_string(t) + " is not on the solver grid (dt=" +
                        std::to_string(cfg.dt) + ")");
    }
    if (*k > g.n_steps) throw ConfigError("readout time exceeds t_end");
    g.readout_steps.push_back(*k);
  }
  return g;
}

/// Full time-domain solution: states row n is x at t = n * dt.
struct Trajectory {
  std::vector<double> times;
  Matrix states;
  Matrix readouts;  // n_readouts x n_outputs
};

namespace detail {

/// Per-worker evaluation workspace for one (model, params, delta, inputs) binding.
class Dynamics {
 public:
  Dynamics(const CompiledModel& model, std::span<const double> params,
           std::span<const double> delta, std::span<const double> inputs)
      : model_(model),
        env_{{}, params, inputs, delta, 0.0},
        f_values_(model.derivative_tape.size()),
        f_adjoint_(model.derivative_tape.size()),
        g_values_(model.noise_tape.size()),
        g_adjoint_(model.noise_tape.size()),
        r_values_(model.readout_tape.size()),
        r_adjoint_(model.readout_tape.size()) {
    if (params.size() != model.n_params()) {
      throw ModelError("expected " + std::to_string(model.n_params()) + " parameters, got " +
                       std::to_string(params.size()));
    }
    if (delta.size() != model.n_mismatch()) {
      throw ModelError("expected " + std::to_string(model.n_mismatch()) +
                       " mismatch samples, got " + std::to_string(delta.size()));
    }
    if (inputs.size() != model.n_inputs()) {
      throw ModelError("expected " + std::to_string(model.n_inputs()) + " inputs, got " +
                       std::to_string(inputs.size()));
    }
  }

  const CompiledModel& model() const { return model_; }
  std::size_t n() const { return model_.n_states(); }

  void derivative(std::span<const double> x, double t, std::span<double> out) {
    bind(x, t);
    model_.derivative_tape.forward(env_, f_values_);
    model_.derivative_tape.gather(f_values_, out);
  }

  /// Accumulates seed^T df/dx and seed^T df/dtheta at (x, t); optionally returns f.
  void derivative_vjp(std::span<const double> x, double t, std::span<const double> seed,
                      std::span<double> d_state, std::span<double> d_params,
                      std::span<double> f_out = {}) {
    bind(x, t);
    model_.derivative_tape.forward(env_, f_values_);
    if (!f_out.empty()) model_.derivative_tape.gather(f_values_, f_out);
    model_.derivative_tape.reverse(f_values_, seed, f_adjoint_, d_state, d_params);
  }

  void noise(std::span<const double> x, double t, std::span<double> out) {
    bind(x, t);
    model_.noise_tape.forward(env_, g_values_);
    model_.noise_tape.gather(g_values_, out);
  }

  void noise_vjp(std::span<const double> x, double t, std::span<const double> seed,
                 std::span<double> d_state, std::span<double> d_params) {
    bind(x, t);
    model_.noise_tape.forward(env_, g_values_);
    model_.noise_tape.reverse(g_values_, seed, g_adjoint_, d_state, d_params);
  }

  void readout(std::span<const double> x, double t, std::span<double> out) {
    bind(x, t);
    model_.readout_tape.forward(env_, r_values_);
    model_.readout_tape.gather(r_values_, out);
  }

  void readout_vjp(std::span<const double> x, double t, std::span<const double> seed,
                   std::span<double> d_state, std::span<double> d_params) {
    bind(x, t);
    model_.readout_tape.forward(env_, r_values_);
    model_.readout_tape.reverse(r_values_, seed, r_adjoint_, d_state, d_params);
  }

 private:
  void bind(std::span<const double> x, double t) {
    env_.state = x;
    env_.time = t;
  }

  const CompiledModel& model_;
  EvalEnv env_;
  TrackedVector<double> f_values_, f_adjoint_;
  TrackedVector<double> g_values_, g_adjoint_;
  TrackedVector<double> r_values_, r_adjoint_;
};

/// xi ~ N(0, dt) per state for step n, a pure function of (seed, n).
inline void wiener_increment(std::uint64_t seed, std::size_t step, double dt, std::span<double> xi) {
  Rng rng(derive_seed(seed, {stream::kWiener, step}));
  std::normal_distribution<double> normal(0.0, 1.0);
  const double s = std::sqrt(dt);
  for (auto& v : xi) v = s * normal(rng);
}

/// Scratch buffers for one integration step.
struct StepWork {
  explicit StepWork(std::size_t n) : k1(n), k2(n), k3(n), k4(n), y(n), g(n), xi(n) {}
  TrackedVector<double> k1, k2, k3, k4, y, g, xi;
};

/// Advances x(t_n) to x(t_{n+1}) in place. For RK4 the stage inputs y2, y3, y4
/// are left in work.k2/k3/k4 evaluation order via `stages` when provided.
inline void step(Dynamics& dyn, Method method, std::span<double> x, std::size_t n, double dt,
                 std::uint64_t noise_seed, StepWork& w, std::span<double> stages = {}) {
  const std::size_t ns = dyn.n();
  const double t = static_cast<double>(n) * dt;
  switch (method) {
    case Method::Euler:
      dyn.derivative(x, t, w.k1);
      for (std::size_t i = 0; i < ns; ++i) x[i] += dt * w.k1[i];
      break;
    case Method::EulerMaruyama: {
      dyn.derivative(x, t, w.k1);
      const bool noisy = dyn.model().has_noise;
      if (noisy) {
        dyn.noise(x, t, w.g);
        wiener_increment(noise_seed, n, dt, w.xi);
      }
      for (std::size_t i = 0; i < ns; ++i) {
        x[i] += dt * w.k1[i];
        if (noisy && w.g[i] != 0.0) x[i] += w.g[i] * w.xi[i];
      }
      break;
    }
    case Method::Rk4: {
      const double h2 = 0.5 * dt;
      dyn.derivative(x, t, w.k1);
      for (std::size_t i = 0; i < ns; ++i) w.y[i] = x[i] + h2 * w.k1[i];
      if (!stages.empty()) std::copy(w.y.begin(), w.y.end(), stages.begin());
      dyn.derivative(w.y, t + h2, w.k2);
      for (std::size_t i = 0; i < ns; ++i) w.y[i] = x[i] + h2 * w.k2[i];
      if (!stages.empty()) std::copy(w.y.begin(), w.y.end(), stages.begin() + ns);
      dyn.derivative(w.y, t + h2, w.k3);
      for (std::size_t i = 0; i < ns; ++i) w.y[i] = x[i] + dt * w.k3[i];
      if (!stages.empty()) std::copy(w.y.begin(), w.y.end(), stages.begin() + 2 * ns);
      dyn.derivative(w.y, t + dt, w.k4);
      for (std::size_t i = 0; i < ns; ++i) {
        x[i] += dt / 6.0 * (w.k1[i] + 2.0 * w.k2[i] + 2.0 * w.k3[i] + w.k4[i]);
      }
      break;
    }
  }
}

inline void check_finite(std::span<const double> x, std::size_t step) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i])) {
      throw SolveError("non-finite state " + std::to_string(i) + " at step " +
                           std::to_string(step) + " (blow-up or stiffness)",
                       step);
    }
  }
}

inline void check_x0(const CompiledModel& model, std::span<const double> x0) {
  if (x0.size() != model.n_states()) {
    throw ModelError("initial state has " + std::to_string(x0.size()) + " entries, model has " +
                     std::to_string(model.n_states()) + " states");
  }
}

}  // namespace detail

/// Fixed-step integration from x0 over [0, cfg.t_end], recording every grid point.
inline Trajectory solve(const CompiledModel& model, std::span<const double> params,
                        std::span<const double> delta, std::span<const double> inputs,
                        std::span<const double> x0, const SolveConfig& cfg) {
  detail::check_x0(model, x0);
  const Grid grid = make_grid(model, cfg);
  detail::Dynamics dyn(model, params, delta, inputs);
  detail::StepWork work(model.n_states());

  Trajectory tr;
  const std::size_t ns = model.n_states();
  tr.times.resize(grid.n_steps + 1);
  tr.states = Matrix(grid.n_steps + 1, ns);
  tr.readouts = Matrix(model.n_readouts(), model.n_outputs());
  std::vector<double> x(x0.begin(), x0.end());
  detail::check_finite(x, 0);
  std::copy(x.begin(), x.end(), tr.states.row(0).begin());
  tr.times[0] = 0.0;
  for (std::size_t n = 0; n < grid.n_steps; ++n) {
    detail::step(dyn, cfg.method, x, n, cfg.dt, cfg.noise_seed, work);
    detail::check_finite(x, n + 1);
    std::copy(x.begin(), x.end(), tr.states.row(n + 1).begin());
    tr.times[n + 1] = static_cast<double>(n + 1) * cfg.dt;
  }
  for (std::size_t r = 0; r < grid.readout_steps.size(); ++r) {
    const std::size_t k = grid.readout_steps[r];
    dyn.readout(tr.states.row(k), tr.times[k], tr.readouts.row(r));
  }
  return tr;
}

/// Same integration as solve() but keeps only the readout matrix.
inline Matrix solve_readouts(const CompiledModel& model, std::span<const double> params,
                             std::span<const double> delta, std::span<const double> inputs,
                             std::span<const double> x0, const SolveConfig& cfg) {
  detail::check_x0(model, x0);
  const Grid grid = make_grid(model, cfg);
  detail::Dynamics dyn(model, params, delta, inputs);
  detail::StepWork work(model.n_states());
  Matrix readouts(model.n_readouts(), model.n_outputs());
  std::vector<double> x(x0.begin(), x0.end());
  detail::check_finite(x, 0);
  const std::size_t last = grid.readout_steps.back();
  std::size_t r = 0;
  for (std::size_t n = 0;; ++n) {
    while (r < grid.readout_steps.size() && grid.readout_steps[r] == n) {
      dyn.readout(x, static_cast<double>(n) * cfg.dt, readouts.row(r));
      ++r;
    }
    if (n == last) break;
    detail::step(dyn, cfg.method, x, n, cfg.dt, cfg.noise_seed, work);
    detail::check_finite(x, n + 1);
  }
  return readouts;
}

inline void write_csv_rows(std::ostream& os, const std::string& header_prefix,
                           std::span<const double> times, const Matrix& m,
                           const std::string& provenance) {
  if (!provenance.empty()) os << "# provenance: " << provenance << "\n";
  os << "t";
  for (std::size_t c = 0; c < m.cols; ++c) os << "," << header_prefix << c;
  os << "\n" << std::setprecision(17);
  for (std::size_t r = 0; r < m.rows; ++r) {
    os << times[r];
    for (std::size_t c = 0; c < m.cols; ++c) os << "," << m(r, c);
    os << "\n";
  }
}

/// Writes `t,x0,x1,...` and a sibling `t,y0,y1,...` readout file.
inline void export_csv(const Trajectory& tr, std::span<const double> readout_times,
                       const std::string& states_path, const std::string& readouts_path,
                       const std::string& provenance = {}) {
  std::ofstream s(states_path);
  if (!s) throw ConfigError("cannot write " + states_path);
  write_csv_rows(s, "x", tr.times, tr.states, provenance);
  std::ofstream r(readouts_path);
  if (!r) throw ConfigError("cannot write " + readouts_path);
  write_csv_rows(r, "y", readout_times, tr.readouts, provenance);
}

}  // namespace diffanalog
