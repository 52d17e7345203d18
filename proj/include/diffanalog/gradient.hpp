#pragma once

#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "diffanalog/common.hpp"
#include "diffanalog/expr.hpp"
#include "diffanalog/memory.hpp"
#include "diffanalog/model.hpp"
#include "diffanalog/parallel.hpp"
#include "diffanalog/random.hpp"
#include "diffanalog/relax.hpp"
#include "diffanalog/solver.hpp"
#include "diffanalog/trainables.hpp"

namespace diffanalog {

/// Scalar loss over the readout matrix. Inside `expr`, state(k) refers to
/// readout entry k (row-major over readouts x outputs) and input(k) to
/// target entry k.
struct LossSpec {
  Expr expr;
  Matrix targets;

  LossSpec() = default;
  LossSpec(Expr e, Matrix t)
      : expr(std::move(e)),
        targets(std::move(t)),
        tape_(std::make_shared<const Tape>(std::span<const Expr>(&expr, 1))) {}

  /// Same loss expression against different targets; shares the compiled tape.
  LossSpec with_targets(Matrix t) const {
    LossSpec copy = *this;
    copy.targets = std::move(t);
    return copy;
  }

  /// Mean squared error over every readout entry.
  static LossSpec mse(Matrix targets) {
    const std::size_t n = targets.data.size();
    if (n == 0) throw ConfigError("mse loss needs at least one target");
    std::vector<Expr> terms;
    terms.reserve(n);
    for (std::size_t k = 0; k < n; ++k) {
      const Expr d = expr::state(k) - expr::input(k);
      terms.push_back(d * d);
    }
    return LossSpec(expr::sum(std::move(terms)) * (1.0 / static_cast<double>(n)),
                    std::move(targets));
  }

  /// Value and d(loss)/d(readouts).
  double evaluate(const Matrix& readouts, Matrix* d_readouts) const {
    if (!tape_) throw ConfigError("loss expression not set");
    const auto& x = tape_->extent();
    if (x.states > readouts.data.size()) {
      throw ConfigError("loss references readout entry " + std::to_string(x.states - 1) +
                        " but only " + std::to_string(readouts.data.size()) + " exist");
    }
    if (x.inputs > targets.data.size()) {
      throw ConfigError("loss references target entry " + std::to_string(x.inputs - 1) +
                        " but only " + std::to_string(targets.data.size()) + " exist");
    }
    if (x.params > 0 || x.mismatch > 0) {
      throw ConfigError("loss may reference only readouts and targets");
    }
    const EvalEnv env{readouts.data, {}, targets.data, {}, 0.0};
    std::vector<double> values(tape_->size());
    tape_->forward(env, values);
    double out = 0.0;
    tape_->gather(values, std::span<double>(&out, 1));
    if (d_readouts != nullptr) {
      *d_readouts = Matrix(readouts.rows, readouts.cols);
      std::vector<double> adjoint(tape_->size());
      const double seed = 1.0;
      tape_->reverse(values, std::span<const double>(&seed, 1), adjoint, d_readouts->data, {});
    }
    return out;
  }

 private:
  std::shared_ptr<const Tape> tape_;
};

struct GradResult {
  double loss = 0.0;
  std::vector<double> grad;  // d(loss)/d(physical params)
  Matrix readouts;
};

namespace detail {

/// Adds d(loss)/d(x) and d(loss)/d(theta) contributions of readout row r at x.
inline void readout_jump(Dynamics& dyn, std::span<const double> x, double t,
                         std::span<const double> d_row, std::span<double> a,
                         std::span<double> d_params) {
  dyn.readout_vjp(x, t, d_row, a, d_params);
}

}  // namespace detail

/// Exact gradient of the discrete solver map composed with the loss. Stores
/// the whole forward trajectory (and RK4 stage points): memory is linear in
/// the step count.
inline GradResult grad_backprop(const CompiledModel& model, std::span<const double> params,
                                std::span<const double> delta, std::span<const double> inputs,
                                std::span<const double> x0, const SolveConfig& cfg,
                                const LossSpec& loss) {
  detail::check_x0(model, x0);
  const Grid grid = make_grid(model, cfg);
  detail::Dynamics dyn(model, params, delta, inputs);
  const std::size_t ns = model.n_states();
  const std::size_t np = model.n_params();
  const std::size_t n_steps = grid.n_steps;
  const double dt = cfg.dt;
  const bool rk4 = cfg.method == Method::Rk4;
  const bool em_noise = cfg.method == Method::EulerMaruyama && model.has_noise;

  detail::StepWork work(ns);
  TrackedVector<double> states((n_steps + 1) * ns);
  TrackedVector<double> stages(rk4 ? n_steps * 3 * ns : 0);
  std::copy(x0.begin(), x0.end(), states.begin());
  detail::check_finite(x0, 0);
  for (std::size_t n = 0; n < n_steps; ++n) {
    std::span<double> next(states.data() + (n + 1) * ns, ns);
    std::copy(states.begin() + n * ns, states.begin() + (n + 1) * ns, next.begin());
    std::span<double> st = rk4 ? std::span<double>(stages.data() + n * 3 * ns, 3 * ns)
                               : std::span<double>();
    detail::step(dyn, cfg.method, next, n, dt, cfg.noise_seed, work, st);
    detail::check_finite(next, n + 1);
  }

  GradResult out;
  out.readouts = Matrix(model.n_readouts(), model.n_outputs());
  for (std::size_t r = 0; r < grid.readout_steps.size(); ++r) {
    const std::size_t k = grid.readout_steps[r];
    dyn.readout(std::span<const double>(states.data() + k * ns, ns), static_cast<double>(k) * dt,
                out.readouts.row(r));
  }
  Matrix d_readouts;
  out.loss = loss.evaluate(out.readouts, &d_readouts);
  out.grad.assign(np, 0.0);

  TrackedVector<double> a(ns, 0.0), acc(ns), kb(ns), yb(ns);
  std::size_t next_readout = grid.readout_steps.size();
  auto apply_jumps = [&](std::size_t k) {
    while (next_readout > 0 && grid.readout_steps[next_readout - 1] == k) {
      --next_readout;
      detail::readout_jump(dyn, std::span<const double>(states.data() + k * ns, ns),
                           static_cast<double>(k) * dt, d_readouts.row(next_readout), a, out.grad);
    }
  };

  apply_jumps(n_steps);
  for (std::size_t n = n_steps; n-- > 0;) {
    const std::span<const double> x(states.data() + n * ns, ns);
    const double t = static_cast<double>(n) * dt;
    std::copy(a.begin(), a.end(), acc.begin());
    if (!rk4) {
      for (std::size_t i = 0; i < ns; ++i) kb[i] = dt * a[i];
      dyn.derivative_vjp(x, t, kb, acc, out.grad);
      if (em_noise) {
        detail::wiener_increment(cfg.noise_seed, n, dt, work.xi);
        for (std::size_t i = 0; i < ns; ++i) kb[i] = work.xi[i] * a[i];
        dyn.noise_vjp(x, t, kb, acc, out.grad);
      }
    } else {
      const double* y = stages.data() + n * 3 * ns;
      const std::span<const double> y2(y, ns), y3(y + ns, ns), y4(y + 2 * ns, ns);
      // Stage k4 = f(y4), y4 = x + dt k3.
      for (std::size_t i = 0; i < ns; ++i) kb[i] = dt / 6.0 * a[i];
      std::fill(yb.begin(), yb.end(), 0.0);
      dyn.derivative_vjp(y4, t + dt, kb, yb, out.grad);
      for (std::size_t i = 0; i < ns; ++i) {
        acc[i] += yb[i];
        kb[i] = dt / 3.0 * a[i] + dt * yb[i];
      }
      // Stage k3 = f(y3), y3 = x + dt/2 k2.
      std::fill(yb.begin(), yb.end(), 0.0);
      dyn.derivative_vjp(y3, t + 0.5 * dt, kb, yb, out.grad);
      for (std::size_t i = 0; i < ns; ++i) {
        acc[i] += yb[i];
        kb[i] = dt / 3.0 * a[i] + 0.5 * dt * yb[i];
      }
      // Stage k2 = f(y2), y2 = x + dt/2 k1.
      std::fill(yb.begin(), yb.end(), 0.0);
      dyn.derivative_vjp(y2, t + 0.5 * dt, kb, yb, out.grad);
      for (std::size_t i = 0; i < ns; ++i) {
        acc[i] += yb[i];
        kb[i] = dt / 6.0 * a[i] + 0.5 * dt * yb[i];
      }
      dyn.derivative_vjp(x, t, kb, acc, out.grad);
    }
    std::swap(a, acc);
    apply_jumps(n);
  }
  return out;
}

struct AdjointOptions {
  /// Maximum |x_reconstructed - x_forward| / (1 + |x_forward|) at any readout or t = 0.
  double reconstruction_tol = 1e-3;
};

/// Continuous adjoint: integrates (x, a, u) backward from the last readout with
/// the configured ODE method, re-deriving x on the fly. Workspace size does not
/// depend on the step count.
inline GradResult grad_adjoint(const CompiledModel& model, std::span<const double> params,
                               std::span<const double> delta, std::span<const double> inputs,
                               std::span<const double> x0, const SolveConfig& cfg,
                               const LossSpec& loss, const AdjointOptions& opt = {}) {
  if (cfg.method == Method::EulerMaruyama) {
    throw ConfigError("the continuous adjoint supports ODE methods only (euler, rk4)");
  }
  detail::check_x0(model, x0);
  const Grid grid = make_grid(model, cfg);
  detail::Dynamics dyn(model, params, delta, inputs);
  const std::size_t ns = model.n_states();
  const std::size_t np = model.n_params();
  const std::size_t nr = model.n_readouts();
  const double dt = cfg.dt;
  const std::size_t last = grid.readout_steps.back();

  // Forward pass keeps only the states at readout times.
  detail::StepWork work(ns);
  TrackedVector<double> x(x0.begin(), x0.end());
  TrackedVector<double> at_readout(nr * ns);
  detail::check_finite(x, 0);
  std::size_t r = 0;
  for (std::size_t n = 0;; ++n) {
    while (r < nr && grid.readout_steps[r] == n) {
      std::copy(x.begin(), x.end(), at_readout.begin() + r * ns);
      ++r;
    }
    if (n == last) break;
    detail::step(dyn, cfg.method, x, n, dt, 0, work);
    detail::check_finite(x, n + 1);
  }

  GradResult out;
  out.readouts = Matrix(nr, model.n_outputs());
  for (std::size_t k = 0; k < nr; ++k) {
    dyn.readout(std::span<const double>(at_readout.data() + k * ns, ns),
                static_cast<double>(grid.readout_steps[k]) * dt, out.readouts.row(k));
  }
  Matrix d_readouts;
  out.loss = loss.evaluate(out.readouts, &d_readouts);
  out.grad.assign(np, 0.0);

  // Augmented state z = (x, a, u), stored contiguously.
  const std::size_t nz = 2 * ns + np;
  TrackedVector<double> z(nz, 0.0), z_in(nz), k1(nz), k2(nz), k3(nz), k4(nz);
  std::copy(x.begin(), x.end(), z.begin());
  auto aug = [&](std::span<const double> zz, double t, std::span<double> dz) {
    std::fill(dz.begin(), dz.end(), 0.0);
    const std::span<const double> xs = zz.subspan(0, ns);
    const std::span<const double> as = zz.subspan(ns, ns);
    std::span<double> fx = dz.subspan(0, ns);
    std::span<double> da = dz.subspan(ns, ns);
    std::span<double> du = dz.subspan(2 * ns, np);
    dyn.derivative_vjp(xs, t, as, da, du, fx);
    for (std::size_t i = ns; i < nz; ++i) dz[i] = -dz[i];
  };
  auto check_reconstruction = [&](std::span<const double> ref, std::size_t step) {
    double worst = 0.0;
    for (std::size_t i = 0; i < ns; ++i) {
      worst = std::max(worst, std::abs(z[i] - ref[i]) / (1.0 + std::abs(ref[i])));
    }
    if (!(worst <= opt.reconstruction_tol)) {
      throw AdjointInstabilityError(
          "adjoint backward reconstruction diverged at step " + std::to_string(step) +
              " (relative deviation " + std::to_string(worst) + ")",
          step);
    }
  };

  std::size_t next_readout = nr;
  auto apply_jumps = [&](std::size_t k) {
    while (next_readout > 0 && grid.readout_steps[next_readout - 1] == k) {
      --next_readout;
      const std::span<const double> ref(at_readout.data() + next_readout * ns, ns);
      check_reconstruction(ref, k);
      // Resynchronize x with the stored forward value before jumping a.
      std::copy(ref.begin(), ref.end(), z.begin());
      detail::readout_jump(dyn, ref, static_cast<double>(k) * dt, d_readouts.row(next_readout),
                           std::span<double>(z.data() + ns, ns), out.grad);
    }
  };

  apply_jumps(last);
  const double h = -dt;
  for (std::size_t n = last; n > 0; --n) {
    const double t = static_cast<double>(n) * dt;
    if (cfg.method == Method::Euler) {
      aug(z, t, k1);
      for (std::size_t i = 0; i < nz; ++i) z[i] += h * k1[i];
    } else {
      aug(z, t, k1);
      for (std::size_t i = 0; i < nz; ++i) z_in[i] = z[i] + 0.5 * h * k1[i];
      aug(z_in, t + 0.5 * h, k2);
      for (std::size_t i = 0; i < nz; ++i) z_in[i] = z[i] + 0.5 * h * k2[i];
      aug(z_in, t + 0.5 * h, k3);
      for (std::size_t i = 0; i < nz; ++i) z_in[i] = z[i] + h * k3[i];
      aug(z_in, t + h, k4);
      for (std::size_t i = 0; i < nz; ++i) {
        z[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
      }
    }
    detail::check_finite(z, n - 1);
    apply_jumps(n - 1);
  }
  check_reconstruction(x0, 0);
  for (std::size_t j = 0; j < np; ++j) out.grad[j] += z[2 * ns + j];
  return out;
}

enum class GradMethod { Backprop, Adjoint };

inline const char* to_string(GradMethod m) {
  return m == GradMethod::Adjoint ? "adjoint" : "backprop";
}

inline GradMethod parse_grad_method(const std::string& s) {
  if (s == "backprop") return GradMethod::Backprop;
  if (s == "adjoint") return GradMethod::Adjoint;
  throw ConfigError("unknown gradient method '" + s + "' (expected backprop|adjoint)");
}

inline GradResult grad_physical(GradMethod method, const CompiledModel& model,
                                std::span<const double> params, std::span<const double> delta,
                                std::span<const double> inputs, std::span<const double> x0,
                                const SolveConfig& cfg, const LossSpec& loss) {
  return method == GradMethod::Adjoint ? grad_adjoint(model, params, delta, inputs, x0, cfg, loss)
                                       : grad_backprop(model, params, delta, inputs, x0, cfg, loss);
}

/// One training or evaluation example.
struct BatchItem {
  std::vector<double> inputs;
  Matrix targets;
  std::vector<double> x0;
};

struct GradEstimate {
  std::vector<double> grad;  // over raw trainables
  double loss_mean = 0.0;
  double loss_std = 0.0;
  std::size_t n_samples = 0;
};

struct McOptions {
  std::size_t n_mismatch = 1;
  std::uint64_t seed = 0;
  SolveConfig solve;
  GradMethod method = GradMethod::Backprop;
  double tau = 1.0;
  /// Reuse one Gumbel draw for every sample of a call instead of a fresh draw per sample.
  bool freeze_gumbel = false;
  std::size_t workers = 1;
};

/// Random draws of one Monte Carlo sample (batch item b, mismatch sample s).
struct SampleDraw {
  std::vector<double> delta;
  std::uint64_t gumbel_seed = 0;
  std::uint64_t noise_seed = 0;
};

inline SampleDraw draw_sample(const CompiledModel& model, const McOptions& opt, std::size_t b,
                              std::size_t s) {
  const std::uint64_t base = derive_seed(opt.seed, {b, s});
  SampleDraw d;
  Rng mrng(derive_seed(base, {stream::kMismatch}));
  d.delta = sample_mismatch(model.sigmas(), mrng);
  d.gumbel_seed = opt.freeze_gumbel ? derive_seed(opt.seed, {stream::kGumbel})
                                    : derive_seed(base, {stream::kGumbel});
  d.noise_seed = derive_seed(base, {stream::kNoise});
  return d;
}

inline double sample_std(std::span<const double> v, double mean) {
  if (v.size() < 2) return 0.0;
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

inline std::string sample_label(std::size_t b, std::size_t s) {
  return "sample (batch item " + std::to_string(b) + ", mismatch draw " + std::to_string(s) + ")";
}

/// Rethrows library errors with the sample identifier prepended.
template <class F>
auto with_sample_context(std::size_t b, std::size_t s, F&& f) -> decltype(f()) {
  return with_error_context(sample_label(b, s), std::forward<F>(f));
}

/// Monte Carlo gradient over raw trainables, averaged over every
/// (batch item, mismatch draw) pair. Per-sample randomness is derived from
/// (seed, b, s) only, and reduction runs in index order, so the result does
/// not depend on the worker count.
inline GradEstimate mc_grad(const CompiledModel& model, const TrainableStore& store,
                            std::span<const BatchItem> batch, const LossSpec& loss,
                            const McOptions& opt) {
  if (batch.empty()) throw ConfigError("mc_grad needs a nonempty batch");
  if (opt.n_mismatch == 0) throw ConfigError("n_mismatch must be >= 1");
  store.check(model);
  const std::size_t S = opt.n_mismatch;
  const std::size_t n = batch.size() * S;
  std::vector<std::vector<double>> grads(n);
  std::vector<double> losses(n);
  parallel_for(n, opt.workers, [&](std::size_t task) {
    const std::size_t b = task / S, s = task % S;
    with_sample_context(b, s, [&] {
      const SampleDraw d = draw_sample(model, opt, b, s);
      Rng grng(d.gumbel_seed);
      const ParamMap pm = map_params(model, store, ParamMode::Relaxed, opt.tau, &grng);
      SolveConfig cfg = opt.solve;
      cfg.noise_seed = d.noise_seed;
      const auto& item = batch[b];
      const LossSpec l = loss.with_targets(item.targets);
      const GradResult g =
          grad_physical(opt.method, model, pm.values, d.delta, item.inputs, item.x0, cfg, l);
      grads[task].assign(store.size(), 0.0);
      pullback_params(model, store, pm, g.grad, grads[task]);
      losses[task] = g.loss;
    });
  });
  GradEstimate est;
  est.grad.assign(store.size(), 0.0);
  for (std::size_t task = 0; task < n; ++task) {
    for (std::size_t j = 0; j < store.size(); ++j) est.grad[j] += grads[task][j];
    est.loss_mean += losses[task];
  }
  for (auto& g : est.grad) g /= static_cast<double>(n);
  est.loss_mean /= static_cast<double>(n);
  est.loss_std = sample_std(losses, est.loss_mean);
  est.n_samples = n;
  return est;
}

struct LossEstimate {
  double mean = 0.0;
  double std = 0.0;
  std::vector<double> per_sample;  // index b * n_mismatch + s
};

/// Forward-only Monte Carlo loss. Hard mode evaluates discrete trainables at
/// their argmax level; Relaxed draws Gumbel noise as in training.
inline LossEstimate mc_loss(const CompiledModel& model, const TrainableStore& store,
                            std::span<const BatchItem> batch, const LossSpec& loss,
                            const McOptions& opt, ParamMode mode = ParamMode::Hard) {
  if (batch.empty()) throw ConfigError("mc_loss needs a nonempty batch");
  if (opt.n_mismatch == 0) throw ConfigError("n_mismatch must be >= 1");
  const std::size_t S = opt.n_mismatch;
  const std::size_t n = batch.size() * S;
  LossEstimate est;
  est.per_sample.resize(n);
  parallel_for(n, opt.workers, [&](std::size_t task) {
    const std::size_t b = task / S, s = task % S;
    with_sample_context(b, s, [&] {
      const SampleDraw d = draw_sample(model, opt, b, s);
      Rng grng(d.gumbel_seed);
      const ParamMap pm = map_params(model, store, mode, opt.tau, &grng);
      SolveConfig cfg = opt.solve;
      cfg.noise_seed = d.noise_seed;
      const auto& item = batch[b];
      const Trajectory tr = solve(model, pm.values, d.delta, item.inputs, item.x0, cfg);
      est.per_sample[task] = loss.with_targets(item.targets).evaluate(tr.readouts, nullptr);
    });
  });
  for (double v : est.per_sample) est.mean += v;
  est.mean /= static_cast<double>(n);
  est.std = sample_std(est.per_sample, est.mean);
  return est;
}

}  // namespace diffanalog
