#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "diffanalog/common.hpp"
#include "diffanalog/random.hpp"

namespace diffanalog {

/// delta_k ~ N(1, sigma_k^2), independent. A zero sigma yields exactly 1.
inline std::vector<double> sample_mismatch(std::span<const double> sigmas, Rng& rng) {
  std::vector<double> delta(sigmas.size());
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t k = 0; k < sigmas.size(); ++k) {
    if (sigmas[k] < 0.0) throw ModelError("mismatch sigma must be >= 0");
    const double z = normal(rng);
    delta[k] = sigmas[k] == 0.0 ? 1.0 : 1.0 + sigmas[k] * z;
  }
  return delta;
}

/// g ~ Gumbel(0, 1) via -log(-log(U)).
inline std::vector<double> sample_gumbel(std::size_t n, Rng& rng) {
  std::vector<double> g(n);
  for (auto& x : g) x = -std::log(-std::log(uniform_open(rng)));
  return g;
}

struct GumbelSample {
  double value = 0.0;
  std::vector<double> weights;
};

/// Relaxed one-hot y = softmax((logits + g) / tau) and value = y^T levels, with
/// the Gumbel perturbation supplied by the caller.
inline GumbelSample gumbel_softmax_with_noise(std::span<const double> logits,
                                              std::span<const double> levels, double tau,
                                              std::span<const double> gumbel) {
  if (!(tau > 0.0)) throw ModelError("gumbel-softmax temperature must be > 0");
  if (logits.size() != levels.size() || gumbel.size() != levels.size()) {
    throw ModelError("gumbel-softmax: logits, levels and noise must have equal length");
  }
  GumbelSample s;
  s.weights.resize(levels.size());
  double peak = -INFINITY;
  for (std::size_t i = 0; i < levels.size(); ++i) {
    s.weights[i] = (logits[i] + gumbel[i]) / tau;
    peak = std::max(peak, s.weights[i]);
  }
  double z = 0.0;
  for (auto& w : s.weights) {
    w = std::exp(w - peak);
    z += w;
  }
  for (std::size_t i = 0; i < levels.size(); ++i) {
    s.weights[i] /= z;
    s.value += s.weights[i] * levels[i];
  }
  return s;
}

inline GumbelSample gumbel_softmax(std::span<const double> logits, std::span<const double> levels,
                                   double tau, Rng& rng) {
  if (!(tau > 0.0)) throw ModelError("gumbel-softmax temperature must be > 0");
  const auto g = sample_gumbel(levels.size(), rng);
  return gumbel_softmax_with_noise(logits, levels, tau, g);
}

/// d(value)/d(logit_j) = y_j (p_j - value) / tau, accumulated into `out` scaled by `upstream`.
inline void gumbel_value_vjp(const GumbelSample& s, std::span<const double> levels, double tau,
                             double upstream, std::span<double> out) {
  for (std::size_t j = 0; j < levels.size(); ++j) {
    out[j] += upstream * s.weights[j] * (levels[j] - s.value) / tau;
  }
}

/// levels[argmax logits]; ties go to the lower index.
inline double harden(std::span<const double> logits, std::span<const double> levels) {
  if (logits.empty() || logits.size() != levels.size()) {
    throw ModelError("harden: logits and levels must be nonempty and equal length");
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return levels[best];
}

/// Normalized raw value in [-1, 1] to physical value in [lo, hi].
inline double bound_transform(double raw, double lo, double hi) {
  return lo + (raw + 1.0) * 0.5 * (hi - lo);
}

inline double bound_inverse(double value, double lo, double hi) {
  return 2.0 * (value - lo) / (hi - lo) - 1.0;
}

inline double bound_slope(double lo, double hi) { return 0.5 * (hi - lo); }

inline double clip_unit(double raw) { return std::clamp(raw, -1.0, 1.0); }

/// 2^bits uniformly spaced levels spanning [-1, 1] inclusive.
inline std::vector<double> dac_levels(int bits) {
  if (bits < 1 || bits > 16) throw ConfigError("DAC bit width must be in [1, 16]");
  const std::size_t n = std::size_t{1} << bits;
  std::vector<double> levels(n);
  for (std::size_t i = 0; i < n; ++i) {
    levels[i] = -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(n - 1);
  }
  return levels;
}

/// Index of the level nearest to v; ties go to the lower level.
inline std::size_t nearest_level(double v, std::span<const double> levels) {
  std::size_t best = 0;
  double best_d = std::abs(v - levels[0]);
  for (std::size_t i = 1; i < levels.size(); ++i) {
    const double d = std::abs(v - levels[i]);
    if (d < best_d - 1e-12) {
      best = i;
      best_d = d;
    }
  }
  return best;
}

/// Gumbel-Softmax temperature annealing.
struct TauSchedule {
  enum class Mode { Exponential, Linear };

  double tau_start = 10.0;
  double tau_end = 1.0;
  std::size_t n_steps = 64;
  Mode mode = Mode::Exponential;

  void validate() const {
    if (!(tau_start > 0.0) || !(tau_end > 0.0)) throw ConfigError("tau must be > 0");
    if (tau_end > tau_start) throw ConfigError("tau_end must not exceed tau_start");
    if (n_steps == 0) throw ConfigError("tau schedule needs at least one step");
  }

  double tau(std::size_t step) const {
    if (n_steps <= 1) return tau_start;
    if (step + 1 >= n_steps) return tau_end;
    const double f = static_cast<double>(step) / static_cast<double>(n_steps - 1);
    if (mode == Mode::Linear) return tau_start + f * (tau_end - tau_start);
    return tau_start * std::pow(tau_end / tau_start, f);
  }
};

inline const char* to_string(TauSchedule::Mode m) {
  return m == TauSchedule::Mode::Linear ? "linear" : "exponential";
}

}  // namespace diffanalog
