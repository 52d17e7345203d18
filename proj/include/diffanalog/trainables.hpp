#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "diffanalog/model.hpp"
#include "diffanalog/random.hpp"
#include "diffanalog/relax.hpp"

namespace diffanalog {

enum class RawKind : std::uint8_t { Analog, Logit, Frozen };

/// Raw optimizer-space values for a model's trainables: analog values live in
/// the normalized [-1, 1] space, discrete trainables as one logit per level.
struct TrainableStore {
  std::vector<double> raw;
  std::vector<RawKind> kinds;
  std::vector<std::size_t> offsets;  // first raw slot of each trainable

  std::size_t size() const { return raw.size(); }

  static TrainableStore init(const CompiledModel& model) {
    TrainableStore s;
    for (const auto& t : model.trainables) {
      s.offsets.push_back(s.raw.size());
      if (t.is_analog()) {
        const auto& a = t.analog();
        s.raw.push_back(bound_inverse(a.init, a.lo, a.hi));
        s.kinds.push_back(t.frozen ? RawKind::Frozen : RawKind::Analog);
      } else {
        for (double l : t.discrete().init_logits) {
          s.raw.push_back(l);
          s.kinds.push_back(t.frozen ? RawKind::Frozen : RawKind::Logit);
        }
      }
    }
    return s;
  }

  std::span<const double> slot(const CompiledModel& model, std::size_t trainable) const {
    const auto& t = model.trainables[trainable];
    const std::size_t n = t.is_analog() ? 1 : t.discrete().levels.size();
    return {raw.data() + offsets[trainable], n};
  }

  std::span<double> slot(const CompiledModel& model, std::size_t trainable) {
    const auto& t = model.trainables[trainable];
    const std::size_t n = t.is_analog() ? 1 : t.discrete().levels.size();
    return {raw.data() + offsets[trainable], n};
  }

  void check(const CompiledModel& model) const {
    std::size_t n = 0;
    for (const auto& t : model.trainables) n += t.is_analog() ? 1 : t.discrete().levels.size();
    if (n != raw.size() || kinds.size() != raw.size() || offsets.size() != model.n_params()) {
      throw ModelError("trainable store layout does not match the model");
    }
  }
};

enum class ParamMode { Relaxed, Hard };

/// Physical parameter values derived from a store, plus what the chain rule
/// back to raw space needs.
struct ParamMap {
  std::vector<double> values;
  std::vector<GumbelSample> relaxed;  // per trainable; empty for analog or hard
  double tau = 1.0;
};

/// Raw -> physical. Relaxed mode draws fresh Gumbel noise from `gumbel` for
/// every discrete trainable; Hard mode takes the argmax level.
inline ParamMap map_params(const CompiledModel& model, const TrainableStore& store, ParamMode mode,
                           double tau, Rng* gumbel) {
  store.check(model);
  ParamMap pm;
  pm.tau = tau;
  pm.values.resize(model.n_params());
  pm.relaxed.resize(model.n_params());
  for (std::size_t i = 0; i < model.n_params(); ++i) {
    const auto& t = model.trainables[i];
    const auto raw = store.slot(model, i);
    if (t.is_analog()) {
      const auto& a = t.analog();
      pm.values[i] = bound_transform(clip_unit(raw[0]), a.lo, a.hi);
    } else if (mode == ParamMode::Hard) {
      pm.values[i] = harden(raw, t.discrete().levels);
    } else {
      if (gumbel == nullptr) throw ModelError("relaxed discrete parameters need a Gumbel stream");
      pm.relaxed[i] = gumbel_softmax(raw, t.discrete().levels, tau, *gumbel);
      pm.values[i] = pm.relaxed[i].value;
    }
  }
  return pm;
}

/// Accumulates d(loss)/d(raw) given d(loss)/d(physical). Frozen slots receive 0.
inline void pullback_params(const CompiledModel& model, const TrainableStore& store,
                            const ParamMap& pm, std::span<const double> d_values,
                            std::span<double> d_raw) {
  for (std::size_t i = 0; i < model.n_params(); ++i) {
    const auto& t = model.trainables[i];
    const std::size_t off = store.offsets[i];
    if (t.frozen) continue;
    if (t.is_analog()) {
      d_raw[off] += d_values[i] * bound_slope(t.analog().lo, t.analog().hi);
    } else if (!pm.relaxed[i].weights.empty()) {
      const auto& levels = t.discrete().levels;
      gumbel_value_vjp(pm.relaxed[i], levels, pm.tau, d_values[i], d_raw.subspan(off, levels.size()));
    }
  }
}

}  // namespace diffanalog
