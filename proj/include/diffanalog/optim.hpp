#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "diffanalog/common.hpp"
#include "diffanalog/gradient.hpp"
#include "diffanalog/io.hpp"
#include "diffanalog/random.hpp"
#include "diffanalog/relax.hpp"
#include "diffanalog/trainables.hpp"

namespace diffanalog {

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t step = 0;
  double lr = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState fresh(std::size_t n, double lr) {
    AdamState s;
    s.m.assign(n, 0.0);
    s.v.assign(n, 0.0);
    s.lr = lr;
    return s;
  }
};

/// One bias-corrected Adam update in raw space. Analog raw values are clipped
/// to [-1, 1] afterwards; logits are left unclipped; frozen slots never move.
inline void adam_step(TrainableStore& store, std::span<const double> grad, AdamState& st) {
  const std::size_t n = store.size();
  if (grad.size() != n || st.m.size() != n || st.v.size() != n) {
    throw ConfigError("adam_step: gradient/state sizes do not match the trainable store");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(grad[i])) {
      throw Error("non-finite gradient entry " + std::to_string(i) + " at optimizer step " +
                  std::to_string(st.step));
    }
  }
  ++st.step;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < n; ++i) {
    if (store.kinds[i] == RawKind::Frozen) continue;
    st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * grad[i];
    st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * grad[i] * grad[i];
    const double mhat = st.m[i] / c1;
    const double vhat = st.v[i] / c2;
    store.raw[i] -= st.lr * mhat / (std::sqrt(vhat) + st.eps);
    if (store.kinds[i] == RawKind::Analog) store.raw[i] = clip_unit(store.raw[i]);
  }
}

struct HistoryRow {
  std::size_t step = 0;
  double loss_mean = 0.0;
  double loss_std = 0.0;
  double grad_norm = 0.0;
  double tau = 1.0;
};

struct TrainConfig {
  std::size_t n_steps = 64;
  double lr = 0.1;
  std::optional<TauSchedule> tau;  // only meaningful with discrete trainables
};

/// Everything needed to resume a run.
struct TrainState {
  TrainableStore store;
  AdamState adam;
  std::size_t next_step = 0;  // RNG streams are counter-based on the step index
  TrainableStore best;
  double best_loss = std::numeric_limits<double>::infinity();
  std::size_t best_step = 0;
  std::vector<HistoryRow> history;
};

inline TrainState start_training(const TrainableStore& init, const TrainConfig& cfg) {
  TrainState st;
  st.store = init;
  st.best = init;
  st.adam = AdamState::fresh(init.size(), cfg.lr);
  return st;
}

/// Objective: GradEstimate(const TrainableStore&, std::size_t step, double tau).
/// The loss reported for step k is measured at the parameters before update k,
/// so the best checkpoint is the store that produced the lowest training loss.
/// `on_step` is called after every update (e.g. to write a checkpoint).
template <class Objective>
void train_steps(TrainState& st, const TrainConfig& cfg, Objective&& objective,
                 std::size_t until_step,
                 const std::function<void(const TrainState&)>& on_step = {}) {
  if (cfg.tau) cfg.tau->validate();
  until_step = std::min(until_step, cfg.n_steps);
  for (std::size_t k = st.next_step; k < until_step; ++k) {
    const double tau = cfg.tau ? cfg.tau->tau(k) : 1.0;
    const std::string where = "training step " + std::to_string(k);
    GradEstimate g = with_error_context(where, [&] { return objective(std::as_const(st.store), k, tau); });
    if (!std::isfinite(g.loss_mean)) {
      throw Error(where + ": non-finite loss");
    }
    HistoryRow row{k, g.loss_mean, g.loss_std,
                   std::sqrt(std::inner_product(g.grad.begin(), g.grad.end(), g.grad.begin(), 0.0)),
                   tau};
    st.history.push_back(row);
    if (g.loss_mean < st.best_loss) {
      st.best_loss = g.loss_mean;
      st.best_step = k;
      st.best = st.store;
    }
    with_error_context(where, [&] { adam_step(st.store, g.grad, st.adam); });
    st.next_step = k + 1;
    if (on_step) on_step(st);
  }
}

template <class Objective>
TrainState train(const TrainableStore& init, const TrainConfig& cfg, Objective&& objective) {
  TrainState st = start_training(init, cfg);
  train_steps(st, cfg, std::forward<Objective>(objective), cfg.n_steps);
  return st;
}

/// Standard objective: per step, draw a batch from the dataset and return the
/// Monte Carlo gradient with freshly derived mismatch/noise/Gumbel samples.
struct McObjective {
  const CompiledModel* model = nullptr;
  const std::vector<BatchItem>* dataset = nullptr;
  LossSpec loss;
  std::size_t batch_size = 1;
  McOptions mc;  // mc.seed is the run seed; per-step seeds derive from it

  /// Indices of the batch for `step`: a seeded partial shuffle, or the whole
  /// dataset in order when it is not larger than the batch.
  std::vector<std::size_t> batch_indices(std::size_t step) const {
    std::vector<std::size_t> idx(dataset->size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (batch_size >= idx.size()) return idx;
    Rng rng(derive_seed(mc.seed, {stream::kBatch, step}));
    for (std::size_t i = 0; i < batch_size; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
      std::swap(idx[i], idx[pick(rng)]);
    }
    idx.resize(batch_size);
    return idx;
  }

  GradEstimate operator()(const TrainableStore& store, std::size_t step, double tau) const {
    if (dataset == nullptr || dataset->empty()) throw ConfigError("training dataset is empty");
    std::vector<BatchItem> batch;
    for (std::size_t i : batch_indices(step)) batch.push_back((*dataset)[i]);
    McOptions opt = mc;
    opt.seed = derive_seed(mc.seed, {stream::kNoise, step});
    opt.tau = tau;
    return mc_grad(*model, store, batch, loss, opt);
  }
};

inline std::string history_csv(const std::vector<HistoryRow>& rows, const std::string& provenance) {
  io::CsvWriter w({"step", "loss_mean", "loss_std", "grad_norm", "tau"}, provenance);
  for (const auto& r : rows) {
    w.row(std::vector<std::string>{std::to_string(r.step), io::fmt(r.loss_mean),
                                   io::fmt(r.loss_std), io::fmt(r.grad_norm), io::fmt(r.tau)});
  }
  return w.str();
}

namespace detail {

inline nlohmann::json store_json(const TrainableStore& s) {
  nlohmann::json kinds = nlohmann::json::array();
  for (auto k : s.kinds) kinds.push_back(k == RawKind::Analog ? "analog" : k == RawKind::Logit ? "logit" : "frozen");
  return {{"raw", s.raw}, {"kinds", kinds}, {"offsets", s.offsets}};
}

inline TrainableStore store_from_json(const nlohmann::json& j) {
  TrainableStore s;
  s.raw = j.at("raw").get<std::vector<double>>();
  s.offsets = j.at("offsets").get<std::vector<std::size_t>>();
  for (const auto& k : j.at("kinds")) {
    const auto name = k.get<std::string>();
    if (name == "analog") s.kinds.push_back(RawKind::Analog);
    else if (name == "logit") s.kinds.push_back(RawKind::Logit);
    else if (name == "frozen") s.kinds.push_back(RawKind::Frozen);
    else throw ConfigError("checkpoint: unknown raw kind '" + name + "'");
  }
  if (s.kinds.size() != s.raw.size()) throw ConfigError("checkpoint: kinds/raw length mismatch");
  return s;
}

}  // namespace detail

inline nlohmann::json checkpoint_json(const TrainState& st) {
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& r : st.history) {
    hist.push_back({r.step, r.loss_mean, r.loss_std, r.grad_norm, r.tau});
  }
  return {
      {"store", detail::store_json(st.store)},
      {"adam",
       {{"m", st.adam.m}, {"v", st.adam.v}, {"step", st.adam.step}, {"lr", st.adam.lr},
        {"beta1", st.adam.beta1}, {"beta2", st.adam.beta2}, {"eps", st.adam.eps}}},
      {"next_step", st.next_step},
      {"best", detail::store_json(st.best)},
      {"best_loss", std::isfinite(st.best_loss) ? nlohmann::json(st.best_loss) : nlohmann::json()},
      {"best_step", st.best_step},
      {"history", hist},
  };
}

inline TrainState checkpoint_from_json(const nlohmann::json& j) {
  try {
    TrainState st;
    st.store = detail::store_from_json(j.at("store"));
    const auto& a = j.at("adam");
    st.adam.m = a.at("m").get<std::vector<double>>();
    st.adam.v = a.at("v").get<std::vector<double>>();
    st.adam.step = a.at("step").get<std::size_t>();
    st.adam.lr = a.at("lr").get<double>();
    st.adam.beta1 = a.at("beta1").get<double>();
    st.adam.beta2 = a.at("beta2").get<double>();
    st.adam.eps = a.at("eps").get<double>();
    st.next_step = j.at("next_step").get<std::size_t>();
    st.best = detail::store_from_json(j.at("best"));
    st.best_loss = j.at("best_loss").is_null() ? std::numeric_limits<double>::infinity()
                                               : j.at("best_loss").get<double>();
    st.best_step = j.at("best_step").get<std::size_t>();
    for (const auto& r : j.at("history")) {
      st.history.push_back({r.at(0).get<std::size_t>(), r.at(1).get<double>(), r.at(2).get<double>(),
                            r.at(3).get<double>(), r.at(4).get<double>()});
    }
    return st;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(const std::filesystem::path& path, const TrainState& st) {
  io::write_file(path, checkpoint_json(st).dump(2) + "\n");
}

inline TrainState load_checkpoint(const std::filesystem::path& path) {
  try {
    return checkpoint_from_json(nlohmann::json::parse(io::read_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

}  // namespace diffanalog
