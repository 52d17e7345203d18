#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "diffanalog/gradient.hpp"
#include "diffanalog/model.hpp"
#include "diffanalog/optim.hpp"
#include "diffanalog/random.hpp"
#include "diffanalog/relax.hpp"
#include "diffanalog/solver.hpp"

/// Oscillator-based pattern recognizer on a grid with nearest-neighbor
/// couplers. Phases are in units of pi; pixels are 0 (black) or 1 (white).
namespace diffanalog::obc {

/// Row-major pixels of one stored pattern.
using Pattern = std::vector<double>;

struct PatternSet {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<Pattern> patterns;

  void validate() const {
    if (patterns.empty()) throw ConfigError("pattern set is empty");
    for (const auto& p : patterns) {
      if (p.size() != rows * cols) throw ConfigError("pattern size does not match the grid");
      for (double v : p) {
        if (v != 0.0 && v != 1.0) throw ConfigError("pattern pixels must be 0 or 1");
      }
    }
  }
};

/// Parses ASCII 0/1 grids separated by blank lines. '#' starts a comment line.
inline PatternSet parse_patterns(const std::string& text) {
  PatternSet set;
  Pattern current;
  std::size_t rows = 0;
  auto flush = [&] {
    if (rows == 0) return;
    if (set.patterns.empty()) {
      set.rows = rows;
      set.cols = current.size() / rows;
    } else if (rows != set.rows || current.size() != set.rows * set.cols) {
      throw ConfigError("all patterns must have the same shape");
    }
    set.patterns.push_back(current);
    current.clear();
    rows = 0;
  };
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty() && line[0] == '#') continue;
    if (line.find_first_not_of(" \t") == std::string::npos) {
      flush();
      continue;
    }
    std::size_t width = 0;
    for (char c : line) {
      if (c == '0' || c == '1') {
        current.push_back(c == '1' ? 1.0 : 0.0);
        ++width;
      } else if (c != ' ' && c != '\t') {
        throw ConfigError(std::string("pattern file: unexpected character '") + c + "'");
      }
    }
    if (rows > 0 && width * (rows + 1) != current.size()) {
      throw ConfigError("pattern file: ragged rows");
    }
    ++rows;
  }
  flush();
  set.validate();
  return set;
}

inline std::string format_patterns(const PatternSet& set) {
  std::string out;
  for (std::size_t p = 0; p < set.patterns.size(); ++p) {
    if (p > 0) out += "\n";
    for (std::size_t r = 0; r < set.rows; ++r) {
      for (std::size_t c = 0; c < set.cols; ++c) {
        out += set.patterns[p][r * set.cols + c] == 1.0 ? '1' : '0';
      }
      out += "\n";
    }
  }
  return out;
}

/// Five 10x6 digit glyphs (0-4), black ink on white.
inline PatternSet default_digits() {
  static const char* const glyphs[5][10] = {
      {".####.", "#....#", "#....#", "#....#", "#....#", "#....#", "#....#", "#....#", "#....#", ".####."},
      {"..##..", ".###..", "..##..", "..##..", "..##..", "..##..", "..##..", "..##..", "..##..", ".####."},
      {".####.", "#....#", ".....#", ".....#", "....#.", "...#..", "..#...", ".#....", "#.....", "######"},
      {".####.", "#....#", ".....#", ".....#", "..###.", ".....#", ".....#", ".....#", "#....#", ".####."},
      {"....#.", "...##.", "..#.#.", ".#..#.", "#...#.", "######", "....#.", "....#.", "....#.", "....#."},
  };
  PatternSet set{10, 6, {}};
  for (const auto& g : glyphs) {
    Pattern p;
    for (const char* row : g) {
      for (const char* c = row; *c; ++c) p.push_back(*c == '#' ? 0.0 : 1.0);
    }
    set.patterns.push_back(std::move(p));
  }
  return set;
}

enum class Init { Random, Hebbian };

inline Init parse_init(const std::string& s) {
  if (s == "random") return Init::Random;
  if (s == "hebbian") return Init::Hebbian;
  throw ConfigError("unknown OBC init '" + s + "' (expected random|hebbian)");
}

inline const char* to_string(Init i) { return i == Init::Hebbian ? "hebbian" : "random"; }

struct ObcConfig {
  std::size_t rows = 10;
  std::size_t cols = 6;
  int bitwidth = 1;
  double noise_alpha = 0.025;
  bool locking_trainable = true;
  Init init = Init::Hebbian;
  double t_measure = 1.0;
  double dt = 1.0 / 256.0;
  double lock_init = 1.0;
  double lock_max = 4.0;
  /// Logit given to the Hebbian level in the initial distribution; other levels get 0.
  double hebbian_logit = 2.0;

  void validate() const {
    if (rows < 1 || cols < 1 || rows * cols < 2) throw ConfigError("OBC grid needs at least 2 cells");
    if (bitwidth < 1) throw ConfigError("OBC bitwidth must be >= 1");
    if (!(noise_alpha >= 0.0)) throw ConfigError("noise_alpha must be >= 0");
    if (!(lock_init >= 0.0 && lock_init <= lock_max)) throw ConfigError("lock_init outside [0, lock_max]");
  }

  SolveConfig solve_config() const {
    return {dt, t_measure, noise_alpha > 0.0 ? Method::EulerMaruyama : Method::Euler, 0};
  }
};

using Edge = std::pair<std::size_t, std::size_t>;

/// Undirected 4-neighborhood edges: for each cell in row-major order, its right
/// neighbor then its lower neighbor.
inline std::vector<Edge> grid_edges(std::size_t rows, std::size_t cols) {
  std::vector<Edge> edges;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t i = r * cols + c;
      if (c + 1 < cols) edges.emplace_back(i, i + 1);
      if (r + 1 < rows) edges.emplace_back(i, i + cols);
    }
  }
  return edges;
}

/// Hopfield outer-product rule with s = 2p - 1, scaled so the largest
/// off-diagonal magnitude is 1, restricted to `edges` and snapped to the
/// nearest DAC level (ties toward the lower level).
inline std::vector<double> hebbian_weights(const PatternSet& set, int bitwidth,
                                           const std::vector<Edge>& edges) {
  set.validate();
  const std::size_t n = set.rows * set.cols;
  const double m = static_cast<double>(set.patterns.size());
  auto k = [&](std::size_t i, std::size_t j) {
    double s = 0.0;
    for (const auto& p : set.patterns) s += (2.0 * p[i] - 1.0) * (2.0 * p[j] - 1.0);
    return s / m;
  };
  double peak = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) peak = std::max(peak, std::abs(k(i, j)));
  }
  const auto levels = dac_levels(bitwidth);
  std::vector<double> w;
  w.reserve(edges.size());
  for (const auto& [i, j] : edges) {
    const double v = peak > 0.0 ? k(i, j) / peak : 0.0;
    w.push_back(levels[nearest_level(v, levels)]);
  }
  return w;
}

/// Initial logits per edge: Hebbian puts `hebbian_logit` on the Hebbian level,
/// Random draws every logit from N(0, 1).
inline std::vector<std::vector<double>> initial_logits(const ObcConfig& cfg, const PatternSet& set,
                                                       std::uint64_t seed) {
  const auto edges = grid_edges(cfg.rows, cfg.cols);
  const auto levels = dac_levels(cfg.bitwidth);
  std::vector<std::vector<double>> logits(edges.size(), std::vector<double>(levels.size(), 0.0));
  if (cfg.init == Init::Hebbian) {
    const auto w = hebbian_weights(set, cfg.bitwidth, edges);
    for (std::size_t e = 0; e < edges.size(); ++e) {
      logits[e][nearest_level(w[e], levels)] = cfg.hebbian_logit;
    }
  } else {
    Rng rng(derive_seed(seed, {stream::kInit}));
    std::normal_distribution<double> normal(0.0, 1.0);
    for (auto& row : logits) {
      for (auto& v : row) v = normal(rng);
    }
  }
  return logits;
}

/// dx_i/dt = -sum_j k_ij sin(pi (x_i - x_j)) - l sin(2 pi x_i) + alpha xi_i.
/// Trainables: one shared discrete coupler per edge, then the locking weight "l".
/// Readout: fold(x_i) at t_measure for every oscillator.
inline CompiledModel build_obc(const ObcConfig& cfg, const std::vector<std::vector<double>>& logits) {
  cfg.validate();
  using namespace expr;
  const auto edges = grid_edges(cfg.rows, cfg.cols);
  if (logits.size() != edges.size()) {
    throw ConfigError("expected " + std::to_string(edges.size()) + " coupler logit vectors, got " +
                      std::to_string(logits.size()));
  }
  const auto levels = dac_levels(cfg.bitwidth);
  ModelBuilder b;
  const std::size_t n = cfg.rows * cfg.cols;
  for (std::size_t i = 0; i < n; ++i) b.add_state("phi_" + std::to_string(i));
  for (std::size_t e = 0; e < edges.size(); ++e) {
    b.add_trainable(discrete_trainable(
        "k_" + std::to_string(edges[e].first) + "_" + std::to_string(edges[e].second), levels,
        logits[e], true));
  }
  auto lock = analog_trainable("l", cfg.lock_init, 0.0, cfg.lock_max, true);
  lock.frozen = !cfg.locking_trainable;
  const std::size_t l = b.add_trainable(lock);

  const double pi = std::numbers::pi;
  std::vector<std::vector<Expr>> terms(n);
  for (std::size_t e = 0; e < edges.size(); ++e) {
    const auto [i, j] = edges[e];
    const Expr s = param(e) * sin((state(i) - state(j)) * pi);
    terms[i].push_back(neg(s));
    terms[j].push_back(s);
  }
  for (std::size_t i = 0; i < n; ++i) {
    terms[i].push_back(neg(param(l) * sin(state(i) * (2.0 * pi))));
    b.set_derivative(i, sum(std::move(terms[i])));
    if (cfg.noise_alpha > 0.0) b.set_noise(i, constant(cfg.noise_alpha));
  }
  std::vector<Expr> readout(n);
  for (std::size_t i = 0; i < n; ++i) readout[i] = fold(state(i));
  b.set_readout({cfg.t_measure}, std::move(readout));
  return compile(b, cfg.dt);
}

/// Triangular fold of a phase onto [0, 1]: 0 -> 0, 1 -> 1, period 2.
inline double phase_readout(double x) {
  const double r = x - 2.0 * std::floor(x * 0.5);
  return 1.0 - std::abs(1.0 - r);
}

struct Pair {
  std::vector<double> noisy;
  std::vector<double> ideal;
};

/// Pair k: a uniformly chosen pattern with clamp(p + U(-h, h), 0, 1) pixels;
/// depends only on (seed, k).
inline Pair noisy_pair(const PatternSet& set, std::uint64_t seed, std::size_t k,
                       double halfwidth = 0.5) {
  Rng rng(derive_seed(seed, {stream::kData, k}));
  std::uniform_int_distribution<std::size_t> pick(0, set.patterns.size() - 1);
  std::uniform_real_distribution<double> u(-halfwidth, halfwidth);
  Pair p;
  p.ideal = set.patterns[pick(rng)];
  p.noisy.resize(p.ideal.size());
  for (std::size_t i = 0; i < p.ideal.size(); ++i) {
    const double d = halfwidth > 0.0 ? u(rng) : 0.0;
    p.noisy[i] = std::clamp(p.ideal[i] + d, 0.0, 1.0);
  }
  return p;
}

inline std::vector<Pair> noisy_dataset(const PatternSet& set, std::size_t n, std::uint64_t seed,
                                       double halfwidth = 0.5) {
  set.validate();
  std::vector<Pair> out;
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) out.push_back(noisy_pair(set, seed, k, halfwidth));
  return out;
}

inline BatchItem to_item(const Pair& p) {
  Matrix target(1, p.ideal.size());
  target.data = p.ideal;
  return {{}, std::move(target), p.noisy};
}

inline std::vector<BatchItem> to_batch(const std::vector<Pair>& pairs) {
  std::vector<BatchItem> items;
  items.reserve(pairs.size());
  for (const auto& p : pairs) items.push_back(to_item(p));
  return items;
}

inline LossSpec loss_spec(const ObcConfig& cfg) { return LossSpec::mse(Matrix(1, cfg.rows * cfg.cols)); }

/// Training objective that draws a fresh batch of noisy images every step.
struct ObcObjective {
  const CompiledModel* model = nullptr;
  const PatternSet* patterns = nullptr;
  LossSpec loss;
  std::size_t batch_size = 64;
  McOptions mc;

  GradEstimate operator()(const TrainableStore& store, std::size_t step, double tau) const {
    std::vector<BatchItem> batch;
    batch.reserve(batch_size);
    const std::uint64_t data_seed = derive_seed(mc.seed, {stream::kBatch, step});
    for (std::size_t k = 0; k < batch_size; ++k) batch.push_back(to_item(noisy_pair(*patterns, data_seed, k)));
    McOptions opt = mc;
    opt.seed = derive_seed(mc.seed, {stream::kNoise, step});
    opt.tau = tau;
    return mc_grad(*model, store, batch, loss, opt);
  }
};

/// Sets the locking trainable of `store` to physical value `l`.
inline void set_lock(const CompiledModel& model, TrainableStore& store, double l) {
  const auto idx = model.find_trainable("l");
  const auto& a = model.trainables[*idx].analog();
  store.slot(model, *idx)[0] = bound_inverse(l, a.lo, a.hi);
}

inline double get_lock(const CompiledModel& model, const TrainableStore& store) {
  const auto idx = model.find_trainable("l");
  const auto& a = model.trainables[*idx].analog();
  return bound_transform(clip_unit(store.slot(model, *idx)[0]), a.lo, a.hi);
}

/// Hard (argmax) coupler values of a store, in edge order.
inline std::vector<double> hard_couplings(const CompiledModel& model, const TrainableStore& store) {
  const auto pm = map_params(model, store, ParamMode::Hard, 1.0, nullptr);
  return {pm.values.begin(), pm.values.end() - 1};
}

enum class Setup { HebbianBaseline, RandomCouple, RandomCoupleLock, HebbianCoupleLock };

inline const char* to_string(Setup s) {
  switch (s) {
    case Setup::HebbianBaseline: return "hebbian,-";
    case Setup::RandomCouple: return "random,couple";
    case Setup::RandomCoupleLock: return "random,couple&lock";
    case Setup::HebbianCoupleLock: return "hebbian,couple&lock";
  }
  return "?";
}

struct ExperimentOptions {
  std::size_t batch_size = 64;
  std::size_t n_steps = 64;
  double lr = 0.1;
  std::size_t n_test = 8192;
  std::size_t n_sweep = 256;
  std::size_t workers = 1;
  std::uint64_t seed = 0;
  TauSchedule tau{10.0, 1.0, 64, TauSchedule::Mode::Exponential};
};

struct SetupResult {
  Setup setup = Setup::HebbianBaseline;
  int bitwidth = 1;
  double test_loss = 0.0;
  double lock = 1.0;
  std::vector<double> couplings;
  std::vector<HistoryRow> history;
  TrainableStore store;  // reported parameter set
};

/// Mean hard-parameter loss over a fixed set of noisy pairs.
inline double evaluate(const CompiledModel& model, const TrainableStore& store,
                       const std::vector<BatchItem>& items, const ObcConfig& cfg,
                       std::uint64_t seed, std::size_t workers) {
  McOptions opt;
  opt.solve = cfg.solve_config();
  opt.seed = seed;
  opt.workers = workers;
  return mc_loss(model, store, items, loss_spec(cfg), opt, ParamMode::Hard).mean;
}

/// Reference network the Hebbian designer assumes: all-to-all continuous
/// Hebbian couplings (normalized, unquantized), no phase noise, fixed lock `l`.
inline CompiledModel ideal_hebbian_model(const ObcConfig& cfg, const PatternSet& set, double l) {
  set.validate();
  using namespace expr;
  const std::size_t n = set.rows * set.cols;
  const double m = static_cast<double>(set.patterns.size());
  std::vector<double> k(n * n, 0.0);
  double peak = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      double s = 0.0;
      for (const auto& p : set.patterns) s += (2.0 * p[i] - 1.0) * (2.0 * p[j] - 1.0);
      k[i * n + j] = s / m;
      peak = std::max(peak, std::abs(s / m));
    }
  }
  const double pi = std::numbers::pi;
  ModelBuilder b;
  for (std::size_t i = 0; i < n; ++i) b.add_state("phi_" + std::to_string(i));
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<Expr> terms;
    for (std::size_t j = 0; j < n; ++j) {
      const double w = peak > 0.0 ? k[i * n + j] / peak : 0.0;
      if (i == j || w == 0.0) continue;
      terms.push_back(constant(-w) * sin((state(i) - state(j)) * pi));
    }
    terms.push_back(constant(-l) * sin(state(i) * (2.0 * pi)));
    b.set_derivative(i, sum(std::move(terms)));
  }
  std::vector<Expr> readout(n);
  for (std::size_t i = 0; i < n; ++i) readout[i] = fold(state(i));
  b.set_readout({cfg.t_measure}, std::move(readout));
  return compile(b, cfg.dt);
}

/// Locking weight of the Hebbian design: the l in {0, 0.25, ..., lock_max}
/// minimizing the loss of the ideal reference network on noisy images.
inline double sweep_lock(const ObcConfig& cfg, const PatternSet& set, const ExperimentOptions& opt) {
  ObcConfig quiet = cfg;
  quiet.noise_alpha = 0.0;
  const auto items = to_batch(noisy_dataset(set, opt.n_sweep, derive_seed(opt.seed, {stream::kData, 1})));
  double best_l = cfg.lock_init, best = INFINITY;
  for (double l = 0.0; l <= cfg.lock_max + 1e-12; l += 0.25) {
    const CompiledModel ideal = ideal_hebbian_model(quiet, set, l);
    const double loss = evaluate(ideal, TrainableStore::init(ideal), items, quiet, opt.seed, opt.workers);
    if (loss < best) {
      best = loss;
      best_l = l;
    }
  }
  return best_l;
}

/// Runs one (setup, bitwidth) cell of the comparison table.
inline SetupResult run_setup(Setup setup, int bitwidth, const PatternSet& set, ObcConfig cfg,
                             const ExperimentOptions& opt) {
  cfg.bitwidth = bitwidth;
  cfg.init = (setup == Setup::RandomCouple || setup == Setup::RandomCoupleLock) ? Init::Random
                                                                                : Init::Hebbian;
  cfg.locking_trainable = setup == Setup::RandomCoupleLock || setup == Setup::HebbianCoupleLock;
  const std::uint64_t run_seed = derive_seed(opt.seed, {static_cast<std::uint64_t>(setup),
                                                        static_cast<std::uint64_t>(bitwidth)});
  const auto logits = initial_logits(cfg, set, run_seed);
  const CompiledModel model = build_obc(cfg, logits);
  TrainableStore store = TrainableStore::init(model);

  SetupResult res;
  res.setup = setup;
  res.bitwidth = bitwidth;
  TrainableStore final_store = store;
  if (setup == Setup::HebbianBaseline) {
    set_lock(model, final_store, sweep_lock(cfg, set, opt));
  } else {
    ObcObjective obj{&model, &set, loss_spec(cfg), opt.batch_size, {}};
    obj.mc.solve = cfg.solve_config();
    obj.mc.seed = run_seed;
    obj.mc.workers = opt.workers;
    TrainConfig tc;
    tc.n_steps = opt.n_steps;
    tc.lr = opt.lr;
    TauSchedule tau = opt.tau;
    tau.n_steps = opt.n_steps;
    tc.tau = tau;
    const TrainState st = train(store, tc, obj);
    final_store = st.best;
    res.history = st.history;
  }
  const auto test = to_batch(noisy_dataset(set, opt.n_test, derive_seed(opt.seed, {stream::kData, 2})));
  res.test_loss = evaluate(model, final_store, test, cfg, derive_seed(opt.seed, {stream::kChallenge}),
                           opt.workers);
  res.lock = get_lock(model, final_store);
  res.couplings = hard_couplings(model, final_store);
  res.store = std::move(final_store);
  return res;
}

}  // namespace diffanalog::obc
