#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "diffanalog/gradient.hpp"
#include "diffanalog/model.hpp"
#include "diffanalog/parallel.hpp"
#include "diffanalog/random.hpp"
#include "diffanalog/relax.hpp"
#include "diffanalog/solver.hpp"
#include "diffanalog/trainables.hpp"

/// Switchable-star transmission-line PUF. Two nominally identical stars share
/// one set of link parameters; each star has a center node and n_branches
/// segmented LC lines, gated by the challenge bits. Time is in seconds.
namespace diffanalog::tln {

using Challenge = std::vector<std::uint8_t>;

struct SsPufConfig {
  std::size_t n_branches = 32;
  std::size_t segments = 4;
  double t_readout = 10e-9;
  double dt = 10e-9 / 512.0;
  double logistic_steepness = 50.0;  // 1/V, applied to the center-voltage difference
  double mismatch_sigma = 0.1;
  double noise_std = 1e-7;  // V per sqrt(s), every state
  Method method = Method::Rk4;
  double c_init = 1e-9, l_init = 1e-9, g_init = 1.0;
  double cl_lo = 1e-10, cl_hi = 1e-8;
  double g_lo = 0.1, g_hi = 10.0;
  /// Holds the center capacitance C0 and first-link inductance L0 at their init values.
  bool fix_center = false;

  void validate() const {
    if (n_branches < 2) throw ConfigError("SS-PUF needs at least 2 branches");
    if (segments < 1) throw ConfigError("SS-PUF needs at least 1 segment per branch");
    if (!(dt > 0.0) || !(t_readout > 0.0)) throw ConfigError("SS-PUF dt and t_readout must be > 0");
    if (!(mismatch_sigma >= 0.0) || !(noise_std >= 0.0)) throw ConfigError("sigma/noise must be >= 0");
  }

  SolveConfig solve_config() const { return {dt, t_readout, method, 0}; }
  std::size_t n_states() const { return 2 * (1 + 2 * n_branches * segments); }
};

/// Trainable layout: C0, L0, C_1..C_S, L_2..L_S, then gc_t, gc_s, gl_t, gl_s
/// for each segment s. L0 is the inductance of the first segment of every branch.
inline std::vector<std::string> trainable_names(std::size_t segments) {
  std::vector<std::string> n{"C0", "L0"};
  for (std::size_t s = 1; s <= segments; ++s) n.push_back("C" + std::to_string(s));
  for (std::size_t s = 2; s <= segments; ++s) n.push_back("L" + std::to_string(s));
  for (std::size_t s = 1; s <= segments; ++s) {
    for (const char* g : {"gc_t", "gc_s", "gl_t", "gl_s"}) n.push_back(std::string(g) + std::to_string(s));
  }
  return n;
}

/// Index helpers for the trainable layout above.
struct Layout {
  std::size_t S;
  std::size_t C0() const { return 0; }
  std::size_t L(std::size_t s) const { return s == 1 ? 1 : 2 + S + (s - 2); }
  std::size_t C(std::size_t s) const { return 2 + (s - 1); }
  std::size_t g(std::size_t s, std::size_t which) const { return 2 + S + (S - 1) + 4 * (s - 1) + which; }
};

/// State index helpers: per star, center voltage then (I, V) per branch segment.
struct StateIndex {
  std::size_t nb, S;
  std::size_t per_star() const { return 1 + 2 * nb * S; }
  std::size_t center(std::size_t star) const { return star * per_star(); }
  std::size_t I(std::size_t star, std::size_t j, std::size_t s) const {
    return center(star) + 1 + 2 * (j * S + (s - 1));
  }
  std::size_t V(std::size_t star, std::size_t j, std::size_t s) const { return I(star, j, s) + 1; }
};

/// dI_s = (gl_t,s * V_{s-1} - gl_s,s * V_s) / L_s, with V_0 the center voltage gated by b_j;
/// dV_s = (gc_t,s * I_s - gc_s,s+1 * I_{s+1}) / C_s, with I_{S+1} = 0;
/// dV_center = -(sum_j b_j * gc_s,1 * I_{j,1}) / C0.
/// Every g site carries its own mismatch symbol. Inputs are the challenge bits.
/// Readout: logistic(k * (V_center,A - V_center,B)) at t_readout.
inline CompiledModel build_sspuf(const SsPufConfig& cfg) {
  cfg.validate();
  using namespace expr;
  const std::size_t nb = cfg.n_branches, S = cfg.segments;
  const Layout lay{S};
  const StateIndex ix{nb, S};
  ModelBuilder b;
  for (std::size_t star = 0; star < 2; ++star) {
    const std::string p = star == 0 ? "A" : "B";
    b.add_state(p + "_V0");
    for (std::size_t j = 0; j < nb; ++j) {
      for (std::size_t s = 1; s <= S; ++s) {
        b.add_state(p + "_I_" + std::to_string(j) + "_" + std::to_string(s));
        b.add_state(p + "_V_" + std::to_string(j) + "_" + std::to_string(s));
      }
    }
  }
  for (std::size_t j = 0; j < nb; ++j) b.declare_input("b" + std::to_string(j));

  const auto names = trainable_names(S);
  for (const auto& name : names) {
    const bool is_g = name[0] == 'g';
    auto t = is_g ? analog_trainable(name, cfg.g_init, cfg.g_lo, cfg.g_hi, true)
                  : analog_trainable(name, name[0] == 'C' ? cfg.c_init : cfg.l_init, cfg.cl_lo,
                                     cfg.cl_hi, true);
    t.frozen = cfg.fix_center && (name == "C0" || name == "L0");
    b.add_trainable(std::move(t));
  }
  const bool mism = cfg.mismatch_sigma > 0.0;
  auto site = [&](Expr e) { return mism ? b.mismatch(std::move(e), cfg.mismatch_sigma) : e; };
  enum { kGcT = 0, kGcS = 1, kGlT = 2, kGlS = 3 };

  for (std::size_t star = 0; star < 2; ++star) {
    std::vector<Expr> center_terms;
    for (std::size_t j = 0; j < nb; ++j) {
      for (std::size_t s = 1; s <= S; ++s) {
        // Inductor current of segment s.
        const Expr upstream = s == 1 ? input(j) * state(ix.center(star)) : state(ix.V(star, j, s - 1));
        const Expr dI = site(param(lay.g(s, kGlT)) * upstream) -
                        site(param(lay.g(s, kGlS)) * state(ix.V(star, j, s)));
        b.set_derivative(ix.I(star, j, s), dI / param(lay.L(s)));
        // Capacitor voltage of segment s.
        Expr dV = site(param(lay.g(s, kGcT)) * state(ix.I(star, j, s)));
        if (s < S) dV = dV - site(param(lay.g(s + 1, kGcS)) * state(ix.I(star, j, s + 1)));
        b.set_derivative(ix.V(star, j, s), dV / param(lay.C(s)));
      }
      center_terms.push_back(site(param(lay.g(1, kGcS)) * (input(j) * state(ix.I(star, j, 1)))));
    }
    b.set_derivative(ix.center(star), neg(sum(std::move(center_terms))) / param(lay.C0()));
    if (cfg.noise_std > 0.0) {
      for (std::size_t i = ix.center(star); i < ix.center(star) + ix.per_star(); ++i) {
        b.set_noise(i, constant(cfg.noise_std));
      }
    }
  }
  b.set_readout({cfg.t_readout},
                {logistic(state(ix.center(0)) - state(ix.center(1)), cfg.logistic_steepness)});
  std::vector<double> x0(cfg.n_states(), 0.0);
  x0[ix.center(0)] = 1.0;
  x0[ix.center(1)] = 1.0;
  b.set_initial_state(std::move(x0));
  return compile(b, cfg.dt);
}

/// Same circuit with the noise amplitudes removed (used for noiseless training).
inline SsPufConfig noiseless(SsPufConfig cfg) {
  cfg.noise_std = 0.0;
  return cfg;
}

inline std::vector<double> challenge_inputs(const Challenge& c) { return {c.begin(), c.end()}; }

inline double challenge_response(const CompiledModel& model, std::span<const double> params,
                                 std::span<const double> delta, const Challenge& c,
                                 const SolveConfig& cfg) {
  if (c.size() != model.n_inputs()) throw ConfigError("challenge length does not match the branch count");
  return solve_readouts(model, params, delta, challenge_inputs(c), model.initial_state, cfg)(0, 0);
}

inline Challenge random_challenge(std::size_t n, Rng& rng) {
  Challenge c(n);
  std::uniform_int_distribution<int> bit(0, 1);
  for (auto& v : c) v = static_cast<std::uint8_t>(bit(rng));
  return c;
}

inline Challenge flip(Challenge c, std::size_t j) {
  c[j] ^= 1;
  return c;
}

/// Hex encoding, most significant nibble first; bit j of the challenge is bit
/// (j mod 4) of nibble (j / 4) counted from the right end of the string.
inline std::string to_hex(const Challenge& c) {
  const std::size_t nibbles = (c.size() + 3) / 4;
  std::string s(nibbles, '0');
  for (std::size_t j = 0; j < c.size(); ++j) {
    if (!c[j]) continue;
    char& ch = s[nibbles - 1 - j / 4];
    int v = std::stoi(std::string(1, ch), nullptr, 16) | (1 << (j % 4));
    ch = "0123456789abcdef"[v];
  }
  return s;
}

inline Challenge from_hex(const std::string& hex, std::size_t n_bits) {
  const std::size_t nibbles = (n_bits + 3) / 4;
  if (hex.size() != nibbles) {
    throw ConfigError("challenge '" + hex + "' must have " + std::to_string(nibbles) + " hex digits");
  }
  Challenge c(n_bits, 0);
  for (std::size_t k = 0; k < nibbles; ++k) {
    const char ch = hex[nibbles - 1 - k];
    int v;
    if (ch >= '0' && ch <= '9') v = ch - '0';
    else if (ch >= 'a' && ch <= 'f') v = ch - 'a' + 10;
    else if (ch >= 'A' && ch <= 'F') v = ch - 'A' + 10;
    else throw ConfigError(std::string("invalid hex digit '") + ch + "' in challenge");
    for (int bit = 0; bit < 4; ++bit) {
      const std::size_t j = 4 * k + static_cast<std::size_t>(bit);
      if ((v >> bit) & 1) {
        if (j >= n_bits) throw ConfigError("challenge '" + hex + "' sets bits beyond the branch count");
        c[j] = 1;
      }
    }
  }
  return c;
}

/// One challenge per line; blank lines and '#' comments are skipped.
inline std::vector<Challenge> parse_challenges(const std::string& text, std::size_t n_bits) {
  std::vector<Challenge> out;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const auto a = line.find_first_not_of(" \t\r");
    if (a == std::string::npos || line[a] == '#') continue;
    const auto e = line.find_last_not_of(" \t\r");
    out.push_back(from_hex(line.substr(a, e - a + 1), n_bits));
  }
  return out;
}

inline std::string format_challenges(const std::vector<Challenge>& cs) {
  std::string out;
  for (const auto& c : cs) out += to_hex(c) + "\n";
  return out;
}

/// Per-instance I2O from a response table: resp[c][0] is the reference
/// response of set c and resp[c][1 + j] the response with bit j flipped.
/// S_j = mean_c |resp[c][1+j] - resp[c][0]|; returns mean_j |S_j - 0.5|.
/// When `weights` is given it receives d(I2O)/d(resp[c][k]).
inline double i2o_from_responses(const std::vector<std::vector<double>>& resp,
                                 std::vector<std::vector<double>>* weights = nullptr) {
  const std::size_t n_sets = resp.size();
  const std::size_t n = resp.at(0).size() - 1;
  std::vector<double> S(n, 0.0);
  for (const auto& row : resp) {
    for (std::size_t j = 0; j < n; ++j) S[j] += std::abs(row[1 + j] - row[0]);
  }
  double i2o = 0.0;
  for (auto& s : S) {
    s /= static_cast<double>(n_sets);
    i2o += std::abs(s - 0.5);
  }
  i2o /= static_cast<double>(n);
  if (weights != nullptr) {
    weights->assign(n_sets, std::vector<double>(n + 1, 0.0));
    auto sgn = [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); };
    const double scale = 1.0 / (static_cast<double>(n) * static_cast<double>(n_sets));
    for (std::size_t c = 0; c < n_sets; ++c) {
      for (std::size_t j = 0; j < n; ++j) {
        const double w = scale * sgn(S[j] - 0.5) * sgn(resp[c][1 + j] - resp[c][0]);
        (*weights)[c][1 + j] += w;
        (*weights)[c][0] -= w;
      }
    }
  }
  return i2o;
}

struct I2oOptions {
  std::size_t n_instances = 8;
  std::size_t n_sets = 32;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  GradMethod method = GradMethod::Backprop;
};

/// Mismatch sample of instance i and the reference challenges of its sets;
/// a pure function of (seed, i, set).
inline std::vector<double> instance_delta(const CompiledModel& model, std::uint64_t seed, std::size_t i) {
  Rng rng(derive_seed(seed, {stream::kMismatch, i}));
  return sample_mismatch(model.sigmas(), rng);
}

inline Challenge set_challenge(std::size_t n_bits, std::uint64_t seed, std::size_t i, std::size_t set) {
  Rng rng(derive_seed(seed, {stream::kChallenge, i, set}));
  return random_challenge(n_bits, rng);
}

/// Soft I2O and its gradient over raw trainables (noiseless solves).
inline GradEstimate i2o_grad(const CompiledModel& model, const TrainableStore& store,
                             const I2oOptions& opt, const SolveConfig& cfg) {
  if (opt.n_instances == 0 || opt.n_sets == 0) throw ConfigError("I2O needs >= 1 instance and set");
  store.check(model);
  const ParamMap pm = map_params(model, store, ParamMode::Hard, 1.0, nullptr);
  const std::size_t nb = model.n_inputs(), np = model.n_params();
  const std::size_t n_tasks = opt.n_instances * opt.n_sets;
  // Per task: responses (nb + 1) and d(resp)/d(params) rows.
  std::vector<std::vector<double>> resp(n_tasks), dresp(n_tasks);
  std::vector<std::vector<double>> deltas(opt.n_instances);
  for (std::size_t i = 0; i < opt.n_instances; ++i) deltas[i] = instance_delta(model, opt.seed, i);
  const LossSpec identity(expr::state(0), Matrix(1, 1));
  parallel_for(n_tasks, opt.workers, [&](std::size_t task) {
    const std::size_t i = task / opt.n_sets, c = task % opt.n_sets;
    with_sample_context(i, c, [&] {
      const Challenge ref = set_challenge(nb, opt.seed, i, c);
      resp[task].resize(nb + 1);
      dresp[task].resize((nb + 1) * np);
      for (std::size_t k = 0; k <= nb; ++k) {
        const Challenge ch = k == 0 ? ref : flip(ref, k - 1);
        const GradResult g = grad_physical(opt.method, model, pm.values, deltas[i],
                                           challenge_inputs(ch), model.initial_state, cfg, identity);
        resp[task][k] = g.loss;
        std::copy(g.grad.begin(), g.grad.end(), dresp[task].begin() + k * np);
      }
    });
  });
  GradEstimate est;
  est.grad.assign(store.size(), 0.0);
  std::vector<double> d_phys(np, 0.0), per_instance(opt.n_instances);
  for (std::size_t i = 0; i < opt.n_instances; ++i) {
    std::vector<std::vector<double>> table(resp.begin() + i * opt.n_sets,
                                           resp.begin() + (i + 1) * opt.n_sets);
    std::vector<std::vector<double>> w;
    per_instance[i] = i2o_from_responses(table, &w);
    for (std::size_t c = 0; c < opt.n_sets; ++c) {
      const auto& d = dresp[i * opt.n_sets + c];
      for (std::size_t k = 0; k <= nb; ++k) {
        for (std::size_t p = 0; p < np; ++p) d_phys[p] += w[c][k] * d[k * np + p];
      }
    }
  }
  for (auto& v : d_phys) v /= static_cast<double>(opt.n_instances);
  pullback_params(model, store, pm, d_phys, est.grad);
  for (double v : per_instance) est.loss_mean += v;
  est.loss_mean /= static_cast<double>(opt.n_instances);
  est.loss_std = sample_std(per_instance, est.loss_mean);
  est.n_samples = n_tasks * (nb + 1);
  return est;
}

/// Training objective: fresh mismatch instances and challenge sets every step.
struct I2oObjective {
  const CompiledModel* model = nullptr;
  I2oOptions opt;
  SolveConfig solve;

  GradEstimate operator()(const TrainableStore& store, std::size_t step, double) const {
    I2oOptions o = opt;
    o.seed = derive_seed(opt.seed, {stream::kBatch, step});
    return i2o_grad(*model, store, o, solve);
  }
};

struct PufReport {
  double i2o_hard = 0.0;
  double i2o_soft = 0.0;
  double response_bias = 0.0;       // fraction of 1 bits over all evaluated challenges
  std::vector<double> flip_rate;    // mean hard S_j per challenge bit over instances
  double noise_stability = 1.0;     // fraction of hard bits unchanged under transient noise
  double noisy_i2o_hard = 0.0;
  std::size_t n_instances = 0;
  std::size_t n_sets = 0;
};

/// Hard and soft I2O over fresh instances. Noise stability compares
/// Euler-Maruyama solves with and without the configured transient noise at
/// the same step size.
inline PufReport evaluate_puf(const SsPufConfig& cfg, const TrainableStore& store,
                              const I2oOptions& opt) {
  const CompiledModel quiet = build_sspuf(noiseless(cfg));
  const CompiledModel noisy = build_sspuf(cfg);
  store.check(quiet);
  const ParamMap pm = map_params(quiet, store, ParamMode::Hard, 1.0, nullptr);
  const std::size_t nb = cfg.n_branches;
  const std::size_t n_tasks = opt.n_instances * opt.n_sets;
  std::vector<std::vector<double>> soft(n_tasks), noisy_soft(n_tasks), em_clean(n_tasks);
  const bool with_noise = cfg.noise_std > 0.0;
  parallel_for(n_tasks, opt.workers, [&](std::size_t task) {
    const std::size_t i = task / opt.n_sets, c = task % opt.n_sets;
    with_sample_context(i, c, [&] {
      const auto delta = instance_delta(quiet, opt.seed, i);
      const Challenge ref = set_challenge(nb, opt.seed, i, c);
      SolveConfig em = cfg.solve_config();
      em.method = Method::EulerMaruyama;
      for (std::size_t k = 0; k <= nb; ++k) {
        const Challenge ch = k == 0 ? ref : flip(ref, k - 1);
        soft[task].push_back(challenge_response(quiet, pm.values, delta, ch, cfg.solve_config()));
        if (with_noise) {
          em.noise_seed = derive_seed(opt.seed, {stream::kNoise, i, c, k});
          noisy_soft[task].push_back(challenge_response(noisy, pm.values, delta, ch, em));
          em_clean[task].push_back(challenge_response(quiet, pm.values, delta, ch, em));
        }
      }
    });
  });
  auto harden_rows = [](std::vector<std::vector<double>> rows) {
    for (auto& r : rows) {
      for (auto& v : r) v = v > 0.5 ? 1.0 : 0.0;
    }
    return rows;
  };
  PufReport rep;
  rep.n_instances = opt.n_instances;
  rep.n_sets = opt.n_sets;
  rep.flip_rate.assign(nb, 0.0);
  const auto hard = harden_rows(soft);
  std::size_t ones = 0, total = 0;
  for (std::size_t i = 0; i < opt.n_instances; ++i) {
    const auto first = static_cast<std::ptrdiff_t>(i * opt.n_sets);
    const auto last = static_cast<std::ptrdiff_t>((i + 1) * opt.n_sets);
    std::vector<std::vector<double>> s(soft.begin() + first, soft.begin() + last);
    std::vector<std::vector<double>> h(hard.begin() + first, hard.begin() + last);
    rep.i2o_soft += i2o_from_responses(s);
    rep.i2o_hard += i2o_from_responses(h);
    for (const auto& row : h) {
      for (std::size_t j = 0; j < nb; ++j) rep.flip_rate[j] += std::abs(row[1 + j] - row[0]);
      for (double v : row) {
        ones += v > 0.5 ? 1 : 0;
        ++total;
      }
    }
    if (with_noise) {
      std::vector<std::vector<double>> nh(noisy_soft.begin() + first, noisy_soft.begin() + last);
      rep.noisy_i2o_hard += i2o_from_responses(harden_rows(nh));
    }
  }
  const double r = static_cast<double>(opt.n_instances);
  rep.i2o_soft /= r;
  rep.i2o_hard /= r;
  rep.noisy_i2o_hard = with_noise ? rep.noisy_i2o_hard / r : rep.i2o_hard;
  for (auto& f : rep.flip_rate) f /= r * static_cast<double>(opt.n_sets);
  rep.response_bias = static_cast<double>(ones) / static_cast<double>(total);
  if (with_noise) {
    const auto a = harden_rows(noisy_soft), b = harden_rows(em_clean);
    std::size_t same = 0, n = 0;
    for (std::size_t t = 0; t < n_tasks; ++t) {
      for (std::size_t k = 0; k < a[t].size(); ++k) {
        same += a[t][k] == b[t][k] ? 1 : 0;
        ++n;
      }
    }
    rep.noise_stability = static_cast<double>(same) / static_cast<double>(n);
  }
  return rep;
}

}  // namespace diffanalog::tln
