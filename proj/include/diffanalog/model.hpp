#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <variant>
#include <vector>

#include "diffanalog/common.hpp"
#include "diffanalog/expr.hpp"

namespace diffanalog {

struct AnalogSpec {
  double init = 0.0;
  double lo = -1.0;
  double hi = 1.0;
};

struct DiscreteSpec {
  std::vector<double> levels;
  std::vector<double> init_logits;  // log pi, unnormalized
};

struct TrainableDecl {
  std::string name;
  std::variant<AnalogSpec, DiscreteSpec> kind;
  bool shared = false;
  bool frozen = false;  // held at its initial value by the optimizer

  bool is_analog() const { return std::holds_alternative<AnalogSpec>(kind); }
  const AnalogSpec& analog() const { return std::get<AnalogSpec>(kind); }
  const DiscreteSpec& discrete() const { return std::get<DiscreteSpec>(kind); }
};

inline TrainableDecl analog_trainable(std::string name, double init, double lo, double hi,
                                      bool shared = false) {
  return TrainableDecl{std::move(name), AnalogSpec{init, lo, hi}, shared, false};
}

inline TrainableDecl discrete_trainable(std::string name, std::vector<double> levels,
                                        std::vector<double> init_logits, bool shared = false) {
  return TrainableDecl{std::move(name), DiscreteSpec{std::move(levels), std::move(init_logits)},
                       shared, false};
}

inline void validate(const TrainableDecl& d) {
  if (d.name.empty()) throw ModelError("trainable name must not be empty");
  if (d.is_analog()) {
    const auto& a = d.analog();
    if (!(a.lo < a.hi)) throw ModelError("trainable '" + d.name + "': range requires lo < hi");
    if (!(a.lo <= a.init && a.init <= a.hi)) {
      throw ModelError("trainable '" + d.name + "': init outside physical range");
    }
  } else {
    const auto& s = d.discrete();
    if (s.levels.size() < 2) throw ModelError("trainable '" + d.name + "': needs >= 2 levels");
    if (s.levels.size() != s.init_logits.size()) {
      throw ModelError("trainable '" + d.name + "': levels and init_logits differ in length");
    }
    for (double l : s.init_logits) {
      if (!std::isfinite(l)) throw ModelError("trainable '" + d.name + "': non-finite logit");
    }
  }
}

struct MismatchDecl {
  double sigma = 0.0;  // relative standard deviation
};

/// Validated dynamical system. Immutable once returned by compile().
struct CompiledModel {
  std::vector<std::string> state_names;
  std::vector<std::string> input_names;
  std::vector<TrainableDecl> trainables;
  std::vector<MismatchDecl> mismatch;
  std::vector<Expr> derivative;
  std::vector<Expr> noise;  // invalid Expr = no noise on that state
  std::vector<double> readout_times;
  std::vector<Expr> readout_map;
  std::vector<double> initial_state;

  Tape derivative_tape;
  Tape noise_tape;
  Tape readout_tape;
  bool has_noise = false;

  std::size_t n_states() const { return state_names.size(); }
  std::size_t n_inputs() const { return input_names.size(); }
  std::size_t n_params() const { return trainables.size(); }
  std::size_t n_mismatch() const { return mismatch.size(); }
  std::size_t n_outputs() const { return readout_map.size(); }
  std::size_t n_readouts() const { return readout_times.size(); }

  std::vector<double> sigmas() const {
    std::vector<double> s(mismatch.size());
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = mismatch[i].sigma;
    return s;
  }

  std::optional<std::size_t> find_trainable(const std::string& name) const {
    for (std::size_t i = 0; i < trainables.size(); ++i) {
      if (trainables[i].name == name) return i;
    }
    return std::nullopt;
  }
};

/// Grid check shared by compile() and the solver: `t` must be k * dt for an integer k.
inline std::optional<std::size_t> grid_index(double t, double dt) {
  const double r = t / dt;
  const double k = std::round(r);
  if (k < 0.0) return std::nullopt;
  if (std::abs(r - k) > 1e-9 * std::max(1.0, k)) return std::nullopt;
  return static_cast<std::size_t>(k);
}

/// Single-owner builder for CompiledModel.
class ModelBuilder {
 public:
  std::size_t add_state(std::string name) {
    require_unique(name, state_names_, "state");
    state_names_.push_back(std::move(name));
    derivative_.emplace_back();
    noise_.emplace_back();
    return state_names_.size() - 1;
  }

  std::size_t declare_input(std::string name) {
    require_unique(name, input_names_, "input");
    input_names_.push_back(std::move(name));
    return input_names_.size() - 1;
  }

  std::size_t add_trainable(TrainableDecl decl) {
    validate(decl);
    for (const auto& t : trainables_) {
      if (t.name == decl.name) throw ModelError("duplicate trainable '" + decl.name + "'");
    }
    trainables_.push_back(std::move(decl));
    return trainables_.size() - 1;
  }

  /// Registers a mismatch symbol without attaching it; used by file loaders.
  std::size_t declare_mismatch(double sigma) {
    if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw ModelError("mismatch sigma must be >= 0");
    mismatch_.push_back({sigma});
    return mismatch_.size() - 1;
  }

  /// Returns delta_k * target with a fresh symbol delta_k ~ N(1, sigma^2).
  Expr mismatch(Expr target, double sigma) {
    const std::size_t k = declare_mismatch(sigma);
    return expr::mismatch_ref(k) * std::move(target);
  }

  void set_derivative(std::size_t state, Expr e) {
    check_state(state);
    if (derivative_[state].valid()) {
      throw ModelError("derivative of state '" + state_names_[state] + "' assigned twice");
    }
    check_symbols(e, "derivative of '" + state_names_[state] + "'");
    derivative_[state] = std::move(e);
  }

  void set_noise(std::size_t state, Expr amplitude) {
    check_state(state);
    check_symbols(amplitude, "noise amplitude of '" + state_names_[state] + "'");
    noise_[state] = std::move(amplitude);
  }

  void set_readout(std::vector<double> times, std::vector<Expr> map) {
    for (const auto& e : map) check_symbols(e, "readout map");
    readout_times_ = std::move(times);
    readout_map_ = std::move(map);
  }

  void set_initial_state(std::vector<double> x0) { initial_state_ = std::move(x0); }

  std::size_t n_states() const { return state_names_.size(); }
  std::size_t n_inputs() const { return input_names_.size(); }
  std::size_t n_params() const { return trainables_.size(); }
  std::size_t n_mismatch() const { return mismatch_.size(); }

 private:
  friend CompiledModel compile(const ModelBuilder&, std::optional<double>);

  static void require_unique(const std::string& name, const std::vector<std::string>& existing,
                             const char* what) {
    if (name.empty()) throw ModelError(std::string(what) + " name must not be empty");
    if (std::find(existing.begin(), existing.end(), name) != existing.end()) {
      throw ModelError(std::string("duplicate ") + what + " '" + name + "'");
    }
  }

  void check_state(std::size_t s) const {
    if (s >= state_names_.size()) throw ModelError("state index " + std::to_string(s) + " not declared");
  }

  void check_symbols(const Expr& e, const std::string& where) const {
    if (!e.valid()) throw ModelError(where + ": null expression");
    const Tape t(std::span<const Expr>(&e, 1));
    const auto& x = t.extent();
    auto fail = [&](const char* what, std::size_t idx) {
      throw ModelError(where + ": undeclared " + what + " index " + std::to_string(idx));
    };
    if (x.states > state_names_.size()) fail("state", x.states - 1);
    if (x.params > trainables_.size()) fail("param", x.params - 1);
    if (x.inputs > input_names_.size()) fail("input", x.inputs - 1);
    if (x.mismatch > mismatch_.size()) fail("mismatch", x.mismatch - 1);
  }

  std::vector<std::string> state_names_;
  std::vector<std::string> input_names_;
  std::vector<TrainableDecl> trainables_;
  std::vector<MismatchDecl> mismatch_;
  std::vector<Expr> derivative_;
  std::vector<Expr> noise_;
  std::vector<double> readout_times_;
  std::vector<Expr> readout_map_;
  std::vector<double> initial_state_;
};

namespace detail {

/// Every mismatch symbol must be a direct operand of exactly one Mul node.
inline void check_mismatch_sites(const std::vector<const std::vector<Expr>*>& groups,
                                 std::size_t n_mismatch) {
  std::vector<std::size_t> uses(n_mismatch, 0);
  std::unordered_set<const ExprNode*> seen;
  std::vector<const ExprNode*> stack;
  for (const auto* g : groups) {
    for (const auto& root : *g) {
      if (!root.valid()) continue;
      if (root.op() == Op::Mismatch) {
        throw ModelError("mismatch symbol " + std::to_string(root.node().index) +
                         " used outside a multiplicative site");
      }
      stack.push_back(root.id());
    }
  }
  while (!stack.empty()) {
    const ExprNode* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    for (const auto& c : n->children) {
      if (c.op() == Op::Mismatch) {
        if (n->op != Op::Mul) {
          throw ModelError("mismatch symbol " + std::to_string(c.node().index) +
                           " is an operand of '" + op_name(n->op) + "', expected 'mul'");
        }
        ++uses[c.node().index];
      } else {
        stack.push_back(c.id());
      }
    }
  }
  for (std::size_t k = 0; k < n_mismatch; ++k) {
    if (uses[k] != 1) {
      throw ModelError("mismatch symbol " + std::to_string(k) + " appears at " +
                       std::to_string(uses[k]) + " sites, expected exactly 1");
    }
  }
}

}  // namespace detail

/// Validates the builder and freezes it into a CompiledModel. When `dt` is
/// given, readout times are also checked against that solver grid.
inline CompiledModel compile(const ModelBuilder& b, std::optional<double> dt = std::nullopt) {
  CompiledModel m;
  m.state_names = b.state_names_;
  m.input_names = b.input_names_;
  m.trainables = b.trainables_;
  m.mismatch = b.mismatch_;
  m.derivative = b.derivative_;
  m.noise = b.noise_;
  m.readout_times = b.readout_times_;
  m.readout_map = b.readout_map_;

  if (m.state_names.empty()) throw ModelError("model has no states");
  for (std::size_t i = 0; i < m.n_states(); ++i) {
    if (!m.derivative[i].valid()) {
      throw ModelError("state '" + m.state_names[i] + "' has no derivative");
    }
  }
  if (m.readout_times.empty()) throw ModelError("readout times must be nonempty");
  if (m.readout_map.empty()) throw ModelError("readout map must be nonempty");
  for (std::size_t i = 0; i < m.readout_times.size(); ++i) {
    const double t = m.readout_times[i];
    if (!(t >= 0.0) || !std::isfinite(t)) throw ModelError("readout times must be finite and >= 0");
    if (i > 0 && !(t > m.readout_times[i - 1])) {
      throw ModelError("readout times must be strictly ascending");
    }
    if (dt && !grid_index(t, *dt)) {
      throw ModelError("readout time " + std::to_string(t) + " is not a multiple of dt=" +
                       std::to_string(*dt));
    }
  }

  if (b.initial_state_.empty()) {
    m.initial_state.assign(m.n_states(), 0.0);
  } else if (b.initial_state_.size() != m.n_states()) {
    throw ModelError("initial state length does not match state count");
  } else {
    m.initial_state = b.initial_state_;
  }

  detail::check_mismatch_sites({&m.derivative, &m.noise, &m.readout_map}, m.n_mismatch());

  m.derivative_tape = Tape(m.derivative);
  m.has_noise = std::any_of(m.noise.begin(), m.noise.end(), [](const Expr& e) { return e.valid(); });
  if (m.has_noise) {
    std::vector<Expr> amps(m.n_states());
    for (std::size_t i = 0; i < amps.size(); ++i) {
      amps[i] = m.noise[i].valid() ? m.noise[i] : expr::constant(0.0);
    }
    m.noise_tape = Tape(amps);
  }
  m.readout_tape = Tape(m.readout_map);
  return m;
}

}  // namespace diffanalog
