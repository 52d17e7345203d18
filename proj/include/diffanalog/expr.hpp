#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "diffanalog/common.hpp"

namespace diffanalog {

enum class Op : std::uint8_t {
  Const,
  State,
  Param,
  Input,
  Mismatch,
  Time,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  Sin,
  Exp,
  Log,
  Clamp,
  Logistic,
  Sum,
  Fold,  // period-2 triangular wave, 1 - |1 - (v mod 2)|
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Const: return "const";
    case Op::State: return "state";
    case Op::Param: return "param";
    case Op::Input: return "input";
    case Op::Mismatch: return "mismatch";
    case Op::Time: return "time";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Neg: return "neg";
    case Op::Sin: return "sin";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Clamp: return "clamp";
    case Op::Logistic: return "logistic";
    case Op::Sum: return "sum";
    case Op::Fold: return "fold";
  }
  return "?";
}

class Expr;

struct ExprNode {
  Op op = Op::Const;
  double a = 0.0;  // Const value, Clamp lo, Logistic steepness
  double b = 0.0;  // Clamp hi
  std::size_t index = 0;
  std::vector<Expr> children;
};

/// Handle to an immutable expression node. Copies share the node, so a
/// subexpression reused in several places is one node in the DAG.
class Expr {
 public:
  Expr() = default;
  explicit Expr(std::shared_ptr<const ExprNode> node) : node_(std::move(node)) {}

  bool valid() const noexcept { return node_ != nullptr; }
  const ExprNode& node() const { return *node_; }
  const ExprNode* id() const noexcept { return node_.get(); }
  Op op() const { return node_->op; }

 private:
  std::shared_ptr<const ExprNode> node_;
};

namespace detail {

inline Expr make(Op op, std::vector<Expr> children = {}, double a = 0.0, double b = 0.0,
                 std::size_t index = 0) {
  for (const auto& c : children) {
    if (!c.valid()) throw ModelError(std::string("null operand passed to ") + op_name(op));
  }
  auto n = std::make_shared<ExprNode>();
  n->op = op;
  n->a = a;
  n->b = b;
  n->index = index;
  n->children = std::move(children);
  return Expr(std::move(n));
}

}  // namespace detail

/// Expression constructors. Bring into scope with `using namespace diffanalog::expr;`.
namespace expr {

inline Expr constant(double v) { return detail::make(Op::Const, {}, v); }
inline Expr state(std::size_t i) { return detail::make(Op::State, {}, 0, 0, i); }
inline Expr param(std::size_t i) { return detail::make(Op::Param, {}, 0, 0, i); }
inline Expr input(std::size_t i) { return detail::make(Op::Input, {}, 0, 0, i); }
inline Expr mismatch_ref(std::size_t i) { return detail::make(Op::Mismatch, {}, 0, 0, i); }
inline Expr time() { return detail::make(Op::Time); }

inline Expr add(Expr l, Expr r) { return detail::make(Op::Add, {std::move(l), std::move(r)}); }
inline Expr sub(Expr l, Expr r) { return detail::make(Op::Sub, {std::move(l), std::move(r)}); }
inline Expr mul(Expr l, Expr r) { return detail::make(Op::Mul, {std::move(l), std::move(r)}); }
inline Expr div(Expr l, Expr r) { return detail::make(Op::Div, {std::move(l), std::move(r)}); }
inline Expr neg(Expr e) { return detail::make(Op::Neg, {std::move(e)}); }
inline Expr sin(Expr e) { return detail::make(Op::Sin, {std::move(e)}); }
inline Expr exp(Expr e) { return detail::make(Op::Exp, {std::move(e)}); }
inline Expr log(Expr e) { return detail::make(Op::Log, {std::move(e)}); }
inline Expr fold(Expr e) { return detail::make(Op::Fold, {std::move(e)}); }

inline Expr clamp(Expr e, double lo, double hi) {
  if (!(lo < hi)) throw ModelError("clamp requires lo < hi");
  return detail::make(Op::Clamp, {std::move(e)}, lo, hi);
}

inline Expr logistic(Expr e, double steepness) {
  return detail::make(Op::Logistic, {std::move(e)}, steepness);
}

inline Expr sum(std::vector<Expr> terms) {
  if (terms.empty()) return constant(0.0);
  return detail::make(Op::Sum, std::move(terms));
}

}  // namespace expr

inline Expr operator+(Expr l, Expr r) { return expr::add(std::move(l), std::move(r)); }
inline Expr operator-(Expr l, Expr r) { return expr::sub(std::move(l), std::move(r)); }
inline Expr operator*(Expr l, Expr r) { return expr::mul(std::move(l), std::move(r)); }
inline Expr operator/(Expr l, Expr r) { return expr::div(std::move(l), std::move(r)); }
inline Expr operator-(Expr e) { return expr::neg(std::move(e)); }
inline Expr operator+(Expr l, double r) { return std::move(l) + expr::constant(r); }
inline Expr operator+(double l, Expr r) { return expr::constant(l) + std::move(r); }
inline Expr operator-(Expr l, double r) { return std::move(l) - expr::constant(r); }
inline Expr operator-(double l, Expr r) { return expr::constant(l) - std::move(r); }
inline Expr operator*(Expr l, double r) { return std::move(l) * expr::constant(r); }
inline Expr operator*(double l, Expr r) { return expr::constant(l) * std::move(r); }
inline Expr operator/(Expr l, double r) { return std::move(l) / expr::constant(r); }
inline Expr operator/(double l, Expr r) { return expr::constant(l) / std::move(r); }

/// Values bound to the symbols of an expression.
struct EvalEnv {
  std::span<const double> state;
  std::span<const double> params;
  std::span<const double> inputs;
  std::span<const double> mismatch;
  double time = 0.0;
};

/// Highest referenced index + 1 per symbol class.
struct SymbolExtent {
  std::size_t states = 0;
  std::size_t params = 0;
  std::size_t inputs = 0;
  std::size_t mismatch = 0;
};

/// A set of root expressions flattened into topological order. Each distinct
/// node appears once, so shared subexpressions are evaluated once per sweep.
class Tape {
 public:
  Tape() = default;

  explicit Tape(std::span<const Expr> roots) {
    std::unordered_map<const ExprNode*, std::uint32_t> slot;
    struct Frame {
      const ExprNode* node;
      std::size_t next_child;
    };
    std::vector<Frame> stack;
    outputs_.reserve(roots.size());
    for (const auto& root : roots) {
      if (!root.valid()) throw ModelError("tape root is a null expression");
      if (auto it = slot.find(root.id()); it != slot.end()) {
        outputs_.push_back(it->second);
        continue;
      }
      stack.push_back({root.id(), 0});
      while (!stack.empty()) {
        auto& top = stack.back();
        if (top.next_child < top.node->children.size()) {
          const ExprNode* child = top.node->children[top.next_child++].id();
          if (!slot.contains(child)) stack.push_back({child, 0});
          continue;
        }
        const ExprNode* n = top.node;
        stack.pop_back();
        if (slot.contains(n)) continue;
        slot.emplace(n, emit(*n, slot));
      }
      outputs_.push_back(slot.at(root.id()));
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  std::size_t n_outputs() const noexcept { return outputs_.size(); }
  const SymbolExtent& extent() const noexcept { return extent_; }

  /// Evaluates every node; `values` must hold size() entries.
  void forward(const EvalEnv& env, std::span<double> values) const {
    const TapeNode* nodes = nodes_.data();
    double* v = values.data();
    const std::size_t n = nodes_.size();
    for (std::size_t i = 0; i < n; ++i) {
      const TapeNode& t = nodes[i];
      switch (t.op) {
        case Op::Const: v[i] = t.a; break;
        case Op::State: v[i] = env.state[t.index]; break;
        case Op::Param: v[i] = env.params[t.index]; break;
        case Op::Input: v[i] = env.inputs[t.index]; break;
        case Op::Mismatch: v[i] = env.mismatch[t.index]; break;
        case Op::Time: v[i] = env.time; break;
        case Op::Add: v[i] = v[t.lhs] + v[t.rhs]; break;
        case Op::Sub: v[i] = v[t.lhs] - v[t.rhs]; break;
        case Op::Mul: v[i] = v[t.lhs] * v[t.rhs]; break;
        case Op::Div:
          if (v[t.rhs] == 0.0) {
            throw EvalError("division by zero at tape node " + std::to_string(i) +
                            " (denominator is node " + std::to_string(t.rhs) + ")");
          }
          v[i] = v[t.lhs] / v[t.rhs];
          break;
        case Op::Neg: v[i] = -v[t.lhs]; break;
        case Op::Sin: v[i] = std::sin(v[t.lhs]); break;
        case Op::Exp: v[i] = std::exp(v[t.lhs]); break;
        case Op::Log:
          if (!(v[t.lhs] > 0.0)) {
            throw EvalError("log of non-positive value at tape node " + std::to_string(i));
          }
          v[i] = std::log(v[t.lhs]);
          break;
        case Op::Clamp: v[i] = std::min(std::max(v[t.lhs], t.a), t.b); break;
        case Op::Logistic: v[i] = 1.0 / (1.0 + std::exp(-t.a * v[t.lhs])); break;
        case Op::Sum: {
          const std::uint32_t* ops = operands_.data() + t.lhs;
          double s = 0.0;
          for (std::uint32_t k = 0; k < t.rhs; ++k) s += v[ops[k]];
          v[i] = s;
          break;
        }
        case Op::Fold: {
          const double r = v[t.lhs] - 2.0 * std::floor(v[t.lhs] * 0.5);
          v[i] = 1.0 - std::abs(1.0 - r);
          break;
        }
      }
    }
  }

  /// Copies the root values out of a forward sweep.
  void gather(std::span<const double> values, std::span<double> out) const {
    for (std::size_t k = 0; k < outputs_.size(); ++k) out[k] = values[outputs_[k]];
  }

  /// Reverse sweep. Given forward `values`, accumulates seed^T * d(outputs)/d(state)
  /// into `d_state` and seed^T * d(outputs)/d(params) into `d_params`.
  /// `adjoint` is scratch of size(); either gradient span may be empty to skip it.
  void reverse(std::span<const double> values, std::span<const double> seed,
               std::span<double> adjoint, std::span<double> d_state,
               std::span<double> d_params) const {
    const TapeNode* nodes = nodes_.data();
    const double* v = values.data();
    double* g = adjoint.data();
    std::fill(adjoint.begin(), adjoint.end(), 0.0);
    for (std::size_t k = 0; k < outputs_.size(); ++k) g[outputs_[k]] += seed[k];
    const bool want_state = !d_state.empty();
    const bool want_params = !d_params.empty();
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      const double gi = g[i];
      if (gi == 0.0) continue;
      const TapeNode& t = nodes[i];
      switch (t.op) {
        case Op::Const:
        case Op::Input:
        case Op::Mismatch:
        case Op::Time:
          break;
        case Op::State:
          if (want_state) d_state[t.index] += gi;
          break;
        case Op::Param:
          if (want_params) d_params[t.index] += gi;
          break;
        case Op::Add: g[t.lhs] += gi; g[t.rhs] += gi; break;
        case Op::Sub: g[t.lhs] += gi; g[t.rhs] -= gi; break;
        case Op::Mul:
          g[t.lhs] += gi * v[t.rhs];
          g[t.rhs] += gi * v[t.lhs];
          break;
        case Op::Div:
          g[t.lhs] += gi / v[t.rhs];
          g[t.rhs] -= gi * v[i] / v[t.rhs];
          break;
        case Op::Neg: g[t.lhs] -= gi; break;
        case Op::Sin: g[t.lhs] += gi * std::cos(v[t.lhs]); break;
        case Op::Exp: g[t.lhs] += gi * v[i]; break;
        case Op::Log: g[t.lhs] += gi / v[t.lhs]; break;
        case Op::Clamp:
          // Zero subgradient at and beyond the saturation points.
          if (v[t.lhs] > t.a && v[t.lhs] < t.b) g[t.lhs] += gi;
          break;
        case Op::Logistic: g[t.lhs] += gi * t.a * v[i] * (1.0 - v[i]); break;
        case Op::Sum: {
          const std::uint32_t* ops = operands_.data() + t.lhs;
          for (std::uint32_t k = 0; k < t.rhs; ++k) g[ops[k]] += gi;
          break;
        }
        case Op::Fold: {
          const double r = v[t.lhs] - 2.0 * std::floor(v[t.lhs] * 0.5);
          if (r > 0.0 && r < 1.0) g[t.lhs] += gi;
          else if (r > 1.0) g[t.lhs] -= gi;
          break;
        }
      }
    }
  }

  /// Throws ModelError when the environment is too short for the referenced symbols.
  void check_env(const EvalEnv& env) const {
    auto need = [](std::size_t have, std::size_t want, const char* what) {
      if (have < want) {
        throw ModelError(std::string("environment provides ") + std::to_string(have) + " " +
                         what + " values but expression references index " +
                         std::to_string(want - 1));
      }
    };
    need(env.state.size(), extent_.states, "state");
    need(env.params.size(), extent_.params, "param");
    need(env.inputs.size(), extent_.inputs, "input");
    need(env.mismatch.size(), extent_.mismatch, "mismatch");
  }

 private:
  struct TapeNode {
    Op op;
    std::uint32_t lhs = 0;  // first child; Sum: offset into operands_
    std::uint32_t rhs = 0;  // second child; Sum: operand count
    std::uint32_t index = 0;
    double a = 0.0;
    double b = 0.0;
  };

  std::uint32_t emit(const ExprNode& n,
                     const std::unordered_map<const ExprNode*, std::uint32_t>& slot) {
    TapeNode t{n.op};
    t.a = n.a;
    t.b = n.b;
    t.index = static_cast<std::uint32_t>(n.index);
    auto bump = [&](std::size_t& e) { e = std::max(e, n.index + 1); };
    switch (n.op) {
      case Op::State: bump(extent_.states); break;
      case Op::Param: bump(extent_.params); break;
      case Op::Input: bump(extent_.inputs); break;
      case Op::Mismatch: bump(extent_.mismatch); break;
      default: break;
    }
    if (n.op == Op::Sum) {
      t.lhs = static_cast<std::uint32_t>(operands_.size());
      t.rhs = static_cast<std::uint32_t>(n.children.size());
      for (const auto& c : n.children) operands_.push_back(slot.at(c.id()));
    } else {
      if (!n.children.empty()) t.lhs = slot.at(n.children[0].id());
      if (n.children.size() > 1) t.rhs = slot.at(n.children[1].id());
    }
    nodes_.push_back(t);
    return static_cast<std::uint32_t>(nodes_.size() - 1);
  }

  std::vector<TapeNode> nodes_;
  std::vector<std::uint32_t> operands_;
  std::vector<std::uint32_t> outputs_;
  SymbolExtent extent_;
};

/// Number of distinct nodes reachable from `roots`.
inline std::size_t count_unique_nodes(std::span<const Expr> roots) {
  return Tape(roots).size();
}

inline double eval(const Expr& e, const EvalEnv& env) {
  const Tape tape(std::span<const Expr>(&e, 1));
  tape.check_env(env);
  std::vector<double> values(tape.size());
  tape.forward(env, values);
  double out = 0.0;
  tape.gather(values, std::span<double>(&out, 1));
  return out;
}

struct VjpResult {
  std::vector<double> d_state;
  std::vector<double> d_params;
};

/// seed^T * d(exprs)/d(state) and seed^T * d(exprs)/d(params), evaluated at env.
inline VjpResult vjp(std::span<const Expr> exprs, const EvalEnv& env,
                     std::span<const double> seed) {
  if (seed.size() != exprs.size()) throw ModelError("vjp seed length must equal expression count");
  const Tape tape(exprs);
  tape.check_env(env);
  std::vector<double> values(tape.size());
  std::vector<double> adjoint(tape.size());
  tape.forward(env, values);
  VjpResult r{std::vector<double>(env.state.size()), std::vector<double>(env.params.size())};
  tape.reverse(values, seed, adjoint, r.d_state, r.d_params);
  return r;
}

}  // namespace diffanalog
