#pragma once

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "diffanalog/common.hpp"
#include "diffanalog/expr.hpp"
#include "diffanalog/io.hpp"
#include "diffanalog/model.hpp"

/// Model description files.
///
/// Expressions use prefix notation:
///   1.5  (state x)  (param k)  (input u)  (mismatch 0)  (time)
///   (add a b) (sub a b) (mul a b) (div a b) (neg a) (sin a) (exp a) (log a)
///   (fold a) (sum a b ...) (clamp lo hi a) (logistic k a)
/// Symbols are referenced by declared name; states, params and inputs also
/// accept a bare index. Mismatch symbols are referenced by index.
///
/// JSON schema:
///   {"states": [{"name", "init"}], "inputs": [names],
///    "trainables": [{"name", "kind": "analog", "init", "lo", "hi", "shared", "frozen"}
///                 | {"name", "kind": "discrete", "levels", "init_logits", "shared", "frozen"}],
///    "mismatch": [sigma...], "derivatives": [expr per state],
///    "noise": [expr or null per state], "readout": {"times": [...], "map": [expr...]}}
/// A shared subexpression is written once per use, so save(load(text)) is
/// byte-identical to save() of the same model after one load.
namespace diffanalog::model_io {

struct Names {
  std::vector<std::string> states, params, inputs;
};

inline Names names_of(const CompiledModel& m) {
  Names n{m.state_names, {}, m.input_names};
  for (const auto& t : m.trainables) n.params.push_back(t.name);
  return n;
}

inline std::string print(const Expr& e, const Names& names) {
  const auto& n = e.node();
  auto sym = [&](const char* kind, const std::vector<std::string>& table) {
    const std::string label = n.index < table.size() ? table[n.index] : std::to_string(n.index);
    return "(" + std::string(kind) + " " + label + ")";
  };
  switch (n.op) {
    case Op::Const: return io::fmt(n.a);
    case Op::State: return sym("state", names.states);
    case Op::Param: return sym("param", names.params);
    case Op::Input: return sym("input", names.inputs);
    case Op::Mismatch: return "(mismatch " + std::to_string(n.index) + ")";
    case Op::Time: return "(time)";
    case Op::Clamp:
      return "(clamp " + io::fmt(n.a) + " " + io::fmt(n.b) + " " + print(n.children[0], names) + ")";
    case Op::Logistic: return "(logistic " + io::fmt(n.a) + " " + print(n.children[0], names) + ")";
    default: break;
  }
  std::string out = "(" + std::string(op_name(n.op));
  for (const auto& c : n.children) out += " " + print(c, names);
  return out + ")";
}

namespace detail {

class Parser {
 public:
  Parser(std::string_view text, const Names& names) : s_(text), names_(names) {}

  Expr parse_all() {
    Expr e = parse();
    skip_ws();
    if (pos_ != s_.size()) fail("trailing characters");
    return e;
  }

 private:
  [[noreturn]] void fail(const std::string& msg) const {
    throw ModelError("expression parse error at offset " + std::to_string(pos_) + ": " + msg +
                     " in '" + std::string(s_) + "'");
  }

  void skip_ws() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
  }

  std::string token() {
    skip_ws();
    const std::size_t a = pos_;
    while (pos_ < s_.size() && !std::isspace(static_cast<unsigned char>(s_[pos_])) && s_[pos_] != '(' &&
           s_[pos_] != ')') {
      ++pos_;
    }
    if (a == pos_) fail("expected a token");
    return std::string(s_.substr(a, pos_ - a));
  }

  double number() {
    const std::string t = token();
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(t, &used);
    } catch (const std::exception&) {
      fail("'" + t + "' is not a number");
    }
    if (used != t.size()) fail("'" + t + "' is not a number");
    return v;
  }

  std::size_t resolve(const std::string& t, const std::vector<std::string>& table, const char* kind) {
    for (std::size_t i = 0; i < table.size(); ++i) {
      if (table[i] == t) return i;
    }
    if (!t.empty() && std::all_of(t.begin(), t.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
      return std::stoul(t);
    }
    fail(std::string("unknown ") + kind + " '" + t + "'");
  }

  void expect(char c) {
    skip_ws();
    if (pos_ >= s_.size() || s_[pos_] != c) fail(std::string("expected '") + c + "'");
    ++pos_;
  }

  bool peek(char c) {
    skip_ws();
    return pos_ < s_.size() && s_[pos_] == c;
  }

  Expr parse() {
    using namespace expr;
    skip_ws();
    if (!peek('(')) return constant(number());
    expect('(');
    const std::string op = token();
    Expr out;
    if (op == "state") out = state(resolve(token(), names_.states, "state"));
    else if (op == "param") out = param(resolve(token(), names_.params, "param"));
    else if (op == "input") out = input(resolve(token(), names_.inputs, "input"));
    else if (op == "mismatch") out = mismatch_ref(resolve(token(), {}, "mismatch"));
    else if (op == "time") out = time();
    else if (op == "clamp") {
      const double lo = number(), hi = number();
      out = clamp(parse(), lo, hi);
    } else if (op == "logistic") {
      const double k = number();
      out = logistic(parse(), k);
    } else {
      std::vector<Expr> args;
      while (!peek(')')) {
        if (pos_ >= s_.size()) fail("unterminated expression");
        args.push_back(parse());
      }
      auto arity = [&](std::size_t n) {
        if (args.size() != n) fail("'" + op + "' takes " + std::to_string(n) + " operands");
      };
      if (op == "add") { arity(2); out = add(args[0], args[1]); }
      else if (op == "sub") { arity(2); out = sub(args[0], args[1]); }
      else if (op == "mul") { arity(2); out = mul(args[0], args[1]); }
      else if (op == "div") { arity(2); out = div(args[0], args[1]); }
      else if (op == "neg") { arity(1); out = neg(args[0]); }
      else if (op == "sin") { arity(1); out = sin(args[0]); }
      else if (op == "exp") { arity(1); out = exp(args[0]); }
      else if (op == "log") { arity(1); out = log(args[0]); }
      else if (op == "fold") { arity(1); out = fold(args[0]); }
      else if (op == "sum") {
        if (args.empty()) fail("'sum' needs at least one operand");
        out = sum(std::move(args));
      } else {
        fail("unknown operator '" + op + "'");
      }
    }
    expect(')');
    return out;
  }

  std::string_view s_;
  const Names& names_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline Expr parse(std::string_view text, const Names& names) {
  return detail::Parser(text, names).parse_all();
}

inline nlohmann::json to_json(const CompiledModel& m) {
  using nlohmann::json;
  const Names names = names_of(m);
  json states = json::array();
  for (std::size_t i = 0; i < m.n_states(); ++i) {
    states.push_back({{"name", m.state_names[i]}, {"init", m.initial_state[i]}});
  }
  json trainables = json::array();
  for (const auto& t : m.trainables) {
    json j{{"name", t.name}, {"shared", t.shared}, {"frozen", t.frozen}};
    if (t.is_analog()) {
      j["kind"] = "analog";
      j["init"] = t.analog().init;
      j["lo"] = t.analog().lo;
      j["hi"] = t.analog().hi;
    } else {
      j["kind"] = "discrete";
      j["levels"] = t.discrete().levels;
      j["init_logits"] = t.discrete().init_logits;
    }
    trainables.push_back(std::move(j));
  }
  json mismatch = json::array();
  for (const auto& d : m.mismatch) mismatch.push_back(d.sigma);
  json derivs = json::array(), noise = json::array(), map = json::array();
  for (const auto& e : m.derivative) derivs.push_back(print(e, names));
  for (const auto& e : m.noise) noise.push_back(e.valid() ? json(print(e, names)) : json());
  for (const auto& e : m.readout_map) map.push_back(print(e, names));
  return {{"states", states},
          {"inputs", m.input_names},
          {"trainables", trainables},
          {"mismatch", mismatch},
          {"derivatives", derivs},
          {"noise", noise},
          {"readout", {{"times", m.readout_times}, {"map", map}}}};
}

inline CompiledModel from_json(const nlohmann::json& j, std::optional<double> dt = std::nullopt) {
  try {
    ModelBuilder b;
    Names names;
    std::vector<double> x0;
    for (const auto& s : j.at("states")) {
      names.states.push_back(s.at("name").get<std::string>());
      b.add_state(names.states.back());
      x0.push_back(s.value("init", 0.0));
    }
    for (const auto& u : j.value("inputs", nlohmann::json::array())) {
      names.inputs.push_back(u.get<std::string>());
      b.declare_input(names.inputs.back());
    }
    for (const auto& t : j.value("trainables", nlohmann::json::array())) {
      const auto name = t.at("name").get<std::string>();
      const auto kind = t.at("kind").get<std::string>();
      TrainableDecl d;
      if (kind == "analog") {
        d = analog_trainable(name, t.at("init").get<double>(), t.at("lo").get<double>(),
                             t.at("hi").get<double>());
      } else if (kind == "discrete") {
        d = discrete_trainable(name, t.at("levels").get<std::vector<double>>(),
                               t.at("init_logits").get<std::vector<double>>());
      } else {
        throw ModelError("trainable '" + name + "': unknown kind '" + kind + "'");
      }
      d.shared = t.value("shared", false);
      d.frozen = t.value("frozen", false);
      names.params.push_back(name);
      b.add_trainable(std::move(d));
    }
    for (const auto& s : j.value("mismatch", nlohmann::json::array())) b.declare_mismatch(s.get<double>());
    const auto& derivs = j.at("derivatives");
    if (derivs.size() != names.states.size()) throw ModelError("need one derivative per state");
    for (std::size_t i = 0; i < derivs.size(); ++i) {
      b.set_derivative(i, parse(derivs[i].get<std::string>(), names));
    }
    if (j.contains("noise")) {
      const auto& noise = j.at("noise");
      if (noise.size() != names.states.size()) throw ModelError("need one noise entry (or null) per state");
      for (std::size_t i = 0; i < noise.size(); ++i) {
        if (!noise[i].is_null()) b.set_noise(i, parse(noise[i].get<std::string>(), names));
      }
    }
    const auto& r = j.at("readout");
    std::vector<Expr> map;
    for (const auto& e : r.at("map")) map.push_back(parse(e.get<std::string>(), names));
    b.set_readout(r.at("times").get<std::vector<double>>(), std::move(map));
    b.set_initial_state(std::move(x0));
    return compile(b, dt);
  } catch (const nlohmann::json::exception& e) {
    throw ModelError(std::string("malformed model description: ") + e.what());
  }
}

inline std::string save_text(const CompiledModel& m) { return to_json(m).dump(2) + "\n"; }

inline CompiledModel load_text(const std::string& text, std::optional<double> dt = std::nullopt) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ModelError(std::string("model description is not valid JSON: ") + e.what());
  }
  return from_json(j, dt);
}

inline void save(const std::filesystem::path& path, const CompiledModel& m) {
  io::write_file(path, save_text(m));
}

inline CompiledModel load(const std::filesystem::path& path, std::optional<double> dt = std::nullopt) {
  return load_text(io::read_file(path), dt);
}

}  // namespace diffanalog::model_io
