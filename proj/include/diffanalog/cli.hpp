#pragma once

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "diffanalog/common.hpp"
#include "diffanalog/gradient.hpp"
#include "diffanalog/io.hpp"
#include "diffanalog/model_io.hpp"
#include "diffanalog/optim.hpp"
#include "diffanalog/paradigm/cnn.hpp"
#include "diffanalog/paradigm/obc.hpp"
#include "diffanalog/paradigm/tln.hpp"
#include "diffanalog/solver.hpp"

/// Command-line front end: simulate / optimize / evaluate for the built-in
/// paradigms or a model description file.
///
/// Every output embeds the resolved run configuration except `workers` and
/// `out`, which never influence results. Datasets and inputs come from
/// `data_seed`; mismatch, noise, Gumbel draws and batching come from `seed`.
namespace diffanalog::cli {

using nlohmann::json;

/// Defaults and schema in one: every accepted key appears here. A null leaf
/// accepts a string, a number or null.
inline json default_config() {
  return json::parse(R"({
    "command": "simulate",
    "paradigm": "cnn",
    "seed": 0,
    "data_seed": 0,
    "workers": 0,
    "out": null,
    "checkpoint": null,
    "solver": {"method": null, "dt": null, "t_end": null},
    "optimizer": {"steps": 64, "lr": null, "batch": null, "mc_samples": 1, "grad_method": "backprop"},
    "cnn": {"sigma": 0.1, "t3": null, "train_size": 256, "test_size": 64, "polarity": "unipolar",
            "symmetric": true, "input": null},
    "obc": {"alpha": 0.025, "bitwidths": [1], "setups": ["hebbian,couple&lock"], "lock": 1.0,
            "test_size": 8192, "sweep_size": 256, "hebbian_logit": 2.0},
    "tln": {"branches": 32, "segments": 4, "instances": 8, "test_instances": 48, "sets": 8,
            "steepness": 50.0, "sigma": 0.1, "noise_std": 1e-7, "fix_center": false,
            "challenges": null},
    "custom": {"dataset": null, "inputs": []}
  })");
}

/// Collects every schema violation of `user` against `schema` into `errors`
/// and merges accepted values into `out`.
inline void merge_checked(const json& schema, const json& user, json& out, const std::string& path,
                          std::vector<std::string>& errors) {
  if (!user.is_object()) {
    errors.push_back((path.empty() ? "config" : path) + ": expected an object");
    return;
  }
  for (const auto& [key, value] : user.items()) {
    const std::string at = path.empty() ? key : path + "." + key;
    if (!schema.contains(key)) {
      errors.push_back(at + ": unknown key");
      continue;
    }
    const json& def = schema.at(key);
    if (def.is_object()) {
      merge_checked(def, value, out[key], at, errors);
      continue;
    }
    bool ok = false;
    if (def.is_null()) ok = value.is_null() || value.is_string() || value.is_number();
    else if (def.is_boolean()) ok = value.is_boolean();
    else if (def.is_number_unsigned() || def.is_number_integer()) ok = value.is_number_unsigned();
    else if (def.is_number()) ok = value.is_number();
    else if (def.is_string()) ok = value.is_string();
    else if (def.is_array()) ok = value.is_array();
    if (!ok) {
      errors.push_back(at + ": expected " + std::string(def.is_null() ? "string, number or null"
                                                                      : def.type_name()) +
                       ", got " + value.type_name());
      continue;
    }
    out[key] = value;
  }
}

struct Overrides {
  std::optional<std::string> config, paradigm, out, checkpoint, method, command;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps, batch, mc_samples, workers;
  std::optional<double> lr, alpha;
};

/// Defaults <- config file <- flags. Throws ConfigError listing every problem.
inline json resolve_config(const Overrides& o) {
  json cfg = default_config();
  std::vector<std::string> errors;
  if (o.config) {
    json user;
    try {
      user = json::parse(io::read_file(*o.config));
    } catch (const json::parse_error& e) {
      throw ConfigError(*o.config + ": " + e.what());
    }
    merge_checked(default_config(), user, cfg, "", errors);
  }
  if (o.command) cfg["command"] = *o.command;
  if (o.paradigm) cfg["paradigm"] = *o.paradigm;
  if (o.seed) cfg["seed"] = *o.seed;
  if (o.out) cfg["out"] = *o.out;
  if (o.checkpoint) cfg["checkpoint"] = *o.checkpoint;
  if (o.workers) cfg["workers"] = *o.workers;
  if (o.steps) cfg["optimizer"]["steps"] = *o.steps;
  if (o.lr) cfg["optimizer"]["lr"] = *o.lr;
  if (o.batch) cfg["optimizer"]["batch"] = *o.batch;
  if (o.mc_samples) cfg["optimizer"]["mc_samples"] = *o.mc_samples;
  if (o.method) cfg["optimizer"]["grad_method"] = *o.method;
  if (o.alpha) cfg["obc"]["alpha"] = *o.alpha;

  const std::string cmd = cfg["command"].get<std::string>();
  if (cmd != "simulate" && cmd != "optimize" && cmd != "evaluate") {
    errors.push_back("command: must be simulate, optimize or evaluate, got '" + cmd + "'");
  }
  const std::string par = cfg["paradigm"].get<std::string>();
  if (par != "cnn" && par != "obc" && par != "tln" && !std::filesystem::exists(par)) {
    errors.push_back("paradigm: '" + par + "' is neither cnn, obc, tln nor an existing model file");
  }
  try {
    parse_grad_method(cfg["optimizer"]["grad_method"].get<std::string>());
  } catch (const Error& e) {
    errors.push_back(std::string("optimizer.grad_method: ") + e.what());
  }
  if (!cfg["solver"]["method"].is_null()) {
    if (!cfg["solver"]["method"].is_string()) {
      errors.push_back("solver.method: expected a string");
    } else {
      try {
        parse_method(cfg["solver"]["method"].get<std::string>());
      } catch (const Error& e) {
        errors.push_back(std::string("solver.method: ") + e.what());
      }
    }
  }
  for (const char* k : {"dt", "t_end"}) {
    const auto& v = cfg["solver"][k];
    if (!v.is_null() && !(v.is_number() && v.get<double>() > 0.0)) {
      errors.push_back(std::string("solver.") + k + ": must be a positive number or null");
    }
  }
  for (const char* k : {"lr", "batch"}) {
    const auto& v = cfg["optimizer"][k];
    if (!v.is_null() && !(v.is_number() && v.get<double>() > 0.0)) {
      errors.push_back(std::string("optimizer.") + k + ": must be a positive number or null");
    }
  }
  if (cfg["optimizer"]["mc_samples"].get<std::size_t>() == 0) errors.push_back("optimizer.mc_samples: must be >= 1");
  if (cfg["command"] == "evaluate" && !cfg["checkpoint"].is_null() &&
      !std::filesystem::exists(cfg["checkpoint"].get<std::string>())) {
    errors.push_back("checkpoint: file '" + cfg["checkpoint"].get<std::string>() + "' does not exist");
  }
  for (const auto& b : cfg["obc"]["bitwidths"]) {
    if (!b.is_number_unsigned() || b.get<int>() < 1 || b.get<int>() > 8) {
      errors.push_back("obc.bitwidths: entries must be integers in [1, 8]");
    }
  }
  for (const auto& s : cfg["obc"]["setups"]) {
    static const std::vector<std::string> known{"hebbian,-", "random,couple", "random,couple&lock",
                                                "hebbian,couple&lock"};
    if (!s.is_string() || std::find(known.begin(), known.end(), s.get<std::string>()) == known.end()) {
      errors.push_back("obc.setups: unknown setup " + s.dump());
    }
  }
  if (!errors.empty()) {
    std::string msg = "invalid configuration (" + std::to_string(errors.size()) + " problem" +
                      (errors.size() == 1 ? "" : "s") + "):";
    for (const auto& e : errors) msg += "\n  " + e;
    throw ConfigError(msg);
  }
  return cfg;
}

/// Resolved config minus keys that must not influence outputs.
inline json provenance_of(const json& cfg) {
  json p = cfg;
  p.erase("workers");
  p.erase("out");
  return p;
}

class Run {
 public:
  explicit Run(json cfg) : cfg_(std::move(cfg)), prov_(provenance_of(cfg_)) {
    out_ = cfg_["out"].is_null() ? std::filesystem::path(std::getenv("DIFFANALOG_OUT") ? std::getenv("DIFFANALOG_OUT") : "out")
                                 : std::filesystem::path(cfg_["out"].get<std::string>());
    const std::size_t w = cfg_["workers"].get<std::size_t>();
    workers_ = w > 0 ? w : std::max(1u, std::thread::hardware_concurrency());
    seed_ = cfg_["seed"].get<std::uint64_t>();
    data_seed_ = cfg_["data_seed"].get<std::uint64_t>();
  }

  const std::filesystem::path& out_dir() const { return out_; }

  void execute() {
    const std::string par = cfg_["paradigm"].get<std::string>();
    const std::string cmd = cfg_["command"].get<std::string>();
    if (par == "cnn") run_cnn(cmd);
    else if (par == "obc") run_obc(cmd);
    else if (par == "tln") run_tln(cmd);
    else run_custom(cmd, par);
  }

 private:
  // ---- shared helpers ----------------------------------------------------

  std::string prov_line() const { return prov_.dump(); }

  void write_report(json body, const std::string& name = "report.json") const {
    body["provenance"] = prov_;
    io::write_file(out_ / name, body.dump(2) + "\n");
  }

  void write_trajectory(const Trajectory& tr, const CompiledModel& m) const {
    std::ostringstream s, r;
    write_csv_rows(s, "x", tr.times, tr.states, prov_line());
    write_csv_rows(r, "y", m.readout_times, tr.readouts, prov_line());
    io::write_file(out_ / "trajectory.csv", s.str());
    io::write_file(out_ / "readouts.csv", r.str());
  }

  SolveConfig solver(SolveConfig base) const {
    const auto& s = cfg_["solver"];
    if (!s["method"].is_null()) base.method = parse_method(s["method"].get<std::string>());
    if (!s["dt"].is_null()) base.dt = s["dt"].get<double>();
    if (!s["t_end"].is_null()) base.t_end = s["t_end"].get<double>();
    return base;
  }

  std::size_t steps() const { return cfg_["optimizer"]["steps"].get<std::size_t>(); }
  double lr(double def) const {
    const auto& v = cfg_["optimizer"]["lr"];
    return v.is_null() ? def : v.get<double>();
  }
  std::size_t batch(std::size_t def) const {
    const auto& v = cfg_["optimizer"]["batch"];
    return v.is_null() ? def : v.get<std::size_t>();
  }
  GradMethod grad_method() const {
    return parse_grad_method(cfg_["optimizer"]["grad_method"].get<std::string>());
  }

  McOptions mc(const SolveConfig& solve) const {
    McOptions o;
    o.n_mismatch = cfg_["optimizer"]["mc_samples"].get<std::size_t>();
    o.seed = seed_;
    o.solve = solve;
    o.method = grad_method();
    o.workers = workers_;
    return o;
  }

  /// Parameters to evaluate: the checkpoint's best store when given, else the model's init.
  TrainableStore eval_store(const CompiledModel& m) const {
    if (cfg_["checkpoint"].is_null()) return TrainableStore::init(m);
    const json j = json::parse(io::read_file(cfg_["checkpoint"].get<std::string>()));
    TrainableStore s = j.contains("best") ? detail::store_from_json(j.at("best"))
                                          : detail::store_from_json(j.at("store"));
    s.check(m);
    return s;
  }

  /// Runs (or resumes from --checkpoint) an optimization, writing the log and
  /// checkpoints after every step.
  template <class Objective>
  TrainState optimize(const CompiledModel& m, const TrainConfig& tc, Objective&& obj) const {
    TrainState st;
    if (!cfg_["checkpoint"].is_null()) {
      st = load_checkpoint(cfg_["checkpoint"].get<std::string>());
      st.store.check(m);
    } else {
      st = start_training(TrainableStore::init(m), tc);
    }
    auto dump = [&](const TrainState& s) {
      json ck = checkpoint_json(s);
      ck["provenance"] = prov_;
      io::write_file(out_ / "checkpoint.json", ck.dump(2) + "\n");
      io::write_file(out_ / "history.csv", history_csv(s.history, prov_line()));
    };
    dump(st);
    train_steps(st, tc, obj, tc.n_steps, dump);
    json best{{"best", detail::store_json(st.best)},
              {"best_loss", std::isfinite(st.best_loss) ? json(st.best_loss) : json()},
              {"best_step", st.best_step},
              {"provenance", prov_}};
    io::write_file(out_ / "best.json", best.dump(2) + "\n");
    return st;
  }

  static json named_params(const CompiledModel& m, const TrainableStore& s) {
    const auto pm = map_params(m, s, ParamMode::Hard, 1.0, nullptr);
    json j = json::object();
    for (std::size_t i = 0; i < m.n_params(); ++i) j[m.trainables[i].name] = pm.values[i];
    return j;
  }

  // ---- CNN ---------------------------------------------------------------

  cnn::CnnConfig cnn_config() const {
    const auto& c = cfg_["cnn"];
    cnn::CnnConfig cfg;
    cfg.sigma = c["sigma"].get<double>();
    cfg.polarity = cnn::parse_polarity(c["polarity"].get<std::string>());
    cfg.init.symmetric = c["symmetric"].get<bool>();
    if (!c["t3"].is_null()) {
      cfg.t3 = c["t3"].get<double>();
      cfg.dt = cfg.t3 / 200.0;
    }
    const SolveConfig s = solver(cfg.solve_config());
    cfg.dt = s.dt;
    cfg.t3 = s.t_end;
    cfg.method = s.method;
    return cfg;
  }

  void run_cnn(const std::string& cmd) const {
    const cnn::CnnConfig cfg = cnn_config();
    const CompiledModel m = cnn::build_cnn(cfg);
    const LossSpec loss = cnn::loss_spec(cfg);
    const auto& c = cfg_["cnn"];
    auto test_set = [&] {
      return cnn::to_batch(cnn::synth_silhouettes(c["test_size"].get<std::size_t>(), cfg.cols, cfg.rows,
                                                  derive_seed(data_seed_, {stream::kData, 1}), cfg),
                           cfg, m);
    };
    McOptions eo = mc(cfg.solve_config());
    eo.seed = derive_seed(seed_, {stream::kChallenge});
    if (cmd == "simulate") {
      cnn::Sample s;
      if (!c["input"].is_null()) {
        s.image = io::read_pgm(c["input"].get<std::string>());
        s.edges = cnn::reference_edge(s.image, cfg);
      } else {
        s = cnn::synth_silhouettes(1, cfg.cols, cfg.rows, data_seed_, cfg).front();
      }
      if (s.image.width != cfg.cols || s.image.height != cfg.rows) {
        throw ConfigError("input image must be " + std::to_string(cfg.cols) + "x" + std::to_string(cfg.rows));
      }
      Rng rng(derive_seed(seed_, {stream::kMismatch}));
      const auto delta = sample_mismatch(m.sigmas(), rng);
      const auto pm = map_params(m, TrainableStore::init(m), ParamMode::Hard, 1.0, nullptr);
      const Trajectory tr = solve(m, pm.values, delta, cnn::encode_input(s.image, cfg.polarity),
                                  m.initial_state, cfg.solve_config());
      write_trajectory(tr, m);
      const io::Image out = cnn::readout_image(tr.readouts, cfg.cols, cfg.rows);
      io::write_pgm(out_ / "readout.pgm", out);
      io::write_pgm(out_ / "reference.pgm", s.edges);
      io::write_pgm(out_ / "input.pgm", s.image);
      write_report({{"mse", cnn::mse_loss(out, s.edges)}, {"saturated_fraction", cnn::saturated_fraction(tr)}});
    } else if (cmd == "optimize") {
      const auto train_set = cnn::to_batch(
          cnn::synth_silhouettes(c["train_size"].get<std::size_t>(), cfg.cols, cfg.rows,
                                 derive_seed(data_seed_, {stream::kData, 0}), cfg),
          cfg, m);
      const auto test = test_set();
      McObjective obj{&m, &train_set, loss, batch(128), mc(cfg.solve_config())};
      TrainConfig tc;
      tc.n_steps = steps();
      tc.lr = lr(0.1);
      const TrainState st = optimize(m, tc, obj);
      const double l0 = mc_loss(m, TrainableStore::init(m), test, loss, eo).mean;
      const double l1 = mc_loss(m, st.best, test, loss, eo).mean;
      write_report({{"initial_test_mse", l0},
                    {"best_test_mse", l1},
                    {"ratio", l0 > 0.0 ? json(l1 / l0) : json()},
                    {"best_step", st.best_step},
                    {"best_train_loss", st.best_loss},
                    {"params", named_params(m, st.best)}});
    } else {
      const TrainableStore s = eval_store(m);
      const LossEstimate e = mc_loss(m, s, test_set(), loss, eo);
      write_report({{"test_mse", e.mean}, {"test_mse_std", e.std}, {"params", named_params(m, s)}});
    }
  }

  // ---- OBC ---------------------------------------------------------------

  obc::ObcConfig obc_config() const {
    obc::ObcConfig cfg;
    cfg.noise_alpha = cfg_["obc"]["alpha"].get<double>();
    cfg.hebbian_logit = cfg_["obc"]["hebbian_logit"].get<double>();
    const SolveConfig s = solver(cfg.solve_config());
    cfg.dt = s.dt;
    cfg.t_measure = s.t_end;
    return cfg;
  }

  static obc::Setup parse_setup(const std::string& s) {
    for (auto v : {obc::Setup::HebbianBaseline, obc::Setup::RandomCouple, obc::Setup::RandomCoupleLock,
                   obc::Setup::HebbianCoupleLock}) {
      if (s == obc::to_string(v)) return v;
    }
    throw ConfigError("unknown OBC setup '" + s + "'");
  }

  void run_obc(const std::string& cmd) const {
    const auto set = obc::default_digits();
    obc::ObcConfig cfg = obc_config();
    const auto& c = cfg_["obc"];
    if (cmd == "simulate") {
      cfg.bitwidth = c["bitwidths"].at(0).get<int>();
      cfg.lock_init = c["lock"].get<double>();
      const CompiledModel m = obc::build_obc(cfg, obc::initial_logits(cfg, set, seed_));
      const obc::Pair p = obc::noisy_pair(set, data_seed_, 0);
      const auto pm = map_params(m, TrainableStore::init(m), ParamMode::Hard, 1.0, nullptr);
      SolveConfig sc = cfg.solve_config();
      sc.noise_seed = derive_seed(seed_, {stream::kNoise});
      const Trajectory tr = solve(m, pm.values, {}, {}, p.noisy, sc);
      write_trajectory(tr, m);
      double mse = 0.0;
      for (std::size_t i = 0; i < p.ideal.size(); ++i) {
        const double d = tr.readouts(0, i) - p.ideal[i];
        mse += d * d;
      }
      write_report({{"mse", mse / static_cast<double>(p.ideal.size())}, {"noisy", p.noisy}, {"ideal", p.ideal}});
      return;
    }
    obc::ExperimentOptions opt;
    opt.batch_size = batch(64);
    opt.n_steps = steps();
    opt.lr = lr(0.1);
    opt.n_test = c["test_size"].get<std::size_t>();
    opt.n_sweep = c["sweep_size"].get<std::size_t>();
    opt.workers = workers_;
    opt.seed = seed_;
    if (cmd == "optimize") {
      if (!cfg_["checkpoint"].is_null()) throw ConfigError("OBC optimize runs whole setups and cannot resume");
      json table = json::array();
      for (const auto& b : c["bitwidths"]) {
        json row{{"bitwidth", b}};
        for (const auto& sname : c["setups"]) {
          const obc::Setup setup = parse_setup(sname.get<std::string>());
          const obc::SetupResult r = obc::run_setup(setup, b.get<int>(), set, cfg, opt);
          row[sname.get<std::string>()] = {{"test_mse", r.test_loss}, {"lock", r.lock}};
          const std::string tag = "b" + std::to_string(b.get<int>()) + "_" + std::to_string(static_cast<int>(setup));
          io::write_file(out_ / ("history_" + tag + ".csv"), history_csv(r.history, prov_line()));
          json best{{"best", detail::store_json(r.store)},
                    {"bitwidth", b},
                    {"setup", sname},
                    {"couplings", r.couplings},
                    {"lock", r.lock},
                    {"provenance", prov_}};
          io::write_file(out_ / ("best_" + tag + ".json"), best.dump(2) + "\n");
        }
        table.push_back(row);
      }
      write_report({{"table", table}});
    } else {
      cfg.bitwidth = c["bitwidths"].at(0).get<int>();
      const CompiledModel m = obc::build_obc(cfg, obc::initial_logits(cfg, set, seed_));
      const TrainableStore s = eval_store(m);
      const auto test = obc::to_batch(obc::noisy_dataset(set, opt.n_test, derive_seed(seed_, {stream::kData, 2})));
      const double l = obc::evaluate(m, s, test, cfg, derive_seed(seed_, {stream::kChallenge}), workers_);
      write_report({{"test_mse", l}, {"bitwidth", cfg.bitwidth}, {"lock", obc::get_lock(m, s)},
                    {"couplings", obc::hard_couplings(m, s)}});
    }
  }

  // ---- TLN ---------------------------------------------------------------

  tln::SsPufConfig tln_config() const {
    const auto& c = cfg_["tln"];
    tln::SsPufConfig cfg;
    cfg.n_branches = c["branches"].get<std::size_t>();
    cfg.segments = c["segments"].get<std::size_t>();
    cfg.logistic_steepness = c["steepness"].get<double>();
    cfg.mismatch_sigma = c["sigma"].get<double>();
    cfg.noise_std = c["noise_std"].get<double>();
    cfg.fix_center = c["fix_center"].get<bool>();
    const SolveConfig s = solver(cfg.solve_config());
    cfg.dt = s.dt;
    cfg.t_readout = s.t_end;
    cfg.method = s.method == Method::EulerMaruyama ? Method::Rk4 : s.method;
    return cfg;
  }

  json puf_json(const tln::PufReport& r) const {
    return {{"i2o", r.i2o_hard},
            {"i2o_soft", r.i2o_soft},
            {"noisy_i2o", r.noisy_i2o_hard},
            {"response_bias", r.response_bias},
            {"flip_rate", r.flip_rate},
            {"noise_stability", r.noise_stability},
            {"instances", r.n_instances},
            {"sets", r.n_sets}};
  }

  void run_tln(const std::string& cmd) const {
    const tln::SsPufConfig cfg = tln_config();
    const auto& c = cfg_["tln"];
    const CompiledModel quiet = tln::build_sspuf(tln::noiseless(cfg));
    tln::I2oOptions eval{c["test_instances"].get<std::size_t>(), c["sets"].get<std::size_t>(),
                         derive_seed(seed_, {stream::kChallenge}), workers_, grad_method()};
    if (cmd == "simulate") {
      tln::Challenge ch;
      if (!c["challenges"].is_null()) {
        const auto all = tln::parse_challenges(io::read_file(c["challenges"].get<std::string>()), cfg.n_branches);
        if (all.empty()) throw ConfigError("challenge file is empty");
        ch = all.front();
      } else {
        Rng rng(derive_seed(data_seed_, {stream::kChallenge}));
        ch = tln::random_challenge(cfg.n_branches, rng);
      }
      const bool noisy = !cfg_["solver"]["method"].is_null() &&
                         parse_method(cfg_["solver"]["method"].get<std::string>()) == Method::EulerMaruyama;
      const CompiledModel m = noisy ? tln::build_sspuf(cfg) : quiet;
      SolveConfig sc = cfg.solve_config();
      if (noisy) {
        sc.method = Method::EulerMaruyama;
        sc.noise_seed = derive_seed(seed_, {stream::kNoise});
      }
      const auto delta = tln::instance_delta(m, seed_, 0);
      const auto pm = map_params(m, TrainableStore::init(m), ParamMode::Hard, 1.0, nullptr);
      const Trajectory tr = solve(m, pm.values, delta, tln::challenge_inputs(ch), m.initial_state, sc);
      write_trajectory(tr, m);
      write_report({{"challenge", tln::to_hex(ch)},
                    {"response_soft", tr.readouts(0, 0)},
                    {"response", tr.readouts(0, 0) > 0.5 ? 1 : 0}});
    } else if (cmd == "optimize") {
      tln::I2oObjective obj{&quiet,
                            {c["instances"].get<std::size_t>(), c["sets"].get<std::size_t>(), seed_,
                             workers_, grad_method()},
                            cfg.solve_config()};
      TrainConfig tc;
      tc.n_steps = steps();
      tc.lr = lr(0.005);
      const TrainState st = optimize(quiet, tc, obj);
      write_report({{"initial", puf_json(tln::evaluate_puf(cfg, TrainableStore::init(quiet), eval))},
                    {"optimized", puf_json(tln::evaluate_puf(cfg, st.best, eval))},
                    {"best_step", st.best_step},
                    {"best_train_loss", st.best_loss},
                    {"params", named_params(quiet, st.best)}});
    } else {
      const TrainableStore s = eval_store(quiet);
      json rep = puf_json(tln::evaluate_puf(cfg, s, eval));
      rep["params"] = named_params(quiet, s);
      write_report(rep);
    }
  }

  // ---- model description file -------------------------------------------

  std::vector<BatchItem> custom_dataset(const CompiledModel& m) const {
    const auto& d = cfg_["custom"]["dataset"];
    if (d.is_null()) throw ConfigError("custom.dataset is required to optimize or evaluate a model file");
    const json j = json::parse(io::read_file(d.get<std::string>()));
    std::vector<BatchItem> items;
    for (const auto& it : j.at("items")) {
      BatchItem b;
      b.inputs = it.value("inputs", std::vector<double>{});
      b.x0 = it.contains("x0") ? it.at("x0").get<std::vector<double>>() : m.initial_state;
      const auto t = it.at("targets").get<std::vector<std::vector<double>>>();
      b.targets = Matrix(t.size(), t.empty() ? 0 : t[0].size());
      for (std::size_t r = 0; r < t.size(); ++r) {
        if (t[r].size() != b.targets.cols) throw ConfigError("dataset targets must be rectangular");
        std::copy(t[r].begin(), t[r].end(), b.targets.row(r).begin());
      }
      if (b.targets.rows != m.n_readouts() || b.targets.cols != m.n_outputs()) {
        throw ConfigError("dataset targets must be n_readouts x n_outputs");
      }
      items.push_back(std::move(b));
    }
    if (items.empty()) throw ConfigError("dataset has no items");
    return items;
  }

  void run_custom(const std::string& cmd, const std::string& path) const {
    SolveConfig base;
    base.dt = 0.01;
    const CompiledModel probe = model_io::load(path);
    base.t_end = probe.readout_times.back();
    const SolveConfig sc = solver(base);
    const CompiledModel m = model_io::load(path, sc.dt);
    const LossSpec loss = LossSpec::mse(Matrix(m.n_readouts(), m.n_outputs()));
    if (cmd == "simulate") {
      std::vector<double> inputs(m.n_inputs(), 0.0);
      const auto& given = cfg_["custom"]["inputs"];
      if (!given.empty()) {
        if (given.size() != m.n_inputs()) throw ConfigError("custom.inputs length does not match the model inputs");
        inputs = given.get<std::vector<double>>();
      }
      Rng rng(derive_seed(seed_, {stream::kMismatch}));
      const auto delta = sample_mismatch(m.sigmas(), rng);
      const auto pm = map_params(m, TrainableStore::init(m), ParamMode::Hard, 1.0, nullptr);
      SolveConfig s = sc;
      s.noise_seed = derive_seed(seed_, {stream::kNoise});
      const Trajectory tr = solve(m, pm.values, delta, inputs, m.initial_state, s);
      write_trajectory(tr, m);
      write_report({{"readouts", tr.readouts.data}});
    } else if (cmd == "optimize") {
      const auto data = custom_dataset(m);
      McObjective obj{&m, &data, loss, batch(data.size()), mc(sc)};
      TrainConfig tc;
      tc.n_steps = steps();
      tc.lr = lr(0.1);
      const TrainState st = optimize(m, tc, obj);
      write_report({{"best_step", st.best_step}, {"best_train_loss", st.best_loss},
                    {"params", named_params(m, st.best)}});
    } else {
      const auto data = custom_dataset(m);
      McOptions eo = mc(sc);
      eo.seed = derive_seed(seed_, {stream::kChallenge});
      const LossEstimate e = mc_loss(m, eval_store(m), data, loss, eo);
      write_report({{"loss", e.mean}, {"loss_std", e.std}});
    }
  }

  json cfg_;
  json prov_;
  std::filesystem::path out_;
  std::size_t workers_ = 1;
  std::uint64_t seed_ = 0;
  std::uint64_t data_seed_ = 0;
};

inline const char* error_kind(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return "config";
  if (dynamic_cast<const ModelError*>(&e)) return "model";
  if (dynamic_cast<const AdjointInstabilityError*>(&e)) return "adjoint_instability";
  if (dynamic_cast<const SolveError*>(&e)) return "solve";
  return "runtime";
}

/// Entry point. Returns the process exit status: 0 on success, 2 for CLI or
/// configuration errors, 1 for failures during the run.
inline int main(int argc, const char* const* argv) {
  CLI::App app{"Differentiable simulation and optimization of analog systems"};
  Overrides o;
  std::string command;
  app.add_option("command", command, "simulate | optimize | evaluate");
  auto opt_str = [&](const char* flag, std::optional<std::string>& dst, const char* help) {
    app.add_option_function<std::string>(flag, [&dst](const std::string& v) { dst = v; }, help);
  };
  opt_str("--config", o.config, "JSON run configuration");
  opt_str("--paradigm", o.paradigm, "cnn | obc | tln | path to a model description file");
  opt_str("--out", o.out, "output directory (fallback: $DIFFANALOG_OUT, then ./out)");
  opt_str("--checkpoint", o.checkpoint, "checkpoint to resume (optimize) or evaluate");
  opt_str("--method", o.method, "gradient method: backprop | adjoint");
  app.add_option_function<std::uint64_t>("--seed", [&](std::uint64_t v) { o.seed = v; }, "root seed");
  app.add_option_function<std::size_t>("--steps", [&](std::size_t v) { o.steps = v; }, "optimizer steps");
  app.add_option_function<double>("--lr", [&](double v) { o.lr = v; }, "Adam learning rate");
  app.add_option_function<std::size_t>("--batch", [&](std::size_t v) { o.batch = v; }, "batch size");
  app.add_option_function<std::size_t>("--mc-samples", [&](std::size_t v) { o.mc_samples = v; },
                                       "mismatch samples per batch item");
  app.add_option_function<std::size_t>("--workers", [&](std::size_t v) { o.workers = v; },
                                       "worker threads (0: all cores)");
  app.add_option_function<double>("--alpha", [&](double v) { o.alpha = v; }, "OBC phase-noise amplitude");

  std::filesystem::path err_dir = std::getenv("DIFFANALOG_OUT") ? std::getenv("DIFFANALOG_OUT") : "out";
  auto report_error = [&](const char* kind, const std::string& msg, int status) {
    const json rec{{"error", {{"kind", kind}, {"message", msg}}}};
    std::cerr << rec.dump() << "\n";
    try {
      io::write_file(err_dir / "error.json", rec.dump(2) + "\n");
    } catch (const std::exception&) {
    }
    return status;
  };
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    if (o.out) err_dir = *o.out;
    return report_error("usage", e.what(), 2);
  }
  if (!command.empty()) o.command = command;
  if (o.out) err_dir = *o.out;
  json cfg;
  try {
    cfg = resolve_config(o);
  } catch (const std::exception& e) {
    return report_error(error_kind(e), e.what(), 2);
  }
  Run run(cfg);
  err_dir = run.out_dir();
  try {
    run.execute();
  } catch (const std::exception& e) {
    return report_error(error_kind(e), e.what(), 1);
  }
  return 0;
}

}  // namespace diffanalog::cli
