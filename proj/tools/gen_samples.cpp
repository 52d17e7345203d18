// Regenerates the sample inputs under data/: a damped-oscillator model file,
// a matching target dataset and the OBC digit patterns.
//
//   gen_samples [output_dir]   (default: data)

#include <filesystem>
#include <iostream>

#include "diffanalog/diffanalog.hpp"

using namespace diffanalog;
using namespace diffanalog::expr;

namespace {

/// x'' = -k x - c x' with trainable damping c and a mismatched stiffness k = 1.
CompiledModel damped_oscillator() {
  ModelBuilder b;
  b.add_state("x");
  b.add_state("v");
  b.add_trainable(analog_trainable("damping", 0.3, 0.05, 2.0));
  b.set_derivative(0, state(1));
  b.set_derivative(1, b.mismatch(neg(state(0)), 0.05) - param(0) * state(1));
  b.set_readout({1.0, 2.0, 3.0}, {state(0)});
  b.set_initial_state({1.0, 0.0});
  return compile(b, 0.01);
}

}  // namespace

int main(int argc, char** argv) {
  const std::filesystem::path dir = argc > 1 ? argv[1] : "data";
  try {
    std::filesystem::create_directories(dir);
    const CompiledModel m = damped_oscillator();
    io::write_file(dir / "damped_oscillator.json", model_io::save_text(m));

    // Targets are the nominal response at damping 0.8.
    const std::vector<double> params{0.8}, delta{1.0};
    const Trajectory tr = solve(m, params, delta, {}, m.initial_state, {0.01, 3.0, Method::Rk4, 0});
    nlohmann::json targets = nlohmann::json::array();
    for (std::size_t r = 0; r < tr.readouts.rows; ++r) targets.push_back(nlohmann::json::array({tr.readouts(r, 0)}));
    const nlohmann::json dataset{{"items", nlohmann::json::array({{{"targets", targets}}})}};
    io::write_file(dir / "damped_oscillator_dataset.json", dataset.dump(2) + "\n");

    io::write_file(dir / "digits.txt", "# 10x6 digit patterns, one blank line between patterns\n" +
                                           obc::format_patterns(obc::default_digits()));
  } catch (const std::exception& e) {
    std::cerr << "gen_samples: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
