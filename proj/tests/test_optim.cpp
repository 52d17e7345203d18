#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "diffanalog/optim.hpp"

using namespace diffanalog;
using namespace diffanalog::expr;

namespace {

TrainableStore analog_store(std::vector<double> raw) {
  TrainableStore s;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    s.offsets.push_back(i);
    s.kinds.push_back(RawKind::Analog);
  }
  s.raw = std::move(raw);
  return s;
}

/// Quadratic bowl centered at `target`, with noise-free loss and gradient.
struct Bowl {
  std::vector<double> target;
  GradEstimate operator()(const TrainableStore& s, std::size_t, double) const {
    GradEstimate g;
    for (std::size_t i = 0; i < s.size(); ++i) {
      const double d = s.raw[i] - target[i];
      g.loss_mean += d * d;
      g.grad.push_back(2.0 * d);
    }
    return g;
  }
};

}  // namespace

TEST(Optim, ZeroGradientIsFixedPoint) {
  auto s = analog_store({0.3, -0.2});
  auto st = AdamState::fresh(2, 0.1);
  adam_step(s, std::vector<double>{0.0, 0.0}, st);
  EXPECT_EQ(s.raw, (std::vector<double>{0.3, -0.2}));
  EXPECT_EQ(st.step, 1u);
}

TEST(Optim, FirstStepMovesByLearningRate) {
  auto s = analog_store({0.0, 0.0, 0.0});
  auto st = AdamState::fresh(3, 0.05);
  adam_step(s, std::vector<double>{3.0, -0.001, 40.0}, st);
  EXPECT_NEAR(s.raw[0], -0.05, 1e-6 * 0.05);
  EXPECT_NEAR(s.raw[1], 0.05, 1e-4 * 0.05);
  EXPECT_NEAR(s.raw[2], -0.05, 1e-6 * 0.05);
}

TEST(Optim, AnalogRawClippedLogitsNot) {
  TrainableStore s;
  s.raw = {0.99, 0.99};
  s.kinds = {RawKind::Analog, RawKind::Logit};
  s.offsets = {0, 1};
  auto st = AdamState::fresh(2, 0.05);
  adam_step(s, std::vector<double>{-1.0, -1.0}, st);
  EXPECT_EQ(s.raw[0], 1.0);
  EXPECT_NEAR(s.raw[1], 1.04, 1e-6);
}

TEST(Optim, FrozenSlotsNeverMove) {
  auto s = analog_store({0.1, 0.1});
  s.kinds[1] = RawKind::Frozen;
  auto st = AdamState::fresh(2, 0.1);
  for (int k = 0; k < 5; ++k) adam_step(s, std::vector<double>{1.0, 1.0}, st);
  EXPECT_LT(s.raw[0], 0.0);
  EXPECT_EQ(s.raw[1], 0.1);
}

TEST(Optim, NonFiniteGradientRejected) {
  auto s = analog_store({0.0});
  auto st = AdamState::fresh(1, 0.1);
  EXPECT_THROW(adam_step(s, std::vector<double>{NAN}, st), Error);
}

TEST(Optim, ConvergesOnQuadratic) {
  TrainConfig tc;
  tc.n_steps = 300;
  tc.lr = 0.05;
  const auto st = train(analog_store({0.9, -0.8}), tc, Bowl{{0.2, 0.4}});
  EXPECT_NEAR(st.store.raw[0], 0.2, 0.02);
  EXPECT_NEAR(st.store.raw[1], 0.4, 0.02);
  EXPECT_EQ(st.history.size(), 300u);
}

TEST(Optim, BestIsStoreThatProducedLowestLoss) {
  // Losses by step: 5, 1, 3. The store evaluated at step 1 is the one after one update.
  struct Scripted {
    GradEstimate operator()(const TrainableStore&, std::size_t step, double) const {
      const double losses[] = {5.0, 1.0, 3.0};
      return {{1.0}, losses[step], 0.0, 1};
    }
  };
  TrainConfig tc;
  tc.n_steps = 3;
  tc.lr = 0.1;
  const auto st = train(analog_store({0.0}), tc, Scripted{});
  EXPECT_EQ(st.best_step, 1u);
  EXPECT_EQ(st.best_loss, 1.0);
  EXPECT_NEAR(st.best.raw[0], -0.1, 1e-6);
}

TEST(Optim, ResumeFromCheckpointIsBitwiseIdentical) {
  TrainConfig tc;
  tc.n_steps = 12;
  tc.lr = 0.07;
  const Bowl bowl{{0.3, -0.6, 0.1}};
  const auto init = analog_store({-0.5, 0.5, 0.0});
  const TrainState straight = train(init, tc, bowl);

  TrainState half = start_training(init, tc);
  train_steps(half, tc, bowl, 5);
  const auto path = std::filesystem::temp_directory_path() / "diffanalog_ckpt_test.json";
  save_checkpoint(path, half);
  TrainState resumed = load_checkpoint(path);
  std::filesystem::remove(path);
  train_steps(resumed, tc, bowl, tc.n_steps);

  EXPECT_EQ(resumed.store.raw, straight.store.raw);
  EXPECT_EQ(resumed.best.raw, straight.best.raw);
  EXPECT_EQ(resumed.history.size(), straight.history.size());
  EXPECT_EQ(checkpoint_json(resumed).dump(), checkpoint_json(straight).dump());
}

TEST(Optim, MalformedCheckpointIsConfigError) {
  EXPECT_THROW(checkpoint_from_json(nlohmann::json{{"store", 1}}), ConfigError);
}

TEST(Optim, HistoryCsvLayout) {
  const std::vector<HistoryRow> rows{{0, 0.5, 0.1, 2.0, 10.0}};
  const std::string csv = history_csv(rows, "{}");
  EXPECT_EQ(csv.rfind("# provenance: {}\nstep,loss_mean,loss_std,grad_norm,tau\n0,", 0), 0u);
}

TEST(Optim, BatchIndicesDeterministicAndDistinct) {
  ModelBuilder b;
  b.add_state("x");
  b.set_derivative(0, neg(state(0)));
  b.set_readout({1.0}, {state(0)});
  const auto m = compile(b);
  std::vector<BatchItem> data(20, BatchItem{{}, Matrix(1, 1), {1.0}});
  McObjective obj{&m, &data, LossSpec::mse(Matrix(1, 1)), 8, {}};
  obj.mc.seed = 4;
  const auto a = obj.batch_indices(3), again = obj.batch_indices(3), other = obj.batch_indices(4);
  EXPECT_EQ(a, again);
  EXPECT_NE(a, other);
  std::set<std::size_t> uniq(a.begin(), a.end());
  EXPECT_EQ(uniq.size(), 8u);
  obj.batch_size = 50;
  EXPECT_EQ(obj.batch_indices(0).size(), 20u);
}
