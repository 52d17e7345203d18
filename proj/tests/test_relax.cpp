#include <gtest/gtest.h>

#include <cmath>

#include "diffanalog/gradient.hpp"
#include "diffanalog/relax.hpp"
#include "diffanalog/trainables.hpp"

using namespace diffanalog;

TEST(Relax, MismatchStatistics) {
  Rng rng(2024);
  const std::vector<double> sig(100000, 0.1);
  const auto d = sample_mismatch(sig, rng);
  double mean = 0.0;
  for (double v : d) mean += v;
  mean /= static_cast<double>(d.size());
  EXPECT_NEAR(mean, 1.0, 1e-3);
  EXPECT_NEAR(sample_std(d, mean), 0.1, 0.002);
}

TEST(Relax, MismatchZeroSigmaAndDeterminism) {
  Rng a(7), b(7);
  const std::vector<double> sig{0.0, 0.2, 0.0};
  const auto da = sample_mismatch(sig, a), db = sample_mismatch(sig, b);
  EXPECT_EQ(da, db);
  EXPECT_EQ(da[0], 1.0);
  EXPECT_EQ(da[2], 1.0);
  Rng c(1);
  EXPECT_THROW(sample_mismatch(std::vector<double>{-0.1}, c), ModelError);
}

TEST(Relax, GumbelTemperatureLimits) {
  const std::vector<double> logits{0.3, 1.2, -0.5, 0.9}, levels{-1.0, -1.0 / 3, 1.0 / 3, 1.0};
  const std::vector<double> g(4, 0.0);
  const auto cold = gumbel_softmax_with_noise(logits, levels, 1e-4, g);
  EXPECT_NEAR(cold.weights[1], 1.0, 1e-12);
  EXPECT_NEAR(cold.value, levels[1], 1e-12);
  const auto hot = gumbel_softmax_with_noise(logits, levels, 1e7, g);
  for (double w : hot.weights) EXPECT_NEAR(w, 0.25, 1e-6);
  EXPECT_NEAR(hot.value, 0.0, 1e-6);
}

TEST(Relax, GumbelValueGradientMatchesFiniteDifferences) {
  const std::vector<double> levels{-1.0, 0.0, 1.0};
  const std::vector<double> g{0.3, -0.2, 0.5};
  std::vector<double> logits{0.1, 0.7, -0.4};
  const double tau = 0.8;
  const auto s = gumbel_softmax_with_noise(logits, levels, tau, g);
  std::vector<double> grad(3, 0.0);
  gumbel_value_vjp(s, levels, tau, 1.0, grad);
  for (std::size_t j = 0; j < 3; ++j) {
    const double h = 1e-6;
    auto up = logits, dn = logits;
    up[j] += h;
    dn[j] -= h;
    const double fd = (gumbel_softmax_with_noise(up, levels, tau, g).value -
                       gumbel_softmax_with_noise(dn, levels, tau, g).value) /
                      (2.0 * h);
    EXPECT_NEAR(grad[j], fd, 1e-5 * std::max(1.0, std::abs(fd)));
  }
}

TEST(Relax, GumbelSamplesMatchDistribution) {
  // Argmax of logits + Gumbel noise is a draw from softmax(logits).
  const std::vector<double> logits{0.0, std::log(3.0)};
  Rng rng(11);
  int ones = 0;
  const int n = 40000;
  for (int i = 0; i < n; ++i) {
    const auto g = sample_gumbel(2, rng);
    ones += logits[1] + g[1] > logits[0] + g[0] ? 1 : 0;
  }
  EXPECT_NEAR(static_cast<double>(ones) / n, 0.75, 0.01);
}

TEST(Relax, HardenArgmaxAndTies) {
  EXPECT_EQ(harden(std::vector<double>{0.0, 0.0}, std::vector<double>{-1.0, 1.0}), -1.0);
  EXPECT_EQ(harden(std::vector<double>{1.0, 3.0, 2.0}, std::vector<double>{10.0, 20.0, 30.0}), 20.0);
  EXPECT_THROW(harden(std::vector<double>{}, std::vector<double>{}), ModelError);
}

TEST(Relax, BoundTransform) {
  EXPECT_DOUBLE_EQ(bound_transform(-1.0, 2.0, 6.0), 2.0);
  EXPECT_DOUBLE_EQ(bound_transform(1.0, 2.0, 6.0), 6.0);
  EXPECT_DOUBLE_EQ(bound_transform(0.0, 2.0, 6.0), 4.0);
  EXPECT_NEAR(bound_transform(0.0, 1e-10, 1e-8), 5.05e-9, 1e-22);
  for (double r = -1.0; r <= 1.0; r += 0.125) {
    EXPECT_NEAR(bound_inverse(bound_transform(r, -3.0, 7.0), -3.0, 7.0), r, 1e-12);
  }
}

TEST(Relax, DacLevelsAndNearest) {
  EXPECT_EQ(dac_levels(1), (std::vector<double>{-1.0, 1.0}));
  const auto l2 = dac_levels(2);
  ASSERT_EQ(l2.size(), 4u);
  EXPECT_NEAR(l2[1], -1.0 / 3.0, 1e-15);
  EXPECT_EQ(nearest_level(0.0, dac_levels(1)), 0u);
  EXPECT_EQ(nearest_level(0.4, l2), 2u);
  EXPECT_THROW(dac_levels(0), ConfigError);
}

TEST(Relax, TauScheduleEndpoints) {
  TauSchedule s{10.0, 1.0, 64, TauSchedule::Mode::Exponential};
  EXPECT_DOUBLE_EQ(s.tau(0), 10.0);
  EXPECT_DOUBLE_EQ(s.tau(63), 1.0);
  for (std::size_t k = 1; k < 64; ++k) EXPECT_LT(s.tau(k), s.tau(k - 1));
  EXPECT_NEAR(s.tau(21) / s.tau(20), s.tau(41) / s.tau(40), 1e-12);
  s.mode = TauSchedule::Mode::Linear;
  EXPECT_NEAR(s.tau(21) - s.tau(20), s.tau(41) - s.tau(40), 1e-12);
  TauSchedule bad{1.0, 2.0, 4, TauSchedule::Mode::Linear};
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Relax, PullbackMatchesFiniteDifferencesInRawSpace) {
  using namespace expr;
  ModelBuilder b;
  b.add_state("x");
  b.add_trainable(analog_trainable("a", 0.5, -1.0, 3.0));
  b.add_trainable(discrete_trainable("k", dac_levels(2), {0.2, -0.1, 0.4, 0.0}));
  b.set_derivative(0, param(0) * param(1));
  b.set_readout({1.0}, {state(0)});
  const auto m = compile(b);
  const auto store = TrainableStore::init(m);
  // Loss = 2 a + 3 k, so d/dvalues = (2, 3).
  auto loss = [&](const TrainableStore& s) {
    Rng rng(5);
    const auto pm = map_params(m, s, ParamMode::Relaxed, 0.7, &rng);
    return 2.0 * pm.values[0] + 3.0 * pm.values[1];
  };
  Rng rng(5);
  const auto pm = map_params(m, store, ParamMode::Relaxed, 0.7, &rng);
  std::vector<double> d_raw(store.size(), 0.0);
  pullback_params(m, store, pm, std::vector<double>{2.0, 3.0}, d_raw);
  for (std::size_t j = 0; j < store.size(); ++j) {
    auto up = store, dn = store;
    up.raw[j] += 1e-6;
    dn.raw[j] -= 1e-6;
    EXPECT_NEAR(d_raw[j], (loss(up) - loss(dn)) / 2e-6, 1e-6) << j;
  }
}
