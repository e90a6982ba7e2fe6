#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "sfp/dataset.hpp"
#include "support.hpp"

using namespace sfp;

namespace {

double mean(std::span<const double> v) { return mean_of(v); }

SimConfig quiet(std::size_t n = 16) {
  SimConfig c;
  c.height = c.width = n;
  c.event_rate = 0;
  c.damping = 0;
  c.burn_in = 0;
  return c;
}

}  // namespace

TEST(Velocity, ConstantStreamfunctionIsStill) {
  std::vector<double> psi(64, 3.0);
  auto v = velocity_from_streamfunction(psi, 8, 8);
  for (double x : v.storage()) EXPECT_NEAR(x, 0.0, 1e-14);
}

TEST(Velocity, SineStreamfunctionAnalytic) {
  const std::size_t h = 16, w = 16;
  std::vector<double> psi(h * w);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) psi[r * w + c] = std::sin(2 * std::numbers::pi * c / w);
  auto vel = velocity_from_streamfunction(psi, h, w);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      EXPECT_NEAR(vel.at({0, r, c}), 0.0, 1e-12);
      EXPECT_NEAR(vel.at({1, r, c}), -(2 * std::numbers::pi / w) * std::cos(2 * std::numbers::pi * c / w), 1e-12);
    }
}

TEST(Velocity, DivergenceFreeForAnySeed) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto vel = make_velocity(seed, 32, 32, 0.7);
    double peak = 0;
    for (double d : divergence(vel)) peak = std::max(peak, std::abs(d));
    EXPECT_LE(peak, 1e-10) << "seed " << seed;
  }
}

TEST(Simulate, PureDiffusionConservesMeanAndDissipates) {
  auto c = quiet();
  c.velocity.assign(2 * 16 * 16, 0.0);
  c.initial.assign(16 * 16, 0.0);
  detail::add_hotspot(c.initial, 16, 16, 5.0, 9.0, 2.0, 1.5);
  c.steps = 50;
  auto seq = simulate(c);
  const double m0 = mean(seq.frame(0));
  double prev_var = variance_of(seq.frame(0));
  for (std::size_t t = 1; t < seq.length(); ++t) {
    EXPECT_NEAR(mean(seq.frame(t)), m0, 1e-10);
    const double v = variance_of(seq.frame(t));
    EXPECT_LT(v, prev_var);
    prev_var = v;
  }
}

TEST(Simulate, AdvectionConservesMean) {
  auto c = quiet(32);
  c.diffusivity = 0;
  c.velocity_amplitude = 0.3;
  c.steps = 200;
  c.seed = 3;
  c.initial.assign(32 * 32, 0.1);
  detail::add_hotspot(c.initial, 32, 32, 10.0, 20.0, 1.5, 2.5);
  auto seq = simulate(c);
  const double m0 = mean(seq.frame(0));
  for (std::size_t t = 0; t < seq.length(); ++t) ASSERT_NEAR(mean(seq.frame(t)), m0, 1e-8) << "frame " << t;
}

TEST(Simulate, DampedAdvectionDiffusionDissipates) {
  auto c = quiet(32);
  c.steps = 60;
  c.seed = 5;
  std::mt19937_64 g(5);
  c.initial = sfp::testing::random_tensor(Shape{32 * 32}, g).storage();
  auto seq = simulate(c);
  for (std::size_t t = 1; t < seq.length(); ++t)
    EXPECT_LE(variance_of(seq.frame(t)), variance_of(seq.frame(t - 1)) + 1e-12);
}

TEST(Simulate, SeededRunsAreBitIdentical) {
  SimConfig c;
  c.height = c.width = 16;
  c.steps = 40;
  c.burn_in = 10;
  c.seed = 7;
  EXPECT_EQ(simulate(c).frames, simulate(c).frames);
  auto d = c;
  d.seed = 8;
  EXPECT_FALSE(simulate(c).frames == simulate(d).frames);
}

TEST(Simulate, EventsInjectHotspots) {
  SimConfig c;
  c.height = c.width = 16;
  c.steps = 100;
  c.event_rate = 0.5;
  c.seed = 1;
  auto seq = simulate(c);
  double peak = 0;
  for (double v : seq.frames.storage()) peak = std::max(peak, v);
  EXPECT_GT(peak, 0.5);
}

TEST(Simulate, InvalidConfigsAreRejected) {
  SimConfig c;
  c.height = 24;
  EXPECT_THROW(simulate(c), Error);
  c = SimConfig{};
  c.radius = 9;
  EXPECT_THROW(simulate(c), Error);
  c = SimConfig{};
  c.event_rate = -1;
  EXPECT_THROW(simulate(c), Error);
}

TEST(Simulate, UnstableVelocityIsReported) {
  SimConfig c;
  c.height = c.width = 16;
  c.velocity_amplitude = 50;
  c.diffusivity = 0;
  c.damping = 0;
  c.steps = 200;
  c.seed = 2;
  EXPECT_THROW(simulate(c), SimulationError);
}

TEST(Windows, HandCountedSplit) {
  auto counts = split_counts(12, 2, {0.5, 0.25, 0.25});
  EXPECT_EQ(counts, (std::array<std::size_t, 3>{5, 2, 2}));
  EXPECT_THROW(split_counts(2, 2, {}), Error);
}

TEST(Windows, PairsAreConsecutiveFrames) {
  FieldSequence seq{Tensor<double>(Shape{12, 8, 8})};
  for (std::size_t t = 0; t < 12; ++t)
    for (std::size_t i = 0; i < 64; ++i) seq.frames[t * 64 + i] = static_cast<double>(t);
  auto d = window<double>(seq, 2, {0.5, 0.25, 0.25});
  ASSERT_EQ(d.train.size(), 5u);
  ASSERT_EQ(d.val.size(), 2u);
  ASSERT_EQ(d.test.size(), 2u);
  for (const auto* s : {&d.train, &d.val, &d.test})
    for (std::size_t k = 0; k < s->size(); ++k) {
      const double t0 = static_cast<double>(s->starts[k]);
      EXPECT_EQ(s->inputs[k].at({0, 0, 0}), t0);
      EXPECT_EQ(s->inputs[k].at({1, 3, 3}), t0 + 1);
      EXPECT_EQ(s->targets[k].at({2, 2}), t0 + 2);
    }
  // no leakage: chronological blocks
  EXPECT_LT(d.train.starts.back(), d.val.starts.front());
  EXPECT_LT(d.val.starts.back(), d.test.starts.front());
}

TEST(Windows, ScarcityKeepsEarliestPrefix) {
  FieldSequence seq{Tensor<double>(Shape{104, 8, 8})};
  auto full = window<float>(seq, 4, {1.0, 0.0, 0.0});
  ASSERT_EQ(full.train.size(), 100u);
  auto tenth = apply_scarcity(full.train, 0.1);
  ASSERT_EQ(tenth.size(), 10u);
  for (std::size_t k = 0; k < 10; ++k) EXPECT_EQ(tenth.starts[k], k);
  auto same = apply_scarcity(full.train, 1.0);
  EXPECT_EQ(same.starts, full.train.starts);
  EXPECT_THROW(apply_scarcity(full.train, 0.0), Error);
  EXPECT_THROW(apply_scarcity(full.train, 1.5), Error);
}

TEST(Events, ThresholdIsInclusive) {
  std::vector<double> zero(16, 0.0), at(16, 0.5);
  EXPECT_EQ(event_mask<double>(zero, 0.5).count, 0u);
  EXPECT_EQ(event_mask<double>(at, 0.5).count, 16u);
}

TEST(Events, PercentileOracle) {
  std::mt19937_64 g(11);
  for (int trial = 0; trial < 20; ++trial) {
    auto f = sfp::testing::random_tensor(Shape{32 * 32}, g);
    const double tau = percentile<double>(f.values(), 0.95);
    auto sorted = f.storage();
    std::sort(sorted.begin(), sorted.end());
    EXPECT_EQ(tau, sorted[static_cast<std::size_t>(std::ceil(0.95 * 1024)) - 1]);
    const auto count = static_cast<double>(event_mask<double>(f.values(), tau).count);
    EXPECT_NEAR(count, std::ceil(0.05 * 1024), 1.0);
  }
}

TEST(Dataset, WriteThenLoadMatchesInMemoryBuild) {
  ExperimentConfig cfg;
  cfg.sim.height = cfg.sim.width = 16;
  cfg.sim.steps = 60;
  cfg.sim.burn_in = 5;
  cfg.sim.seed = 4;
  const auto dir = (std::filesystem::temp_directory_path() / "sfp-test-dataset").string();
  const auto manifest = write_dataset(cfg, dir);
  auto disk = load_dataset<double>(manifest);
  auto mem = build_dataset<double>(cfg, 1.0);
  EXPECT_EQ(disk.tau, mem.tau);
  EXPECT_EQ(disk.field_max, mem.field_max);
  ASSERT_EQ(disk.splits.train.size(), mem.splits.train.size());
  ASSERT_EQ(disk.splits.test.size(), mem.splits.test.size());
  for (std::size_t i = 0; i < disk.splits.test.size(); ++i) EXPECT_EQ(disk.splits.test.targets[i], mem.splits.test.targets[i]);
  auto half = load_dataset<double>(manifest, 0.5);
  EXPECT_EQ(half.tau, disk.tau);  // threshold unaffected by scarcity
  EXPECT_EQ(half.splits.train.size(), (disk.splits.train.size() + 1) / 2);
}
