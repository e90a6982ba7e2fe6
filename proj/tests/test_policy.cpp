#include <gtest/gtest.h>

#include "sfp/policy.hpp"
#include "support.hpp"

using namespace sfp;
using sfp::testing::check_param_grads;
using sfp::testing::probe;
using sfp::testing::random_tensor;
using sfp::testing::tiny_policy_config;
using sfp::testing::tiny_wm_config;

namespace {

struct Fixture {
  WorldModel<double> wm = [] {
    auto m = WorldModel<double>::create(tiny_wm_config(), 3);
    m.freeze();
    return m;
  }();
  Policy<double> pol = Policy<double>::create(tiny_policy_config(tiny_wm_config()), 4);
  std::mt19937_64 g{31};
  Tensor<double> s = random_tensor(Shape{2, 2, 8, 8}, g);
  Tensor<double> cond = wm.condition(s);
};

}  // namespace

TEST(Act, ShapeAndDeterminism) {
  Fixture f;
  auto a = f.pol.act(f.s);
  EXPECT_EQ(a.shape(), (Shape{2, 2, 2, 4}));
  EXPECT_EQ(a, f.pol.act(f.s));
  EXPECT_EQ(f.pol.act(slice_leading(f.s, 0, 1).reshaped(Shape{2, 8, 8})).shape(), (Shape{2, 2, 4}));
  EXPECT_THROW(f.pol.act(Tensor<double>(Shape{1, 3, 8, 8})), ShapeError);
}

TEST(Act, GradCheck) {
  Fixture f;
  std::string worst;
  const double err = check_param_grads(
      f.pol.params(), [&](Tape<double>& t) { return probe(f.pol.act(t, constant(f.s))); }, 1e-5, &worst);
  EXPECT_LE(err, 1e-5) << worst;
}

TEST(Project, GradCheckThroughFrozenDecoder) {
  Fixture f;
  std::string worst;
  const double err = check_param_grads(
      f.pol.params(), [&](Tape<double>& t) { return probe(f.pol.project(t, f.wm, f.pol.act(t, constant(f.s)), f.cond)); },
      1e-5, &worst);
  EXPECT_LE(err, 1e-5) << worst;
}

TEST(Project, ConvProjectorGradCheck) {
  Fixture f;
  auto cfg = tiny_policy_config(tiny_wm_config());
  cfg.conv_projector = true;
  auto pol = Policy<double>::create(cfg, 8);
  EXPECT_TRUE(pol.params().contains("pol.proj1.w"));
  std::string worst;
  const double err = check_param_grads(
      pol.params(), [&](Tape<double>& t) { return probe(pol.project(t, f.wm, pol.act(t, constant(f.s)), f.cond)); },
      1e-5, &worst);
  EXPECT_LE(err, 1e-5) << worst;
}

TEST(Project, OneHotLogitsEqualHardDecode) {
  Fixture f;
  for (int j = 0; j < 4; ++j) {
    Tensor<double> logits(Shape{1, 2, 2, 4}, 0.0);
    for (std::size_t c = 0; c < 4; ++c) logits[c * 4 + static_cast<std::size_t>(j)] = 40.0;
    Tape<double> t(f.pol.params());
    auto soft = f.pol.project(t, f.wm, constant(logits), slice_leading(f.cond, 0, 1)).value();
    std::vector<CodeIndexGrid> grid{{2, 2, {j, j, j, j}}};
    auto hard = f.wm.decode_grids(grid, slice_leading(f.cond, 0, 1));
    for (std::size_t i = 0; i < hard.size(); ++i) EXPECT_NEAR(soft[i], hard[i], 1e-12);
  }
}

TEST(Project, UniformLogitsAverageTwoCodes) {
  auto wc = tiny_wm_config();
  wc.codebook_size = 2;
  auto wm = WorldModel<double>::create(wc, 1);
  wm.freeze();
  auto pol = Policy<double>::create(tiny_policy_config(wc), 2);
  std::mt19937_64 g(3);
  auto cond = wm.condition(random_tensor(Shape{1, 2, 8, 8}, g));
  Tape<double> t(pol.params());
  auto soft = pol.project(t, wm, constant(Tensor<double>(Shape{1, 2, 2, 2})), cond).value();
  const auto& cb = wm.codebook();
  Tensor<double> mid(Shape{1, 2, 2, 3});
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t d = 0; d < 3; ++d) mid[c * 3 + d] = 0.5 * (cb.at({0, d}) + cb.at({1, d}));
  auto ref = wm.decode_latents(mid, cond);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(soft[i], ref[i], 1e-12);
}

TEST(Project, WorldModelReceivesNoGradient) {
  Fixture f;
  const auto before = f.wm.params().fingerprint();
  Tape<double> t(f.pol.params());
  Tape<double> wm_tape(f.wm.params());
  auto out = f.pol.project(t, wm_tape, f.wm, f.pol.act(t, constant(f.s)), f.cond);
  auto g_wm = wm_tape.grad(probe(out));
  for (const auto& [name, grad] : g_wm)
    for (double v : grad.storage()) ASSERT_EQ(v, 0.0) << name;
  auto g_pol = t.grad(probe(out));
  double norm = 0;
  for (const auto& [_, grad] : g_pol)
    for (double v : grad.storage()) norm += v * v;
  EXPECT_GT(norm, 0.0);
  EXPECT_EQ(f.wm.params().fingerprint(), before);
}

TEST(Project, RequiresFrozenWorldModel) {
  Fixture f;
  auto live = WorldModel<double>::create(tiny_wm_config(), 3);
  Tape<double> t(f.pol.params());
  EXPECT_THROW(f.pol.project(t, live, f.pol.act(t, constant(f.s)), f.cond), FrozenError);
}

TEST(Project, FiniteOverLargeLogits) {
  Fixture f;
  auto cfg = tiny_policy_config(tiny_wm_config());
  cfg.temperature = 0.1;
  auto pol = Policy<double>::create(cfg, 4);
  for (int trial = 0; trial < 20; ++trial) {
    auto logits = random_tensor(Shape{2, 2, 2, 4}, f.g, -50, 50);
    Tape<double> t(pol.params());
    EXPECT_TRUE(pol.project(t, f.wm, constant(logits), f.cond).value().all_finite());
  }
}

TEST(Project, ScalingLogitsKeepsGreedyGrid) {
  Fixture f;
  auto a = f.pol.act(slice_leading(f.s, 0, 1).reshaped(Shape{2, 8, 8}));
  auto scaled = a;
  for (auto& v : scaled.storage()) v *= 3.7;
  EXPECT_EQ(greedy_grid(a), greedy_grid(scaled));
}

TEST(Losses, HandValues) {
  auto p = constant(Tensor<double>(Shape{1, 1, 2, 2}, {0, 1, 2, 3}));
  EXPECT_EQ(policy_loss(p, Tensor<double>(Shape{2, 2}, {1, 1, 1, 1})).value()[0], 1.5);
  EXPECT_EQ(policy_loss(p, p.value()).value()[0], 0.0);
  EXPECT_EQ(supervised_loss(p, Tensor<double>(Shape{2, 2}, {1, 2, 3, 4})).value()[0], 1.0);
}
