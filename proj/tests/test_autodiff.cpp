#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "sfp/autodiff.hpp"
#include "sfp/optim.hpp"
#include "support.hpp"

using namespace sfp;
using sfp::testing::check_input_grad;
using sfp::testing::probe;
using sfp::testing::random_tensor;

namespace {

constexpr double kTol = 1e-5;

std::mt19937_64 gen(std::uint64_t s) { return std::mt19937_64(s); }

// Inputs bounded away from the leaky-relu kink.
Tensor<double> away_from_zero(Tensor<double> t) {
  for (auto& v : t.storage())
    if (std::abs(v) < 0.05) v = v < 0 ? -0.05 : 0.05;
  return t;
}

}  // namespace

TEST(Forward, ConvIdentityKernelCopiesInput) {
  auto g = gen(1);
  auto x = random_tensor(Shape{1, 1, 4, 4}, g);
  Tensor<double> w(Shape{1, 1, 3, 3});
  w.at({0, 0, 1, 1}) = 1.0;
  auto y = conv3x3(constant(x), constant(w), constant(Tensor<double>(Shape{1})));
  EXPECT_EQ(y.value(), x);
}

TEST(Forward, ConvWrapsPeriodically) {
  // kernel picking the left neighbour: y[r, c] = x[r, c - 1 mod W]
  Tensor<double> x(Shape{1, 1, 2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor<double> w(Shape{1, 1, 3, 3});
  w.at({0, 0, 1, 0}) = 1.0;
  auto y = conv3x3(constant(x), constant(w), constant(Tensor<double>(Shape{1})));
  EXPECT_EQ(y.value(), (Tensor<double>(Shape{1, 1, 2, 3}, {3, 1, 2, 6, 4, 5})));
}

TEST(Forward, StridedConvSamplesEvenPositions) {
  auto g = gen(2);
  auto x = random_tensor(Shape{1, 1, 4, 4}, g);
  Tensor<double> w(Shape{1, 1, 3, 3});
  w.at({0, 0, 1, 1}) = 1.0;
  auto y = conv_down2(constant(x), constant(w), constant(Tensor<double>(Shape{1}, {0.5})));
  ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 2; ++c) EXPECT_DOUBLE_EQ(y.value().at({0, 0, r, c}), x.at({0, 0, 2 * r, 2 * c}) + 0.5);
}

TEST(Forward, UpsampleRepeatsEachPixel) {
  Tensor<double> x(Shape{1, 1, 1, 2}, {1, 2});
  auto y = upsample2(constant(x));
  EXPECT_EQ(y.value(), (Tensor<double>(Shape{1, 1, 2, 4}, {1, 1, 2, 2, 1, 1, 2, 2})));
}

TEST(Forward, SoftmaxRowsSumToOne) {
  auto g = gen(3);
  auto y = softmax_last(constant(random_tensor(Shape{5, 7}, g, -30, 30)));
  for (std::size_t r = 0; r < 5; ++r) {
    double s = 0;
    for (std::size_t k = 0; k < 7; ++k) s += y.value()[r * 7 + k];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Forward, MseReduceHandValue) {
  auto l = mse_reduce(constant(Tensor<double>(Shape{2}, {1, 2})), constant(Tensor<double>(Shape{2}, {0, 0})));
  EXPECT_DOUBLE_EQ(l.value()[0], 2.5);
}

TEST(Forward, ChannelsLastRoundTrip) {
  auto g = gen(4);
  auto x = random_tensor(Shape{2, 3, 4, 5}, g);
  auto cl = to_channels_last(constant(x));
  ASSERT_EQ(cl.shape(), (Shape{2, 4, 5, 3}));
  EXPECT_DOUBLE_EQ(cl.value().at({1, 2, 3, 1}), x.at({1, 1, 2, 3}));
  EXPECT_EQ(to_channels_first(cl).value(), x);
}

TEST(Forward, ShapeErrorsNameTheOp) {
  auto a = constant(Tensor<double>(Shape{2, 3}));
  auto b = constant(Tensor<double>(Shape{3, 2}));
  try {
    add(a, b);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("add"), std::string::npos);
  }
}

// --- gradient checks, one per op ---

TEST(GradCheck, Dense) {
  auto g = gen(10);
  auto w = random_tensor(Shape{3, 4}, g), b = random_tensor(Shape{3}, g), x = random_tensor(Shape{2, 4}, g);
  EXPECT_LT(check_input_grad([&](const Var<double>& v) { return probe(dense(v, constant(w), constant(b))); }, x), kTol);
  EXPECT_LT(check_input_grad([&](const Var<double>& v) { return probe(dense(constant(x), v, constant(b))); }, w), kTol);
  EXPECT_LT(check_input_grad([&](const Var<double>& v) { return probe(dense(constant(x), constant(w), v)); }, b), kTol);
}

TEST(GradCheck, Conv3x3) {
  auto g = gen(11);
  auto x = random_tensor(Shape{2, 2, 4, 6}, g), w = random_tensor(Shape{3, 2, 3, 3}, g), b = random_tensor(Shape{3}, g);
  EXPECT_LT(check_input_grad([&](const Var<double>& v) { return probe(conv3x3(v, constant(w), constant(b))); }, x), kTol);
  EXPECT_LT(check_input_grad([&](const Var<double>& v) { return probe(conv3x3(constant(x), v, constant(b))); }, w), kTol);
  EXPECT_LT(check_input_grad([&](const Var<double>& v) { return probe(conv3x3(constant(x), constant(w), v)); }, b), kTol);
}

TEST(GradCheck, ConvDown2) {
  auto g = gen(12);
  auto x = random_tensor(Shape{2, 2, 4, 4}, g), w = random_tensor(Shape{3, 2, 3, 3}, g), b = random_tensor(Shape{3}, g);
  EXPECT_LT(check_input_grad([&](const Var<double>& v) { return probe(conv_down2(v, constant(w), constant(b))); }, x), kTol);
  EXPECT_LT(check_input_grad([&](const Var<double>& v) { return probe(conv_down2(constant(x), v, constant(b))); }, w), kTol);
  EXPECT_LT(check_input_grad([&](const Var<double>& v) { return probe(conv_down2(constant(x), constant(w), v)); }, b), kTol);
}

TEST(GradCheck, Upsample2) {
  auto g = gen(13);
  EXPECT_LT(check_input_grad([](const Var<double>& v) { return probe(upsample2(v)); }, random_tensor(Shape{1, 2, 3, 2}, g)),
            kTol);
}

TEST(GradCheck, LeakyRelu) {
  auto g = gen(14);
  auto x = away_from_zero(random_tensor(Shape{3, 5}, g));
  EXPECT_LT(check_input_grad([](const Var<double>& v) { return probe(leaky_relu(v, 0.1)); }, x), kTol);
}

TEST(GradCheck, Softmax) {
  auto g = gen(15);
  EXPECT_LT(check_input_grad([](const Var<double>& v) { return probe(softmax_last(v)); }, random_tensor(Shape{3, 4}, g, -3, 3)),
            kTol);
}

TEST(GradCheck, ElementwiseBinary) {
  auto g = gen(16);
  auto a = random_tensor(Shape{2, 3}, g), b = random_tensor(Shape{2, 3}, g);
  EXPECT_LT(check_input_grad([&](const Var<double>& v) { return probe(add(v, constant(b))); }, a), kTol);
  EXPECT_LT(check_input_grad([&](const Var<double>& v) { return probe(sub(constant(a), v)); }, b), kTol);
  EXPECT_LT(check_input_grad([&](const Var<double>& v) { return probe(mul(v, constant(b))); }, a), kTol);
  EXPECT_LT(check_input_grad([&](const Var<double>& v) { return probe(mul(v, v)); }, a), kTol);
  EXPECT_LT(check_input_grad([](const Var<double>& v) { return probe(scale(v, -2.5)); }, a), kTol);
}

TEST(GradCheck, ConcatChannels) {
  auto g = gen(17);
  auto a = random_tensor(Shape{2, 1, 2, 2}, g), b = random_tensor(Shape{2, 3, 2, 2}, g);
  EXPECT_LT(check_input_grad([&](const Var<double>& v) { return probe(concat_channels(v, constant(b))); }, a), kTol);
  EXPECT_LT(check_input_grad([&](const Var<double>& v) { return probe(concat_channels(constant(a), v)); }, b), kTol);
}

TEST(GradCheck, Reductions) {
  auto g = gen(18);
  auto a = random_tensor(Shape{3, 4}, g), b = random_tensor(Shape{3, 4}, g);
  EXPECT_LT(check_input_grad([&](const Var<double>& v) { return mse_reduce(v, constant(b)); }, a), kTol);
  EXPECT_LT(check_input_grad([&](const Var<double>& v) { return mse_reduce(constant(a), v); }, b), kTol);
  EXPECT_LT(check_input_grad([](const Var<double>& v) { return sum(mul(v, v)); }, a), kTol);
  EXPECT_LT(check_input_grad([](const Var<double>& v) { return mean(mul(v, v)); }, a), kTol);
}

TEST(GradCheck, MatmulLast) {
  auto g = gen(19);
  auto x = random_tensor(Shape{2, 3, 4}, g), m = random_tensor(Shape{4, 5}, g);
  EXPECT_LT(check_input_grad([&](const Var<double>& v) { return probe(matmul_last(v, constant(m))); }, x), kTol);
  EXPECT_LT(check_input_grad([&](const Var<double>& v) { return probe(matmul_last(constant(x), v)); }, m), kTol);
}

TEST(GradCheck, GatherRowsScatterAdds) {
  auto g = gen(20);
  auto t = random_tensor(Shape{4, 3}, g);
  const std::vector<int> idx{2, 0, 2, 3};
  EXPECT_LT(check_input_grad([&](const Var<double>& v) { return probe(gather_rows(v, idx)); }, t), kTol);
  auto tv = variable(t);
  backward(sum(gather_rows(tv, idx)));
  EXPECT_DOUBLE_EQ(tv.grad().at({2, 1}), 2.0);  // selected twice
  EXPECT_DOUBLE_EQ(tv.grad().at({1, 1}), 0.0);  // never selected
}

TEST(GradCheck, LayoutOps) {
  auto g = gen(21);
  auto x = random_tensor(Shape{2, 3, 2, 4}, g);
  EXPECT_LT(check_input_grad([](const Var<double>& v) { return probe(to_channels_last(v)); }, x), kTol);
  EXPECT_LT(check_input_grad([](const Var<double>& v) { return probe(to_channels_first(v)); }, x), kTol);
  EXPECT_LT(check_input_grad([](const Var<double>& v) { return probe(reshape(v, Shape{6, 8})); }, x), kTol);
}

TEST(GradRouting, StopGradientBlocks) {
  auto x = variable(Tensor<double>(Shape{2}, {1, 2}));
  auto y = add(mul(x, x), stop_gradient(mul(x, x)));
  backward(sum(y));
  EXPECT_EQ(x.grad(), (Tensor<double>(Shape{2}, {2, 4})));  // only the live branch
  EXPECT_EQ(stop_gradient(x).value(), x.value());
}

TEST(GradRouting, StraightThroughCopiesGradient) {
  auto z = variable(Tensor<double>(Shape{3}, {0.2, -0.4, 0.9}));
  auto q = constant(Tensor<double>(Shape{3}, {0, 0, 1}));
  auto st = straight_through(z, q);
  EXPECT_EQ(st.value(), q.value());
  backward(sum(mul(st, constant(Tensor<double>(Shape{3}, {1, 2, 3})))));
  EXPECT_EQ(z.grad(), (Tensor<double>(Shape{3}, {1, 2, 3})));
}

TEST(Backward, NonFiniteGradientNamesOp) {
  auto x = variable(Tensor<double>(Shape{1}, {std::numeric_limits<double>::infinity()}));
  try {
    backward(sum(mul(x, x)));
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("mul"), std::string::npos) << e.what();
  }
}

TEST(Backward, RejectsNonScalarLoss) {
  auto x = variable(Tensor<double>(Shape{2}));
  EXPECT_THROW(backward(mul(x, x)), Error);
}

TEST(Tape, FrozenParametersGetZeroGradient) {
  ParameterStore<double> store;
  store.add("a", Tensor<double>(Shape{2}, {1, 2}));
  store.add("b", Tensor<double>(Shape{2}, {3, 4}), false);
  store.add("unused", Tensor<double>(Shape{1}, {5}));
  Tape<double> tape(store);
  auto g = tape.grad(sum(mul(tape.param("a"), tape.param("b"))));
  EXPECT_EQ(g.at("a"), (Tensor<double>(Shape{2}, {3, 4})));
  EXPECT_EQ(g.at("b"), Tensor<double>(Shape{2}));
  EXPECT_EQ(g.at("unused"), Tensor<double>(Shape{1}));
}

TEST(Tape, ParameterLeafIsSharedWithinATape) {
  ParameterStore<double> store;
  store.add("a", Tensor<double>(Shape{1}, {3}));
  Tape<double> tape(store);
  auto g = tape.grad(mul(tape.param("a"), tape.param("a")));
  EXPECT_DOUBLE_EQ(g.at("a")[0], 6.0);
}

// --- optimizer ---

TEST(Cosine, EndpointsAndMidpoint) {
  EXPECT_DOUBLE_EQ(cosine_lr(0, 100, 1e-3), 1e-3);
  EXPECT_NEAR(cosine_lr(50, 100, 1e-3), 5e-4, 1e-15);
  EXPECT_NEAR(cosine_lr(100, 100, 1e-3), 0.0, 1e-18);
}

TEST(Cosine, PastTheEndWarnsAndReturnsZero) {
  warning_records().clear();
  EXPECT_EQ(cosine_lr(101, 100, 1e-3), 0.0);
  EXPECT_EQ(warning_records().size(), 1u);
  EXPECT_THROW(cosine_lr(0, 0, 1e-3), Error);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  // With bias correction the first update is lr * g / (|g| + eps) ~ lr * sign(g).
  ParameterStore<double> store;
  store.add("w", Tensor<double>(Shape{3}, {1, 1, 1}));
  store.add("frozen", Tensor<double>(Shape{1}, {7}), false);
  auto st = AdamState<double>::with_schedule(10, 0.1);
  std::map<std::string, Tensor<double>> g{{"w", Tensor<double>(Shape{3}, {0.5, -2, 0})},
                                          {"frozen", Tensor<double>(Shape{1}, {1})}};
  adam_step(store, g, st);
  EXPECT_NEAR(store.get("w")[0], 0.9, 1e-7);
  EXPECT_NEAR(store.get("w")[1], 1.1, 1e-7);
  EXPECT_DOUBLE_EQ(store.get("w")[2], 1.0);
  EXPECT_DOUBLE_EQ(store.get("frozen")[0], 7.0);
}

TEST(Adam, SecondStepMatchesHandRecurrence) {
  ParameterStore<double> store;
  store.add("w", Tensor<double>(Shape{1}, {0.0}));
  auto st = AdamState<double>::with_schedule(4, 0.01);
  const double g1 = 1.0, g2 = 3.0;
  adam_step(store, {{"w", Tensor<double>(Shape{1}, {g1})}}, st);
  adam_step(store, {{"w", Tensor<double>(Shape{1}, {g2})}}, st);
  // independent recurrence with the cosine rate at steps 0 and 1
  double w = 0, m = 0, v = 0;
  const double gs[] = {g1, g2};
  for (int t = 1; t <= 2; ++t) {
    m = 0.9 * m + 0.1 * gs[t - 1];
    v = 0.999 * v + 0.001 * gs[t - 1] * gs[t - 1];
    const double lr = 0.01 * 0.5 * (1 + std::cos(M_PI * (t - 1) / 4.0));
    w -= lr * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
  }
  EXPECT_NEAR(store.get("w")[0], w, 1e-15);
}

TEST(Adam, MissingGradientIsAnError) {
  ParameterStore<double> store;
  store.add("w", Tensor<double>(Shape{1}));
  auto st = AdamState<double>::with_schedule(1);
  EXPECT_THROW(adam_step(store, {}, st), Error);
}
