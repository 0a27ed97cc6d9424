#include <gtest/gtest.h>

#include <cmath>

#include "flowseg/ops.hpp"
#include "flowseg/optim.hpp"
#include "support/gradcheck.hpp"

using namespace flowseg;

TEST(Tensor, RejectsDataShapeMismatch) {
  EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor({0}, {}), ShapeError);
}

TEST(Ops, AddIsElementwise) {
  Tensor a({2}, {1, 2}), b({2}, {3, 4});
  auto c = ops::add(a, b);
  EXPECT_EQ(c.at(0), 4.0f);
  EXPECT_EQ(c.at(1), 6.0f);
}

TEST(Ops, ShapeMismatchNamesOpAndShapes) {
  Tensor a({2}, {1, 2}), b({3}, {1, 2, 3});
  try {
    ops::add(a, b);
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("add"), std::string::npos);
    EXPECT_NE(msg.find("[2]"), std::string::npos);
    EXPECT_NE(msg.find("[3]"), std::string::npos);
  }
}

TEST(Ops, SigmoidOfZeroIsHalf) { EXPECT_FLOAT_EQ(ops::sigmoid(Tensor::scalar(0)).item(), 0.5f); }

TEST(Ops, Conv3dAllOnesSumsNeighbourhood) {
  Rng rng(3);
  auto x = oracle::random_tensor({1, 1, 8, 8, 8}, rng, false);
  auto y = ops::conv3d(x, Tensor::full({1, 1, 3, 3, 3}, 1.0f), Tensor::zeros({1}));
  ASSERT_EQ(y.shape(), (Shape{1, 1, 8, 8, 8}));
  auto idx = [](int i, int j, int k) { return (i * 8 + j) * 8 + k; };
  double expect = 0.0;
  for (int a = 3; a <= 5; ++a)
    for (int b = 3; b <= 5; ++b)
      for (int c = 3; c <= 5; ++c) expect += x.at(idx(a, b, c));
  EXPECT_NEAR(y.at(idx(4, 4, 4)), expect, 1e-5);
  // Corner sees only the in-bounds 2x2x2 block (zero padding).
  double corner = 0.0;
  for (int a = 0; a <= 1; ++a)
    for (int b = 0; b <= 1; ++b)
      for (int c = 0; c <= 1; ++c) corner += x.at(idx(a, b, c));
  EXPECT_NEAR(y.at(0), corner, 1e-5);
}

TEST(Ops, ConvShapeRules) {
  auto x = Tensor::zeros({2, 3, 9, 8, 7});
  EXPECT_EQ(ops::conv3d(x, Tensor::zeros({4, 3, 3, 3, 3}), Tensor::zeros({4}), {2, 2, 2}).shape(),
            (Shape{2, 4, 4, 4, 3}));
  EXPECT_EQ(ops::conv3d(x, Tensor::zeros({4, 3, 3, 3, 1}), Tensor::zeros({4}), {2, 2, 1}).shape(),
            (Shape{2, 4, 4, 4, 7}));
  auto z = Tensor::zeros({1, 4, 8, 8, 8});
  EXPECT_EQ(ops::conv_transpose3d(z, Tensor::zeros({4, 2, 3, 3, 3}), Tensor::zeros({2})).shape(),
            (Shape{1, 2, 16, 16, 16}));
  EXPECT_THROW(ops::conv3d(x, Tensor::zeros({4, 2, 3, 3, 3}), Tensor::zeros({4})), ShapeError);
}

TEST(Ops, ConvTransposeIsAdjointOfStridedConv) {
  // <conv(x), y> == <x, conv_T(y)> with shared weights and zero bias.
  Rng rng(9);
  auto x = oracle::random_tensor({1, 2, 8, 6, 4}, rng, false);
  auto y = oracle::random_tensor({1, 3, 4, 3, 2}, rng, false);
  auto w = oracle::random_tensor({3, 2, 3, 3, 3}, rng, false);
  std::vector<float> wt(w.numel());
  // conv weight [Cout=3, Cin=2, K] -> transposed-conv weight [Cin'=3, Cout'=2, K] is the same layout.
  std::copy(w.data().begin(), w.data().end(), wt.begin());
  auto cx = ops::conv3d(x, w, Tensor::zeros({3}), {2, 2, 2});
  auto ty = ops::conv_transpose3d(y, Tensor({3, 2, 3, 3, 3}, wt), Tensor::zeros({2}));
  double lhs = 0, rhs = 0;
  for (std::int64_t i = 0; i < cx.numel(); ++i) lhs += double(cx.at(i)) * y.at(i);
  for (std::int64_t i = 0; i < x.numel(); ++i) rhs += double(x.at(i)) * ty.at(i);
  EXPECT_NEAR(lhs, rhs, 1e-4 * std::max(1.0, std::abs(lhs)));
}

TEST(Ops, NonFiniteOutputIsAnError) {
  Tensor big({1}, {3e38f});
  EXPECT_THROW(ops::scale(big, 10.0f), NumericError);
}

TEST(Backward, SquareHasDerivativeTwoX) {
  Tape tape;
  auto x = Tensor::scalar(3.0f).leaf();
  auto g = tape.backward(ops::mul(x, x));
  EXPECT_FLOAT_EQ(g.at(x).item(), 6.0f);
  EXPECT_TRUE(tape.empty());
}

TEST(Backward, BceGradientIsSigmoidMinusTarget) {
  for (float l : {-2.0f, 0.0f, 0.7f, 4.0f}) {
    for (float y : {0.0f, 1.0f}) {
      Tape tape;
      auto logit = Tensor::scalar(l).leaf();
      auto g = tape.backward(ops::bce_with_logits(logit, Tensor::scalar(y)));
      EXPECT_NEAR(g.at(logit).item(), 1.0f / (1.0f + std::exp(-l)) - y, 1e-6);
    }
  }
}

TEST(Backward, MatmulChainMatchesFiniteDifferences) {
  Rng rng(77);
  oracle::GradCase c{"matmul-chain",
                      [](Rng& r) {
                        return std::vector<Tensor>{oracle::random_tensor({2, 3}, r), oracle::random_tensor({3, 3}, r),
                                                   oracle::random_tensor({3, 2}, r)};
                      },
                      [](const std::vector<Tensor>& in) { return ops::matmul(ops::matmul(in[0], in[1]), in[2]); }};
  for (int i = 0; i < 5; ++i) EXPECT_LE(oracle::grad_check(c, rng).max_rel_error, 1e-3);
}

TEST(Backward, GradientsAccumulateAcrossConsumers) {
  // y = sigmoid(x) + x*x  => dy/dx = s(1-s) + 2x, on one tape.
  Tape tape;
  auto x = Tensor({3}, {-0.5f, 0.25f, 1.5f}).leaf();
  auto y = ops::sum(ops::add(ops::sigmoid(x), ops::mul(x, x)));
  auto g = tape.backward(y);
  for (int i = 0; i < 3; ++i) {
    const float xv = x.at(i);
    const float s = 1.0f / (1.0f + std::exp(-xv));
    EXPECT_FLOAT_EQ(g.at(x).at(i), s * (1 - s) + 2 * xv);
  }
}

TEST(Backward, RejectsNonScalarAndEmptyTape) {
  Tape tape;
  auto x = Tensor({2}, {1, 2}).leaf();
  EXPECT_THROW(tape.backward(x), ShapeError);
  EXPECT_THROW(tape.backward(Tensor::scalar(1.0f)), std::logic_error);
}

TEST(Backward, NonFiniteGradientNamesNode) {
  // Forward stays finite (1e30 * 1e-30 * 1e10) but d/db = 1e10 * 1e30 overflows.
  Tape tape;
  auto a = Tensor::scalar(1e30f).leaf();
  auto b = Tensor::scalar(1e-30f).leaf();
  auto y = ops::scale(ops::mul(a, b), 1e10f);
  try {
    tape.backward(y);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("node 0"), std::string::npos) << msg;
    EXPECT_NE(msg.find("mul"), std::string::npos) << msg;
  }
}

TEST(Backward, IntermediateLeafGetsGradient) {
  // Marking an intermediate as a leaf cuts the graph there.
  Tape tape;
  auto a = Tensor({2}, {1.0f, -2.0f}).leaf();
  auto zhat = ops::scale(a, 2.0f).leaf();
  auto target = Tensor({2}, {0.5f, 0.5f});
  auto loss = ops::scale(ops::sum(ops::mul(ops::sub(zhat, target), ops::sub(zhat, target))), 0.5f);
  auto g = tape.backward(loss);
  EXPECT_FALSE(g.contains(a));
  EXPECT_FLOAT_EQ(g.at(zhat).at(0), zhat.at(0) - 0.5f);
  EXPECT_FLOAT_EQ(g.at(zhat).at(1), zhat.at(1) - 0.5f);
}

TEST(Backward, Deterministic) {
  auto run = [] {
    Rng rng(5);
    auto x = oracle::random_tensor({2, 2, 6, 6, 6}, rng);
    auto w = oracle::random_tensor({3, 2, 3, 3, 3}, rng);
    auto b = oracle::random_tensor({3}, rng);
    Tape tape;
    auto y = ops::mean(ops::silu(ops::conv3d(x, w, b, {2, 2, 2})));
    auto g = tape.backward(y);
    std::vector<float> out(g.at(w).data().begin(), g.at(w).data().end());
    out.push_back(y.item());
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(NoGrad, SuppressesRecording) {
  Tape tape;
  auto x = Tensor::scalar(2.0f).leaf();
  {
    NoGradGuard ng;
    auto y = ops::mul(x, x);
    EXPECT_FALSE(y.requires_grad());
  }
  EXPECT_TRUE(tape.empty());
}

TEST(Adam, ZeroGradientLeavesParameterUnchanged) {
  ParamSet ps;
  ps.add("w", Tensor({2}, {1.0f, -1.0f}));
  GradMap g;
  g.insert(ps.tensor("w").id(), Tensor::zeros({2}));
  adam_step(ps, g, 5e-4f);
  EXPECT_EQ(ps.tensor("w").at(0), 1.0f);
  EXPECT_EQ(ps.tensor("w").at(1), -1.0f);
  EXPECT_EQ(ps.get("w").m[0], 0.0f);
}

TEST(Adam, FirstStepMagnitudeIsLearningRate) {
  // m1 = 0.1, v1 = 0.001; bias-corrected both give 1, so step = lr / (1 + eps).
  ParamSet ps;
  ps.add("w", Tensor::scalar(0.0f));
  GradMap g;
  g.insert(ps.tensor("w").id(), Tensor::scalar(1.0f));
  const float lr = 5e-4f;
  adam_step(ps, g, lr);
  EXPECT_NEAR(ps.tensor("w").item(), -lr, 1e-9);
}

TEST(Adam, MissingGradientIsAnError) {
  ParamSet ps;
  ps.add("w", Tensor::scalar(0.0f));
  ps.add("b", Tensor::scalar(0.0f));
  GradMap g;
  g.insert(ps.tensor("w").id(), Tensor::scalar(1.0f));
  EXPECT_THROW(adam_step(ps, g, 5e-4f), std::invalid_argument);
}

TEST(Adam, MomentShapesMatchParameter) {
  ParamSet ps;
  auto& p = ps.add("w", Tensor::zeros({3, 4}));
  EXPECT_EQ(p.m.size(), 12u);
  EXPECT_EQ(p.v.size(), 12u);
}
