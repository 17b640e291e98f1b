#include <gtest/gtest.h>

#include <cmath>

#include "checks.hpp"
#include "dcp/ops.hpp"

namespace dcp {
namespace {

// Six nested loops, accumulating in double.
std::vector<double> direct_conv(const Tensor& x, const Tensor& w, int stride, int pad) {
  const int B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Cout = w.dim(0), K = w.dim(2);
  const int Ho = (H + 2 * pad - K) / stride + 1, Wo = (W + 2 * pad - K) / stride + 1;
  std::vector<double> out(std::size_t(B) * Cout * Ho * Wo, 0.0);
  for (int b = 0; b < B; ++b)
    for (int co = 0; co < Cout; ++co)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          double s = 0;
          for (int ci = 0; ci < Cin; ++ci)
            for (int ky = 0; ky < K; ++ky)
              for (int kx = 0; kx < K; ++kx) {
                const int iy = oy * stride + ky - pad, ix = ox * stride + kx - pad;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                s += double(x.at({std::size_t(b), std::size_t(ci), std::size_t(iy), std::size_t(ix)})) *
                     w.at({std::size_t(co), std::size_t(ci), std::size_t(ky), std::size_t(kx)});
              }
          out[((std::size_t(b) * Cout + co) * Ho + oy) * Wo + ox] = s;
        }
  return out;
}

TEST(Conv2d, AllOnesGivesNine) {
  Tensor x = Tensor::full({1, 1, 3, 3}, 1.0f), w = Tensor::full({1, 1, 3, 3}, 1.0f);
  Tensor y = conv2d(x, w, 1, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y.item(), 9.0f);
}

TEST(Conv2d, ScalarKernelScalesInput) {
  Tensor x({1, 1, 2, 2}, {1, 0, 0, 1});
  Tensor w({1, 1, 1, 1}, {2});
  Tensor y = conv2d(x, w, 1, 0);
  EXPECT_EQ(std::vector<float>(y.data().begin(), y.data().end()), (std::vector<float>{2, 0, 0, 2}));
}

TEST(Conv2d, MatchesDirectLoopOracle) {
  Rng rng(7);
  for (int trial = 0; trial < 6; ++trial) {
    const int stride = 1 + trial % 2, pad = trial / 2 % 2;
    Tensor x = check::random_tensor_f({2, 3, 8, 8}, rng);
    Tensor w = check::random_tensor_f({4, 3, 3, 3}, rng);
    Tensor y = conv2d(x, w, stride, pad);
    const auto ref = direct_conv(x, w, stride, pad);
    ASSERT_EQ(y.numel(), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.data()[i], ref[i], 1e-5) << "stride " << stride;
  }
}

TEST(Conv2d, RandomExampleWithinMicro) {
  Rng rng(11);
  Tensor x = check::random_tensor_f({2, 3, 8, 8}, rng, 0.5f);
  Tensor w = check::random_tensor_f({4, 3, 3, 3}, rng, 0.2f);
  Tensor y = conv2d(x, w, 1, 0);
  const auto ref = direct_conv(x, w, 1, 0);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.data()[i], ref[i], 1e-6);
}

TEST(Conv2d, ShapeMismatchNamesAxes) {
  Tensor x = Tensor::zeros({1, 3, 5, 5}), w = Tensor::zeros({2, 4, 3, 3});
  try {
    conv2d(x, w, 1, 0);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("axis 1"), std::string::npos) << e.what();
  }
}

TEST(Conv2d, OutputExtentUsesFloor) {
  Tensor y = conv2d(Tensor::zeros({1, 1, 32, 32}), Tensor::zeros({1, 1, 3, 3}), 2, 1);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 16, 16}));
}

TEST(BatchNorm, ConstantChannelNormalizesToZero) {
  Tensor x = Tensor::full({2, 1, 3, 3}, 4.0f);
  auto stats = BatchNormStats<float>::init(1);
  Tensor y = batchnorm(x, Tensor::full({1}, 1.0f), Tensor::zeros({1}), stats, Mode::kTrain);
  for (float v : y.data()) EXPECT_EQ(v, 0.0f);
}

TEST(BatchNorm, ZeroGammaGivesBeta) {
  Rng rng(3);
  Tensor x = check::random_tensor_f({2, 2, 3, 3}, rng);
  auto stats = BatchNormStats<float>::init(2);
  Tensor y = batchnorm(x, Tensor::zeros({2}), Tensor({2}, {0.5f, -1.5f}), stats, Mode::kTrain);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_EQ(y.data()[i], (i / 9) % 2 == 0 ? 0.5f : -1.5f);
}

TEST(BatchNorm, TrainOutputHasGammaBetaStatistics) {
  Rng rng(5);
  Tensor x = check::random_tensor_f({4, 2, 3, 3}, rng, 3.0f);
  const std::vector<float> gamma{1.5f, 0.25f}, beta{-0.5f, 2.0f};
  auto stats = BatchNormStats<float>::init(2);
  Tensor y = batchnorm(x, Tensor({2}, gamma), Tensor({2}, beta), stats, Mode::kTrain);
  for (std::size_t c = 0; c < 2; ++c) {
    double s = 0, s2 = 0;
    int n = 0;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t i = 0; i < 9; ++i) {
        const double v = y.data()[(b * 2 + c) * 9 + i];
        s += v, s2 += v * v, ++n;
      }
    const double mean = s / n, sd = std::sqrt(s2 / n - mean * mean);
    EXPECT_NEAR(mean, beta[c], 1e-4);
    // eps = 1e-5 shrinks the std by gamma * eps / (2 var); negligible at var ~ 9
    EXPECT_NEAR(sd, gamma[c], 1e-4);
  }
}

TEST(BatchNorm, RunningStatsMomentum) {
  Tensor x({2, 1, 1, 1}, {1.0f, 3.0f});
  auto stats = BatchNormStats<float>::init(1);
  batchnorm(x, Tensor::full({1}, 1.0f), Tensor::zeros({1}), stats, Mode::kTrain);
  EXPECT_NEAR(stats.running_mean[0], 0.1 * 2.0, 1e-7);
  EXPECT_NEAR(stats.running_var[0], 0.9 * 1.0 + 0.1 * 2.0, 1e-6);  // unbiased var of {1,3} is 2
}

TEST(BatchNorm, EvalWithZeroVarianceStaysFinite) {
  BatchNormStats<float> stats{{0.0f}, {0.0f}};
  Tensor y = batchnorm(Tensor::full({1, 1, 2, 2}, 1.0f), Tensor::full({1}, 1.0f), Tensor::zeros({1}), stats, Mode::kEval);
  for (float v : y.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(ChannelScale, OnesIsIdentity) {
  Rng rng(1);
  Tensor x = check::random_tensor_f({2, 3, 2, 2}, rng);
  std::vector<float> m(3, 1.0f);
  Tensor y = channel_scale(x, std::span<const float>(m));
  EXPECT_EQ(std::vector<float>(y.data().begin(), y.data().end()), std::vector<float>(x.data().begin(), x.data().end()));
}

TEST(ChannelScale, ZerosAnnihilateValueAndGradient) {
  Rng rng(2);
  Tensor x = check::random_tensor_f({2, 3, 2, 2}, rng);
  x.set_requires_grad();
  std::vector<float> m(3, 0.0f);
  Tensor y = channel_scale(x, std::span<const float>(m));
  for (float v : y.data()) EXPECT_EQ(v, 0.0f);
  backward(sum(mul(y, check::random_tensor_f(y.shape(), rng))));
  for (float g : x.grad()) EXPECT_EQ(g, 0.0f);
}

TEST(ChannelScale, MiddleChannelMaskedMatchesUnmaskedElsewhere) {
  Rng rng(9);
  Tensor x0 = check::random_tensor_f({2, 3, 2, 2}, rng);
  Tensor r = check::random_tensor_f({2, 3, 2, 2}, rng);
  auto run = [&](std::vector<float> m) {
    Tensor x = x0.clone();
    x.set_requires_grad();
    Tensor y = channel_scale(x, std::span<const float>(m));
    backward(sum(mul(y, r)));
    return std::pair{std::vector<float>(y.data().begin(), y.data().end()),
                     std::vector<float>(x.grad().begin(), x.grad().end())};
  };
  auto [ym, gm] = run({1, 0, 1});
  auto [yu, gu] = run({1, 1, 1});
  for (std::size_t i = 0; i < ym.size(); ++i) {
    const bool masked = (i / 4) % 3 == 1;
    EXPECT_EQ(ym[i], masked ? 0.0f : yu[i]);
    EXPECT_EQ(gm[i], masked ? 0.0f : gu[i]);
  }
}

TEST(ChannelScale, LengthMismatch) {
  std::vector<float> m(2, 1.0f);
  EXPECT_THROW(channel_scale(Tensor::zeros({1, 3, 2, 2}), std::span<const float>(m)), DimensionError);
}

TEST(Backward, SumGivesOnes) {
  Tensor x({4}, {1, -2, 3, 0.5f});
  x.set_requires_grad();
  backward(sum(x));
  for (float g : x.grad()) EXPECT_EQ(g, 1.0f);
}

TEST(Backward, HalfSquareGivesX) {
  Tensor x({4}, {1, -2, 3, 0.5f});
  x.set_requires_grad();
  backward(scale(sum(mul(x, x)), 0.5f));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(x.grad()[i], x.data()[i]);
}

TEST(Backward, FanOutAccumulates) {
  Tensor x({2}, {1, 2});
  x.set_requires_grad();
  backward(sum(add(x, scale(x, 3.0f))));
  for (float g : x.grad()) EXPECT_EQ(g, 4.0f);
}

TEST(Backward, SecondCallIsAnError) {
  Tensor x({2}, {1, 2});
  x.set_requires_grad();
  Tensor loss = sum(x);
  backward(loss);
  EXPECT_THROW(backward(loss), AutogradError);
}

TEST(Backward, NonScalarLossRejected) {
  Tensor x({2}, {1, 2});
  x.set_requires_grad();
  EXPECT_THROW(backward(scale(x, 2.0f)), AutogradError);
}

TEST(Ops, ReluMaxpoolAvgpoolLinearValues) {
  Tensor x({1, 1, 2, 4}, {-1, 2, 3, -4, 5, 0, -7, 8});
  EXPECT_EQ(relu(x).at({0, 0, 0, 0}), 0.0f);
  Tensor p = maxpool2x2(x);
  ASSERT_EQ(p.shape(), (Shape{1, 1, 1, 2}));
  EXPECT_EQ(p.at({0, 0, 0, 0}), 5.0f);
  EXPECT_EQ(p.at({0, 0, 0, 1}), 8.0f);
  EXPECT_EQ(global_avgpool(x).item(), 0.75f);
  Tensor y = linear(Tensor({1, 2}, {1, 2}), Tensor({2, 2}, {1, 1, 0, 3}), Tensor({2}, {0.5f, 0}));
  EXPECT_EQ(y.at({0, 0}), 3.5f);
  EXPECT_EQ(y.at({0, 1}), 6.0f);
}

TEST(Ops, CrossEntropyOfUniformLogitsIsLogK) {
  std::vector<std::int32_t> labels{0, 3};
  Tensor loss = softmax_cross_entropy(Tensor::zeros({2, 10}), labels);
  EXPECT_NEAR(loss.item(), std::log(10.0), 1e-6);
}

TEST(Ops, NoGradGuardRecordsNothing) {
  Tensor x({2}, {1, 2});
  x.set_requires_grad();
  NoGradGuard g;
  EXPECT_TRUE(scale(x, 2.0f).is_leaf());
}

TEST(Determinism, ForwardAndGradientsBitwiseRepeatable) {
  auto once = [] {
    Rng rng(42);
    Tensor x = check::random_tensor_f({4, 3, 9, 9}, rng);
    Tensor w = check::random_tensor_f({8, 3, 3, 3}, rng);
    w.set_requires_grad();
    auto stats = BatchNormStats<float>::init(8);
    Tensor y = relu(batchnorm(conv2d(x, w, 1, 1), Tensor::full({8}, 1.0f), Tensor::zeros({8}), stats, Mode::kTrain));
    backward(sum(mul(y, check::random_tensor_f(y.shape(), rng))));
    return std::pair{std::vector<float>(y.data().begin(), y.data().end()),
                     std::vector<float>(w.grad().begin(), w.grad().end())};
  };
  EXPECT_EQ(once(), once());
}

}  // namespace
}  // namespace dcp
