/*
 * Copyright 2026 The roundlab Authors. All Rights Reserved.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "oracles.hpp"
#include "roundlab/tensor.hpp"

#include <gtest/gtest.h>

using namespace roundlab;

TEST(Matmul, IdentityIsExact)
{
  std::mt19937_64 rng(1);
  const Tensor a = oracle::random_tensor({2, 5}, rng);
  EXPECT_EQ(matmul(Tensor::identity(2), a), a);
}

TEST(Matmul, HandArithmetic)
{
  const Tensor c = matmul(Tensor::matrix({{1, 2}, {3, 4}}), Tensor::matrix({{1}, {1}}));
  EXPECT_EQ(c, Tensor::matrix({{3}, {7}}));
}

TEST(Matmul, MatchesNaiveTripleLoopBitwise)
{
  std::mt19937_64 rng(7);
  for (int rep = 0; rep < 20; ++rep)
  {
    const Tensor a = oracle::random_tensor({8, 8}, rng);
    const Tensor b = oracle::random_tensor({8, 8}, rng);
    EXPECT_EQ(matmul(a, b), oracle::naive_matmul(a, b));
  }
}

TEST(Matmul, ShapeMismatchThrows)
{
  EXPECT_THROW(matmul(Tensor({2, 3}), Tensor({2, 3})), DimensionError);
}

TEST(Conv2d, OnesKernelSumsWindow)
{
  const Tensor y = conv2d_im2col(Tensor({1, 3, 3}, 1.0), Tensor({1, 1, 3, 3}, 1.0), {1, 0});
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1}));
  EXPECT_EQ(y[0], 9.0);
}

TEST(Conv2d, ZeroKernelAnnihilates)
{
  std::mt19937_64 rng(3);
  const Tensor y = conv2d_im2col(oracle::random_tensor({2, 6, 6}, rng), Tensor({3, 2, 3, 3}), {1, 1});
  for (double v : y.data())
    EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, MatchesDirectConvolutionOnRandomCases)
{
  std::mt19937_64 rng(11);
  {
    const Tensor x = oracle::random_tensor({2, 5, 5}, rng);
    const Tensor k = oracle::random_tensor({3, 2, 3, 3}, rng);
    const Tensor y = conv2d_im2col(x, k, {1, 0});
    const Tensor ref = oracle::direct_conv(x, k, 1, 0);
    ASSERT_EQ(y.shape(), ref.shape());
    for (std::size_t i = 0; i < y.size(); ++i)
      EXPECT_NEAR(y[i], ref[i], 1e-12);
  }
  // Invariant: 100 random small geometries that tile.
  std::uniform_int_distribution<int> small(1, 3);
  int checked = 0;
  while (checked < 100)
  {
    const std::size_t c = small(rng), o = small(rng), kh = small(rng), kw = small(rng);
    const std::size_t stride = small(rng), pad = small(rng) - 1;
    const std::size_t h = 1 + rng() % 7, w = 1 + rng() % 7;
    if ((h + 2 * pad) < kh || (w + 2 * pad) < kw || (h + 2 * pad - kh) % stride || (w + 2 * pad - kw) % stride)
      continue;
    const Tensor x = oracle::random_tensor({c, h, w}, rng);
    const Tensor k = oracle::random_tensor({o, c, kh, kw}, rng);
    const Tensor y = conv2d_im2col(x, k, {stride, pad});
    const Tensor ref = oracle::direct_conv(x, k, stride, pad);
    ASSERT_EQ(y.shape(), ref.shape());
    for (std::size_t i = 0; i < y.size(); ++i)
      ASSERT_NEAR(y[i], ref[i], 1e-12);
    ++checked;
  }
}

TEST(Conv2d, NonTilingGeometryThrows)
{
  EXPECT_THROW(conv2d_im2col(Tensor({1, 4, 4}), Tensor({1, 1, 3, 3}), {2, 0}), GeometryError);
  EXPECT_THROW(conv2d_im2col(Tensor({1, 2, 2}), Tensor({1, 1, 3, 3}), {1, 0}), GeometryError);
}

TEST(Conv2d, Col2imIsAdjointOfIm2col)
{
  // <im2col(x), y> == <x, col2im(y)>
  std::mt19937_64 rng(5);
  const Tensor x = oracle::random_tensor({2, 6, 6}, rng);
  const Tensor cols = im2col(x, 4, 4, {2, 1});
  const Tensor y = oracle::random_tensor(cols.shape(), rng);
  const Tensor back = col2im(y, x.shape(), 4, 4, {2, 1});
  double lhs = 0.0, rhs = 0.0;
  for (std::size_t i = 0; i < cols.size(); ++i)
    lhs += cols[i] * y[i];
  for (std::size_t i = 0; i < x.size(); ++i)
    rhs += x[i] * back[i];
  EXPECT_NEAR(lhs, rhs, 1e-10);
}

TEST(Relu, ForwardAndBackward)
{
  EXPECT_EQ(relu_forward(Tensor::vector({-1, 0, 2})), Tensor::vector({0, 0, 2}));
  EXPECT_EQ(relu_backward(Tensor::vector({-1, 2}), Tensor::vector({5, 5})), Tensor::vector({0, 5}));
}

TEST(Relu, BackwardMatchesFiniteDifferences)
{
  const Tensor x = Tensor::vector({0.3, -0.3});
  for (std::size_t out = 0; out < 2; ++out)
  {
    Tensor up({2});
    up[out] = 1.0;
    const Tensor g = relu_backward(x, up);
    const auto fd = oracle::central_diff([&](const Tensor &p) { return relu_forward(p)[out]; }, x);
    for (std::size_t i = 0; i < 2; ++i)
      EXPECT_NEAR(g[i], fd[i], 1e-9);
  }
}

TEST(SoftmaxCrossEntropy, UniformLogits)
{
  const auto r = softmax_cross_entropy(Tensor({4}, 0.7), 2);
  EXPECT_NEAR(r.loss, std::log(4.0), 1e-15);
  double sum = 0.0;
  for (double v : r.grad.data())
    sum += v;
  EXPECT_NEAR(sum, 0.0, 1e-15);
}

TEST(SoftmaxCrossEntropy, ConfidentCorrectLogits)
{
  const auto r = softmax_cross_entropy(Tensor::vector({10, -10}), 0);
  // log(1 + e^-20) = 2.0611536e-9
  EXPECT_NEAR(r.loss, std::log1p(std::exp(-20.0)), 1e-15);
  EXPECT_NEAR(r.loss, 2.06e-9, 0.01e-9);
  EXPECT_LT(r.grad[0], 0.0);
  EXPECT_NEAR(r.grad[0], -2.06e-9, 0.01e-9);
  EXPECT_NEAR(r.grad[1], 2.06e-9, 0.01e-9);
}

TEST(SoftmaxCrossEntropy, TargetOutOfRange)
{
  EXPECT_THROW(softmax_cross_entropy(Tensor({3}), 3), IndexError);
}

TEST(SoftmaxCrossEntropy, GradientMatchesFiniteDifferences)
{
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<std::size_t> kd(2, 8);
  for (int rep = 0; rep < 100; ++rep)
  {
    const std::size_t k = kd(rng);
    const Tensor z = oracle::random_tensor({k}, rng, -3.0, 3.0);
    const std::size_t t = rng() % k;
    const auto r = softmax_cross_entropy(z, t);
    const auto fd = oracle::central_diff([&](const Tensor &p) { return oracle::cross_entropy(p.data(), t); }, z);
    EXPECT_LT(oracle::relative_error(r.grad.data(), fd), 1e-6);
    for (std::size_t i = 0; i < k; ++i)
      EXPECT_NEAR(r.grad[i], fd[i], 1e-7);
  }
}

TEST(Tensor, PureOperationsAreReproducible)
{
  std::mt19937_64 rng(23);
  const Tensor x = oracle::random_tensor({3, 7, 7}, rng);
  const Tensor k = oracle::random_tensor({4, 3, 3, 3}, rng);
  EXPECT_EQ(conv2d_im2col(x, k, {2, 1}), conv2d_im2col(x, k, {2, 1}));
}

TEST(Tensor, RejectsMismatchedData)
{
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  EXPECT_THROW(Tensor({2, 0}), DimensionError);
}
