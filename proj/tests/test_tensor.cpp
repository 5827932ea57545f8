#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "cstnet/gradcheck.hpp"
#include "cstnet/ops.hpp"
#include "cstnet/testing/oracles.hpp"

using namespace cstnet;

namespace {

Tensord rand_tensor(const Shape& s, std::mt19937_64& rng) { return Tensord::uniform(s, -1.0, 1.0, rng); }

oracle::Vec vec(const Tensord& t) { return {t.values().begin(), t.values().end()}; }

Tensord from(const Shape& s, std::vector<double> v, bool grad = false) { return Tensord(s, std::move(v), grad); }

}  // namespace

TEST(Matmul, IdentityLeavesMatrix) {
  auto eye = from({2, 2}, {1, 0, 0, 1});
  auto a = from({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(matmul(eye, a).values(), a.values());
}

TEST(Matmul, ZeroTimesAnything) {
  std::mt19937_64 rng(1);
  auto out = matmul(Tensord::zeros({2, 3}), rand_tensor({3, 4}, rng));
  EXPECT_EQ(out.shape(), (Shape{2, 4}));
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(Matmul, MatchesTripleLoop) {
  std::mt19937_64 rng(2);
  auto a = rand_tensor({3, 3}, rng), b = rand_tensor({3, 3}, rng);
  auto want = oracle::matmul(vec(a), 3, 3, vec(b), 3);
  EXPECT_LE(oracle::max_abs_diff(vec(matmul(a, b)), want), 1e-12);
}

TEST(Matmul, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(Tensord::zeros({2, 3}), Tensord::zeros({2, 3})), DimensionError);
}

TEST(Softmax, TwoZerosGiveHalves) {
  auto s = softmax(from({2}, {0, 0}), 0);
  EXPECT_DOUBLE_EQ(s.values()[0], 0.5);
  EXPECT_DOUBLE_EQ(s.values()[1], 0.5);
}

TEST(Softmax, ConstantGivesUniform) {
  for (double c : {-7.0, 0.0, 3.5, 1e3}) {
    auto s = softmax(from({3}, {c, c, c}), 0);
    for (double v : s.values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  }
}

TEST(Softmax, MatchesExpNormalize) {
  auto s = softmax(from({3}, {1, 2, 3}), 0);
  EXPECT_LE(oracle::max_abs_diff(vec(s), oracle::softmax({1, 2, 3})), 1e-12);
}

TEST(Softmax, SlicesSumToOneAndShiftInvariant) {
  std::mt19937_64 rng(3);
  auto x = rand_tensor({4, 5, 3}, rng);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    auto s = softmax(x, axis);
    auto shifted = softmax(add(x, Tensord::full({1}, 11.0)), axis);
    EXPECT_LE(oracle::max_abs_diff(vec(s), vec(shifted)), 1e-9);
    auto sums = mean_axis(s, axis);
    for (double v : sums.values()) EXPECT_NEAR(v * static_cast<double>(x.dim(axis)), 1.0, 1e-6);
  }
}

TEST(Conv2d, PointwiseIdentityKernel) {
  std::mt19937_64 rng(4);
  auto x = rand_tensor({2, 3, 4, 5}, rng);
  std::vector<double> k(9, 0.0);
  for (std::size_t i = 0; i < 3; ++i) k[i * 3 + i] = 1.0;
  auto y = conv2d(x, from({3, 3, 1, 1}, k), std::optional<Tensord>{}, 1, 0);
  EXPECT_EQ(y.values(), x.values());
}

TEST(Conv2d, ZeroKernel) {
  std::mt19937_64 rng(5);
  auto y = conv2d(rand_tensor({1, 2, 4, 4}, rng), Tensord::zeros({3, 2, 3, 3}), std::optional<Tensord>{}, 1, 1);
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, MatchesSlidingWindow) {
  std::mt19937_64 rng(6);
  auto x = rand_tensor({1, 2, 4, 4}, rng), k = rand_tensor({3, 2, 3, 3}, rng);
  auto want = oracle::conv2d(vec(x), vec(k), std::nullopt, {1, 2, 4, 4, 3, 3, 1, 1});
  EXPECT_LE(oracle::max_abs_diff(vec(conv2d(x, k, std::optional<Tensord>{}, 1, 1)), want), 1e-10);
}

TEST(Conv2d, StridedWithBiasMatchesOracle) {
  std::mt19937_64 rng(7);
  auto x = rand_tensor({2, 3, 5, 4}, rng), k = rand_tensor({2, 3, 3, 3}, rng), b = rand_tensor({2}, rng);
  auto want = oracle::conv2d(vec(x), vec(k), vec(b), {2, 3, 5, 4, 2, 3, 2, 1});
  auto got = conv2d(x, k, std::optional<Tensord>(b), 2, 1);
  EXPECT_EQ(got.shape(), (Shape{2, 2, 3, 2}));
  EXPECT_LE(oracle::max_abs_diff(vec(got), want), 1e-10);
}

TEST(AdaptivePool, SameSizeIsIdentity) {
  std::mt19937_64 rng(8);
  auto x = rand_tensor({2, 3, 4, 2}, rng);
  EXPECT_EQ(adaptive_avg_pool2d(x, 4, 2).values(), x.values());
}

TEST(AdaptivePool, ConstantStaysConstant) {
  auto y = adaptive_avg_pool2d(Tensord::full({1, 1, 4, 4}, 2.5), 2, 2);
  for (double v : y.values()) EXPECT_DOUBLE_EQ(v, 2.5);
}

TEST(AdaptivePool, BinMeans) {
  std::vector<double> v(16);
  std::iota(v.begin(), v.end(), 1.0);
  auto y = adaptive_avg_pool2d(from({1, 1, 4, 4}, v), 2, 2);
  EXPECT_EQ(y.values(), (std::vector<double>{3.5, 5.5, 11.5, 13.5}));
}

TEST(AdaptivePool, GlobalEqualsMean) {
  std::mt19937_64 rng(9);
  auto x = rand_tensor({1, 1, 5, 3}, rng);
  const double m = std::accumulate(x.values().begin(), x.values().end(), 0.0) / 15.0;
  EXPECT_NEAR(adaptive_avg_pool2d(x, 1, 1).item(), m, 1e-9);
}

TEST(AdaptivePool, UnevenBinsMatchOracle) {
  std::mt19937_64 rng(10);
  auto x = rand_tensor({2, 2, 5, 3}, rng);
  auto want = oracle::adaptive_avg_pool(vec(x), 4, 5, 3, 2, 2);
  EXPECT_LE(oracle::max_abs_diff(vec(adaptive_avg_pool2d(x, 2, 2)), want), 1e-12);
}

TEST(Pointwise, Definitions) {
  EXPECT_DOUBLE_EQ(sigmoid(from({1}, {0.0})).item(), 0.5);
  auto r = relu(from({2}, {-1.0, 2.0}));
  EXPECT_EQ(r.values(), (std::vector<double>{0.0, 2.0}));
  EXPECT_EQ(scale(from({2}, {1.0, -2.0}), 3.0).values(), (std::vector<double>{3.0, -6.0}));
  EXPECT_EQ(mul(from({2}, {2.0, 3.0}), from({2}, {4.0, 5.0})).values(), (std::vector<double>{8.0, 15.0}));
}

TEST(Pointwise, BroadcastOnlySingletons) {
  auto a = Tensord::ones({2, 3, 4});
  EXPECT_EQ(add(a, Tensord::ones({1, 3, 1})).shape(), (Shape{2, 3, 4}));
  EXPECT_THROW(add(a, Tensord::ones({2, 3})), DimensionError);
  EXPECT_THROW(add(a, Tensord::ones({1, 2, 4})), DimensionError);
}

TEST(Pointwise, ReshapeRoundTripAndPermute) {
  std::mt19937_64 rng(11);
  auto x = rand_tensor({2, 3, 4}, rng);
  EXPECT_EQ(reshape(reshape(x, {6, 4}), {2, 3, 4}).values(), x.values());
  auto p = permute(x, {2, 0, 1});
  EXPECT_EQ(p.shape(), (Shape{4, 2, 3}));
  EXPECT_EQ(p.values()[1 * 6 + 1 * 3 + 2], x.values()[1 * 12 + 2 * 4 + 1]);
  EXPECT_EQ(permute(p, {1, 2, 0}).values(), x.values());
}

TEST(BatchNorm, NormalizesBatchStatistics) {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> nd(3.0, 2.0);
  std::vector<double> v(8 * 2 * 3 * 3);
  for (auto& e : v) e = nd(rng);
  auto x = from({8, 2, 3, 3}, v);
  auto gamma = Tensord::ones({2}), beta = Tensord::zeros({2});
  auto rm = Tensord::zeros({2}), rv = Tensord::ones({2});
  auto y = batch_norm(x, gamma, beta, rm, rv, true);
  for (std::size_t c = 0; c < 2; ++c) {
    double s = 0, s2 = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t j = 0; j < 9; ++j) {
        const double e = y.values()[(i * 2 + c) * 9 + j];
        s += e;
        s2 += e * e;
        ++n;
      }
    const double mean = s / n;
    EXPECT_NEAR(mean, 0.0, 1e-6);
    // unit std up to the eps in the denominator: sqrt(var / (var + eps))
    double xs = 0, xs2 = 0;
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t j = 0; j < 9; ++j) {
        const double e = v[(i * 2 + c) * 9 + j];
        xs += e;
        xs2 += e * e;
      }
    const double var = xs2 / n - (xs / n) * (xs / n);
    EXPECT_NEAR(std::sqrt(s2 / n - mean * mean), std::sqrt(var / (var + kBatchNormEps)), 1e-9);
    EXPECT_NEAR(std::sqrt(s2 / n - mean * mean), 1.0, 1e-5);
  }
  // running stats moved toward the batch statistics
  EXPECT_GT(rm.values()[0], 0.0);
  auto eval = batch_norm(x, gamma, beta, rm, rv, false);
  EXPECT_EQ(eval.shape(), x.shape());
}

TEST(Backward, SumGivesOnes) {
  auto x = Tensord::full({2, 3}, 0.7, true);
  sum(x).backward();
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquareGivesTwoX) {
  auto x = from({3}, {1, 2, 3}, true);
  sum(mul(x, x)).backward();
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{2, 4, 6}));
}

TEST(Backward, NonScalarLossRejected) {
  auto x = Tensord::ones({2}, true);
  EXPECT_THROW(mul(x, x).backward(), ContractError);
}

TEST(Backward, CompositeMatchesFiniteDifferences) {
  std::mt19937_64 rng(13);
  auto x = rand_tensor({2, 2, 4, 4}, rng), k = rand_tensor({3, 2, 3, 3}, rng), w = rand_tensor({3, 5}, rng);
  auto r = gradcheck(
      [&] {
        auto h = adaptive_avg_pool2d(relu(conv2d(x, k, std::optional<Tensord>{}, 1, 1)), 1, 1);
        auto s = softmax(matmul(reshape(h, {2, 3}), w), 1);
        return sum(mul(s, s));
      },
      {x, k, w});
  EXPECT_LE(r.max_rel_error, 1e-4) << r.worst;
}

TEST(Backward, RepeatedPassIsDeterministic) {
  std::mt19937_64 rng(14);
  auto x = rand_tensor({3, 4}, rng).set_requires_grad(true);
  auto w = rand_tensor({4, 2}, rng).set_requires_grad(true);
  auto run = [&] {
    x.zero_grad();
    w.zero_grad();
    auto y = matmul(x, w);
    sum(mul(y, sigmoid(y))).backward();
    return std::vector<double>(w.grad().begin(), w.grad().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(Backward, NoGradGuardRecordsNothing) {
  auto x = Tensord::ones({2}, true);
  NoGradGuard guard;
  auto y = mul(x, x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(PairwiseDistances, Examples) {
  auto zero = pairwise_distances(Tensord::full({3, 2}, 1.5));
  for (double v : zero.values()) EXPECT_NEAR(v, 0.0, 1e-6);
  auto d = pairwise_distances(from({2, 2}, {0, 0, 3, 4}));
  EXPECT_NEAR(d.values()[1], 5.0, 1e-9);
  std::mt19937_64 rng(15);
  auto f = rand_tensor({5, 3}, rng);
  EXPECT_LE(oracle::max_abs_diff(vec(pairwise_distances(f)), oracle::pairwise_distances(vec(f), 5, 3)), 1e-10);
}
