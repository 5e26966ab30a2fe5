#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "ccenet/ccenet.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace ccenet;

namespace {

void fill(Tensor t, double v) {
  for (double& x : t.mutable_data()) x = v;
}

double row_entropy(const Tensor& s, std::size_t row, std::size_t n) {
  double h = 0.0;
  for (std::size_t q = 0; q < n; ++q) {
    const double p = s[row * n + q];
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

}  // namespace

TEST(CglFuseTest, ZeroContextKeepsAsppBitExact) {
  Rng rng(1);
  Cgl cgl(4, true, false, rng);
  std::mt19937_64 r(1);
  Tensor fa = oracle::random_tensor(Shape{2, 4, 3, 3}, r);
  Tensor fl = cgl.fuse(fa, Tensor(fa.shape(), 0.0));
  for (std::size_t i = 0; i < fa.numel(); ++i) EXPECT_EQ(fl[i], fa[i]);
}

TEST(CglFuseTest, SaturatedGateAddsContext) {
  Rng rng(2);
  Cgl cgl(4, true, false, rng);
  fill(cgl.gate.weight, 0.0);
  fill(cgl.gate.bias, 20.0);
  std::mt19937_64 r(2);
  Tensor fa = oracle::random_tensor(Shape{1, 4, 3, 3}, r);
  Tensor fc = oracle::random_tensor(Shape{1, 4, 3, 3}, r);
  Tensor gate;
  Tensor fl = cgl.fuse(fa, fc, &gate);
  for (std::size_t i = 0; i < fa.numel(); ++i) {
    EXPECT_NEAR(gate[i], 1.0, 1e-8);
    EXPECT_NEAR(fl[i], fa[i] + fc[i], 1e-8);
  }
}

TEST(CglFuseTest, ShapeMismatchIsShapeError) {
  Rng rng(3);
  Cgl cgl(4, true, false, rng);
  EXPECT_THROW(cgl.fuse(Tensor(Shape{1, 4, 3, 3}), Tensor(Shape{1, 4, 2, 3})), ShapeError);
}

TEST(CglFuseTest, WithoutContextFusionIsSkipped) {
  Rng rng(4);
  Cgl cgl(4, false, false, rng);
  std::mt19937_64 r(4);
  Tensor fa = oracle::random_tensor(Shape{1, 4, 3, 3}, r);
  CglOutput o = cgl.forward(fa, Tensor());
  EXPECT_TRUE(o.fused.same_storage(fa));
  EXPECT_FALSE(o.gate.defined());
  TensorList params;
  cgl.parameters("cgl", params);
  EXPECT_TRUE(params.empty());
}

TEST(AffinityTest, IdenticalPositionsGiveUniformRows) {
  Tensor f(Shape{1, 3, 2, 3}, 0.4);
  Tensor s = position_affinity(f);
  ASSERT_EQ(s.shape(), (Shape{1, 1, 6, 6}));
  for (double v : s.data()) EXPECT_NEAR(v, 1.0 / 6.0, 1e-15);
}

TEST(AffinityTest, TwoPositionClosedForm) {
  // f^1 = (1,0), f^2 = (0,1): two channels over a 1x2 map
  Tensor f(Shape{1, 2, 1, 2}, std::vector<double>{1, 0, 0, 1});
  Tensor s = position_affinity(f);
  EXPECT_NEAR(s[0], 0.73106, 1e-5);
  EXPECT_NEAR(s[1], 0.26894, 1e-5);
  EXPECT_NEAR(s[0], std::exp(1.0) / (std::exp(1.0) + 1.0), 1e-15);
}

TEST(AffinityTest, RawScoresSymmetricSoftmaxNot) {
  std::mt19937_64 r(5);
  Tensor f = oracle::random_tensor(Shape{1, 3, 3, 3}, r);
  Tensor raw = position_scores(f, f);
  Tensor s = position_affinity(f);
  bool asymmetric = false;
  for (std::size_t p = 0; p < 9; ++p) {
    for (std::size_t q = 0; q < 9; ++q) {
      EXPECT_EQ(raw[p * 9 + q], raw[q * 9 + p]);
      asymmetric |= std::abs(s[p * 9 + q] - s[q * 9 + p]) > 1e-6;
    }
  }
  EXPECT_TRUE(asymmetric);
}

TEST(AffinityTest, RowStochasticOnRandomInputs) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 r(seed);
    Tensor s = position_affinity(oracle::random_tensor(Shape{2, 8, 4, 4}, r, -3, 3));
    for (std::size_t row = 0; row < 2 * 16; ++row) {
      double total = 0.0;
      for (std::size_t q = 0; q < 16; ++q) {
        EXPECT_GE(s[row * 16 + q], 0.0);
        total += s[row * 16 + q];
      }
      EXPECT_NEAR(total, 1.0, 1e-9);
    }
  }
}

TEST(AffinityTest, BatchItemsDoNotMix) {
  std::mt19937_64 r(6);
  Tensor f = oracle::random_tensor(Shape{2, 3, 2, 2}, r);
  Tensor both = position_affinity(f);
  Tensor only0(Shape{1, 3, 2, 2}, std::vector<double>(f.data().begin(), f.data().begin() + 12));
  Tensor s0 = position_affinity(only0);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(both[i], s0[i]);
}

TEST(AffinityTest, ScalingSharpensRows) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 r(seed);
    Tensor f = oracle::random_tensor(Shape{1, 4, 3, 3}, r);
    Tensor s1 = position_affinity(f);
    for (double t : {1.5, 2.0, 4.0}) {
      Tensor st = position_affinity(scale(f, t));
      for (std::size_t row = 0; row < 9; ++row) {
        EXPECT_LE(row_entropy(st, row, 9), row_entropy(s1, row, 9) + 1e-12);
      }
    }
  }
}

TEST(UpdateTest, IdentityMixing) {
  std::mt19937_64 r(7);
  Tensor fl = oracle::random_tensor(Shape{1, 2, 2, 2}, r);
  Tensor fa = oracle::random_tensor(Shape{1, 2, 2, 2}, r);
  Tensor eye(Shape{1, 1, 4, 4});
  for (std::size_t i = 0; i < 4; ++i) eye.mutable_data()[i * 5] = 1.0;
  Tensor out = affinity_update(fl, eye, fa);
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_EQ(out[i], fl[i] + fa[i]);
}

TEST(UpdateTest, UniformMixingOfConstant) {
  std::mt19937_64 r(8);
  Tensor fa = oracle::random_tensor(Shape{1, 2, 3, 3}, r);
  Tensor out = affinity_update(Tensor(Shape{1, 2, 3, 3}, 0.8), Tensor(Shape{1, 1, 9, 9}, 1.0 / 9.0), fa);
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_NEAR(out[i], 0.8 + fa[i], 1e-15);
}

TEST(UpdateTest, TwoPositionHandCase) {
  Tensor fl(Shape{1, 1, 1, 2}, std::vector<double>{2, 4});
  Tensor s(Shape{1, 1, 2, 2}, std::vector<double>{0.75, 0.25, 0.5, 0.5});
  Tensor fa(Shape{1, 1, 1, 2}, 1.0);
  Tensor out = affinity_update(fl, s, fa);
  EXPECT_DOUBLE_EQ(out[0], 3.5);
  EXPECT_DOUBLE_EQ(out[1], 4.0);
}

TEST(UpdateTest, MixingIsLinearForFixedAffinity) {
  std::mt19937_64 r(9);
  Tensor s = position_affinity(oracle::random_tensor(Shape{1, 3, 2, 3}, r));
  Tensor x = oracle::random_tensor(Shape{1, 3, 2, 3}, r);
  Tensor y = oracle::random_tensor(Shape{1, 3, 2, 3}, r);
  const double a = 1.3, b = -0.6;
  Tensor lhs = position_mix(add(scale(x, a), scale(y, b)), s);
  Tensor rhs = add(scale(position_mix(x, s), a), scale(position_mix(y, s), b));
  for (std::size_t i = 0; i < lhs.numel(); ++i) EXPECT_NEAR(lhs[i], rhs[i], 1e-14);
}

TEST(CglGradTest, FullChainMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    EXPECT_LT(gradcheck::cgl_chain_error(seed), 1e-4) << "seed " << seed;
  }
}

TEST(CglTest, QueryKeyProjectionSwitch) {
  Rng a(10), b(10);
  Cgl plain(4, true, false, a);
  Cgl projected(4, true, true, b);
  TensorList pp, pq;
  plain.parameters("cgl", pp);
  projected.parameters("cgl", pq);
  EXPECT_EQ(pq.size(), pp.size() + 4);
  std::mt19937_64 r(10);
  Tensor fa = oracle::random_tensor(Shape{1, 4, 3, 3}, r);
  CglOutput o = projected.forward(fa, oracle::random_tensor(fa.shape(), r));
  EXPECT_EQ(o.affinity.shape(), (Shape{1, 1, 9, 9}));
}
