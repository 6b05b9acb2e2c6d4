#include <gtest/gtest.h>

#include <random>

#include "atomflow/codec.hpp"
#include "test_util.hpp"

using atomflow::Codebook;
using atomflow::Tensor;

namespace {

Tensor constant_flow(int H, int W, double x, double y, double z) {
  Tensor f({H, W, 3});
  for (int i = 0; i < H * W; ++i) {
    f[static_cast<size_t>(i) * 3 + 0] = x;
    f[static_cast<size_t>(i) * 3 + 1] = y;
    f[static_cast<size_t>(i) * 3 + 2] = z;
  }
  return f;
}

TEST(Codebook, DefaultGeometry) {
  Codebook cb(5, 1.0);
  EXPECT_EQ(cb.size(), 125);
  EXPECT_DOUBLE_EQ(cb.bin_width(), 0.4);
  const double expect[5] = {-0.8, -0.4, 0.0, 0.4, 0.8};
  for (int i = 0; i < 5; ++i) EXPECT_NEAR(cb.center(i), expect[i], 1e-15);
  // The middle codeword is the exact zero flow.
  EXPECT_EQ(cb.zero_index(), 62);
  const double* z = cb.codeword(62);
  EXPECT_EQ(z[0], 0.0);
  EXPECT_EQ(z[1], 0.0);
  EXPECT_EQ(z[2], 0.0);
}

TEST(Codebook, IndexLayoutRowMajorXYZ) {
  Codebook cb(3, 1.0);
  EXPECT_EQ(cb.index_of(1, 2, 0), 1 * 9 + 2 * 3 + 0);
  const double* c = cb.codeword(cb.index_of(0, 1, 2));
  EXPECT_NEAR(c[0], -2.0 / 3.0, 1e-15);
  EXPECT_NEAR(c[1], 0.0, 1e-15);
  EXPECT_NEAR(c[2], 2.0 / 3.0, 1e-15);
}

TEST(Codebook, EvenOrNonPositiveBinsRejected) {
  EXPECT_THROW(Codebook(4, 1.0), std::runtime_error);
  EXPECT_THROW(Codebook(0, 1.0), std::runtime_error);
  EXPECT_THROW(Codebook(-3, 1.0), std::runtime_error);
  EXPECT_THROW(Codebook(5, 0.0), std::runtime_error);
  EXPECT_THROW(Codebook(5, -1.0), std::runtime_error);
}

TEST(Encode, DistributionRowsAreNormalizedWithKnnSupport) {
  Codebook cb(5, 1.0);
  Tensor flow = aftest::random_tensor({8, 8, 3}, 301, -1.3, 1.3);
  Tensor grid = atomflow::encode(flow, cb, 4, 4);
  ASSERT_EQ(grid.dim(0), 2);
  ASSERT_EQ(grid.dim(1), 2);
  ASSERT_EQ(grid.dim(2), 125);
  for (int p = 0; p < 4; ++p) {
    double sum = 0.0;
    int nonzero = 0;
    for (int k = 0; k < 125; ++k) {
      const double v = grid[static_cast<size_t>(p) * 125 + k];
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
      sum += v;
      if (v != 0.0) ++nonzero;
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
    EXPECT_EQ(nonzero, 4);
  }
}

TEST(Encode, ExactCenterConcentratesTopWeight) {
  Codebook cb(5, 1.0);
  Tensor flow = constant_flow(4, 4, 0.4, -0.4, 0.0);
  atomflow::SparseAssign sa = atomflow::encode_sparse(flow, cb, 2, 4);
  const int expect = cb.index_of(3, 1, 2);
  for (int p = 0; p < 4; ++p) {
    EXPECT_EQ(sa.idx[static_cast<size_t>(p) * 4], expect);
    // Zero distance against eps-regularized neighbors: essentially all mass.
    EXPECT_GT(sa.wgt[static_cast<size_t>(p) * 4], 0.999);
  }
  auto hard = atomflow::hard_assign(flow, cb, 2);
  for (int p = 0; p < 4; ++p) EXPECT_EQ(hard[static_cast<size_t>(p)], expect);
}

TEST(Encode, ClipBeforeMeanMakesOutOfRangeEquivalent) {
  // A patch mixing a huge positive and an in-range value must encode exactly
  // like its pre-clipped counterpart, per-pixel, not clip-after-mean.
  Codebook cb(5, 1.0);
  Tensor raw({1, 2, 3});
  raw[0] = 50.0;   // x of pixel 0
  raw[3] = 0.0;    // x of pixel 1
  raw[1] = -7.0;   // y of pixel 0
  raw[4] = 0.2;    // y of pixel 1
  Tensor clipped = raw;
  for (size_t i = 0; i < clipped.numel(); ++i)
    clipped[i] = std::clamp(clipped[i], -1.0, 1.0);
  Tensor a = atomflow::encode(raw, cb, 1, 4);
  Tensor b = atomflow::encode(clipped, cb, 1, 4);
  EXPECT_TRUE(atomflow::bit_equal(a, b));
  // Patch of size 2 along W: clipped mean x = (1 + 0)/2 = 0.5, not
  // (50 + 0)/2 clipped to 1.
  atomflow::SparseAssign sa = atomflow::encode_sparse(raw, cb, 1, 1);
  EXPECT_EQ(sa.idx[0], atomflow::hard_assign(clipped, cb, 1)[0]);
}

TEST(Encode, TiesResolveTowardLowerIndex) {
  // Centers at {-2,-1,0,1,2} (exact in binary). v = (0.5,0,0) ties codewords
  // (0,0,0) and (1,0,0), then ties an 8-way ring one bin out.
  Codebook cb(5, 2.5);
  Tensor flow = constant_flow(1, 1, 0.5, 0.0, 0.0);
  atomflow::SparseAssign sa = atomflow::encode_sparse(flow, cb, 1, 4);
  EXPECT_EQ(sa.idx[0], 62);  // (2,2,2) before (3,2,2)=87
  EXPECT_EQ(sa.idx[1], 87);
  EXPECT_EQ(sa.idx[2], 57);  // lowest two of the equidistant ring
  EXPECT_EQ(sa.idx[3], 61);
  EXPECT_DOUBLE_EQ(sa.wgt[0], sa.wgt[1]);
  EXPECT_DOUBLE_EQ(sa.wgt[2], sa.wgt[3]);
  EXPECT_GT(sa.wgt[0], sa.wgt[2]);
  EXPECT_EQ(atomflow::hard_assign(flow, cb, 1)[0], 62);
}

TEST(Encode, WeightsMonotoneInDistance) {
  Codebook cb(5, 1.0);
  std::mt19937_64 rng(303);
  std::uniform_real_distribution<double> dist(-1.1, 1.1);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor flow = constant_flow(2, 2, dist(rng), dist(rng), dist(rng));
    atomflow::SparseAssign sa = atomflow::encode_sparse(flow, cb, 2, 6);
    for (int j = 1; j < 6; ++j) EXPECT_GE(sa.wgt[static_cast<size_t>(j - 1)], sa.wgt[static_cast<size_t>(j)]);
  }
}

TEST(Encode, ShapeAndArgumentErrors) {
  Codebook cb(3, 1.0);
  EXPECT_THROW(atomflow::encode(Tensor({4, 4, 2}), cb, 2, 2), std::runtime_error);
  EXPECT_THROW(atomflow::encode(Tensor({5, 4, 3}), cb, 2, 2), std::runtime_error);
  EXPECT_THROW(atomflow::encode(Tensor({4, 4, 3}), cb, 2, 0), std::runtime_error);
  EXPECT_THROW(atomflow::encode(Tensor({4, 4, 3}), cb, 2, 28), std::runtime_error);
  EXPECT_THROW(atomflow::encode(Tensor({4, 4, 3}), cb, 0, 2), std::runtime_error);
}

TEST(Decode, OneHotRecoversCodeword) {
  Codebook cb(5, 1.0);
  Tensor grid({1, 1, 125});
  grid[77] = 1.0;
  Tensor flow = atomflow::decode(grid, cb);
  const double* c = cb.codeword(77);
  EXPECT_EQ(flow[0], c[0]);
  EXPECT_EQ(flow[1], c[1]);
  EXPECT_EQ(flow[2], c[2]);
}

TEST(Decode, RoundTripErrorBounded) {
  // Soft round-trip stays within one bin width of the clipped input per axis;
  // hard assignment stays within half a bin width.
  Codebook cb(5, 1.0);
  const double bw = cb.bin_width();
  std::mt19937_64 rng(304);
  std::uniform_real_distribution<double> dist(-1.25, 1.25);
  for (int trial = 0; trial < 200; ++trial) {
    const double v[3] = {dist(rng), dist(rng), dist(rng)};
    Tensor flow = constant_flow(2, 2, v[0], v[1], v[2]);
    Tensor soft = atomflow::decode(atomflow::encode(flow, cb, 2, 4), cb);
    Tensor hard1 = atomflow::decode(atomflow::encode(flow, cb, 2, 1), cb);
    for (int a = 0; a < 3; ++a) {
      const double clipped = std::clamp(v[a], -1.0, 1.0);
      EXPECT_LE(std::abs(soft[static_cast<size_t>(a)] - clipped), bw + 1e-9)
          << "axis " << a << " v=" << v[a];
      EXPECT_LE(std::abs(hard1[static_cast<size_t>(a)] - clipped), bw / 2 + 1e-9);
    }
  }
}

TEST(PTilde, MatchesHandCount) {
  Codebook cb(5, 1.0);
  // Flow A: two patches at codewords (3,2,2)=87 and (1,2,2)=37.
  Tensor a({2, 4, 3});
  for (int j = 0; j < 2; ++j)
    for (int i = 0; i < 2; ++i) {
      a[a.idx3(i, j, 0)] = 0.4;
      a[a.idx3(i, j + 2, 0)] = -0.4;
    }
  // Flow B: one zero patch -> codeword 62.
  Tensor b({2, 2, 3});
  Tensor p = atomflow::estimate_p_tilde({&a, &b}, cb, 2);
  EXPECT_DOUBLE_EQ(p[87], 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(p[37], 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(p[62], 1.0 / 3.0);
  double sum = 0.0;
  for (size_t k = 0; k < p.numel(); ++k) sum += p[k];
  EXPECT_NEAR(sum, 1.0, 1e-12);
}

TEST(ClassWeights, TwoClassWorkedExample) {
  Tensor p({2}, {0.9, 0.1});
  Tensor w = atomflow::class_weights(p, 0.5);
  EXPECT_NEAR(w[0], 0.882353, 1e-6);
  EXPECT_NEAR(w[1], 2.058824, 1e-6);
}

TEST(ClassWeights, ExpectationUnderPTildeIsOne) {
  std::mt19937_64 rng(305);
  std::gamma_distribution<double> gamma(0.4, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor p({25});
    double sum = 0.0;
    for (size_t k = 0; k < 25; ++k) {
      p[k] = gamma(rng) + 1e-12;
      sum += p[k];
    }
    for (size_t k = 0; k < 25; ++k) p[k] /= sum;
    for (double lambda : {0.1, 0.5, 0.9}) {
      Tensor w = atomflow::class_weights(p, lambda);
      double e = 0.0;
      for (size_t k = 0; k < 25; ++k) {
        EXPECT_GT(w[k], 0.0);
        e += p[k] * w[k];
      }
      EXPECT_NEAR(e, 1.0, 1e-9);
    }
  }
}

TEST(ClassWeights, RareClassesWeightedUp) {
  Tensor p({3}, {0.8, 0.15, 0.05});
  Tensor w = atomflow::class_weights(p, 0.5);
  EXPECT_LT(w[0], w[1]);
  EXPECT_LT(w[1], w[2]);
}

TEST(ClassWeights, FullSmoothingIsUniform) {
  Tensor p({4}, {0.7, 0.1, 0.1, 0.1});
  Tensor w = atomflow::class_weights(p, 1.0);
  for (size_t k = 0; k < 4; ++k) EXPECT_NEAR(w[k], 1.0, 1e-12);
}

TEST(ClassWeights, ErrorCases) {
  Tensor zero_class({2}, {1.0, 0.0});
  EXPECT_THROW(atomflow::class_weights(zero_class, 0.0), std::runtime_error);
  EXPECT_NO_THROW(atomflow::class_weights(zero_class, 0.5));
  Tensor unnormalized({2}, {0.6, 0.6});
  EXPECT_THROW(atomflow::class_weights(unnormalized, 0.5), std::runtime_error);
  Tensor negative({2}, {1.2, -0.2});
  EXPECT_THROW(atomflow::class_weights(negative, 0.5), std::runtime_error);
  Tensor ok({2}, {0.5, 0.5});
  EXPECT_THROW(atomflow::class_weights(ok, -0.1), std::runtime_error);
  EXPECT_THROW(atomflow::class_weights(ok, 1.1), std::runtime_error);
}

TEST(Rmse, KnownValue) {
  Tensor a({1, 2, 3}, {0, 0, 0, 0, 0, 0});
  Tensor b({1, 2, 3}, {1, 1, 1, 1, 1, 1});
  EXPECT_DOUBLE_EQ(atomflow::flow_rmse(a, b), 1.0);
  Tensor c({1, 1, 3}, {3, 0, 0});
  Tensor d({1, 1, 3}, {0, 0, 0});
  EXPECT_NEAR(atomflow::flow_rmse(c, d), std::sqrt(3.0), 1e-12);
}

TEST(PatchMean, AveragesAndClips) {
  Tensor f({2, 2, 3});
  f[f.idx3(0, 0, 0)] = 10.0;  // clips to 1
  f[f.idx3(0, 1, 0)] = 0.0;
  f[f.idx3(1, 0, 0)] = 0.5;
  f[f.idx3(1, 1, 0)] = 0.5;
  Codebook cb(5, 1.0);
  Tensor m = atomflow::patch_mean_flow(f, cb, 2);
  EXPECT_DOUBLE_EQ(m[0], 0.5);
  EXPECT_DOUBLE_EQ(m[1], 0.0);
}

TEST(Confusion, MacroF1HandExample) {
  atomflow::Confusion c(3);
  // gt 0: predictions 0,0,1 ; gt 1: predictions 1,1,1 ; class 2 absent.
  c.add(0, 0);
  c.add(0, 0);
  c.add(0, 1);
  c.add(1, 1);
  c.add(1, 1);
  c.add(1, 1);
  // class0: tp=2, support=3, predicted=2 -> f1 = 4/5
  // class1: tp=3, support=3, predicted=4 -> f1 = 6/7
  EXPECT_NEAR(c.macro_f1(), 0.5 * (4.0 / 5.0 + 6.0 / 7.0), 1e-12);
  EXPECT_NEAR(c.mean_per_class_accuracy(), 0.5 * (2.0 / 3.0 + 1.0), 1e-12);
}

TEST(Confusion, NeverPredictedSupportedClassScoresZero) {
  atomflow::Confusion c(2);
  c.add(0, 0);
  c.add(1, 0);
  // class0: tp=1, support=1, predicted=2 -> 2/3; class1: tp=0 -> 0.
  EXPECT_NEAR(c.macro_f1(), 0.5 * (2.0 / 3.0), 1e-12);
}

TEST(Confusion, EmptyRejected) {
  atomflow::Confusion c(4);
  EXPECT_THROW(c.macro_f1(), std::runtime_error);
  EXPECT_THROW(c.add(4, 0), std::runtime_error);
}

}  // namespace
