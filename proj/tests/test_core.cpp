#include <gtest/gtest.h>

#include "dinomaly/rng.hpp"
#include "dinomaly/tensor.hpp"

using namespace dinomaly;

TEST(Rng, DeterministicAcrossInstances) {
    Rng a(1234), b(1234);
    for (int i = 0; i < 1000; ++i) {
        EXPECT_EQ(a.next_u64(), b.next_u64());
    }
    Rng c(1234), d(1234);
    for (int i = 0; i < 1000; ++i) {
        EXPECT_DOUBLE_EQ(c.uniform(), d.uniform());
        EXPECT_DOUBLE_EQ(c.normal(), d.normal());
    }
}

TEST(Rng, DerivedStreamsDiffer) {
    const std::uint64_t root = 7;
    Rng a(derive_seed(root, "noise"));
    Rng b(derive_seed(root, "sampler"));
    int same = 0;
    for (int i = 0; i < 64; ++i) same += (a.next_u64() == b.next_u64());
    EXPECT_LT(same, 4);
    EXPECT_NE(derive_seed(root, "x", 0), derive_seed(root, "x", 1));
}

TEST(Rng, UniformInUnitInterval) {
    Rng r(99);
    for (int i = 0; i < 10000; ++i) {
        double u = r.uniform();
        EXPECT_GE(u, 0.0);
        EXPECT_LT(u, 1.0);
    }
}

TEST(Rng, NormalMomentsRoughlyStandard) {
    Rng r(5);
    const int n = 200000;
    double sum = 0, sq = 0;
    for (int i = 0; i < n; ++i) {
        double x = r.normal();
        sum += x;
        sq += x * x;
    }
    EXPECT_NEAR(sum / n, 0.0, 0.02);
    EXPECT_NEAR(sq / n, 1.0, 0.02);
}

TEST(Tensor, ShapeAndIndexing) {
    Tensor<float> t({2, 3, 4});
    EXPECT_EQ(t.numel(), 24);
    t.at3(1, 2, 3) = 7.5f;
    EXPECT_FLOAT_EQ(t.data[23], 7.5f);
    EXPECT_EQ(t.shape_str(), "[2x3x4]");
    auto d = t.cast<double>();
    EXPECT_DOUBLE_EQ(d.data[23], 7.5);
}

TEST(Tensor, FiniteCheck) {
    Tensor<float> t({4});
    EXPECT_TRUE(t.all_finite());
    t[2] = std::numeric_limits<float>::quiet_NaN();
    EXPECT_FALSE(t.all_finite());
    EXPECT_THROW(require_finite(t, "probe"), InputError);
}

TEST(Gemm, MatchesNaive) {
    Rng r(42);
    const int m = 5, k = 7, n = 3;
    Tensor<float> a({m, k}), b({k, n}), c({m, n}), ref({m, n});
    fill_normal(a, r);
    fill_normal(b, r);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            float s = 0;
            for (int p = 0; p < k; ++p) s += a.at2(i, p) * b.at2(p, j);
            ref.at2(i, j) = s;
        }
    std::uint64_t flops = 0;
    gemm(a.ptr(), b.ptr(), c.ptr(), m, k, n, false, &flops);
    EXPECT_EQ(flops, static_cast<std::uint64_t>(2) * m * k * n);
    for (int i = 0; i < m * n; ++i) EXPECT_NEAR(c[i], ref[i], 1e-5f);

    // transpose variants against the same reference
    Tensor<float> at({k, m}), bt({n, k});
    for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) at.at2(p, i) = a.at2(i, p);
    for (int j = 0; j < n; ++j)
        for (int p = 0; p < k; ++p) bt.at2(j, p) = b.at2(p, j);
    Tensor<float> c2({m, n}), c3({m, n});
    gemm_ta(at.ptr(), b.ptr(), c2.ptr(), m, k, n);
    gemm_tb(a.ptr(), bt.ptr(), c3.ptr(), m, k, n);
    for (int i = 0; i < m * n; ++i) {
        EXPECT_NEAR(c2[i], ref[i], 1e-5f);
        EXPECT_NEAR(c3[i], ref[i], 1e-5f);
    }
    // accumulate doubles the result
    gemm(a.ptr(), b.ptr(), c.ptr(), m, k, n, true);
    for (int i = 0; i < m * n; ++i) EXPECT_NEAR(c[i], 2 * ref[i], 1e-5f);
}

TEST(TokenGrid, LayoutInvariant) {
    TokenGrid<float> g(2, 4, 4, 8);
    EXPECT_EQ(g.tokens(), 16);
    EXPECT_EQ(g.dim(), 8);
    Tensor<float> bad({2, 15, 8});
    EXPECT_THROW(TokenGrid<float>(std::move(bad), 4, 4), ConfigError);
}
