#include <gtest/gtest.h>

#include <cmath>

#include "dinomaly/attention.hpp"
#include "gradcheck.hpp"

using namespace dinomaly;

namespace {

template <typename T>
TokenGrid<T> random_grid(std::int64_t b, int gh, int gw, std::int64_t d, std::uint64_t seed) {
    TokenGrid<T> x(b, gh, gw, d);
    Rng rng(seed);
    fill_normal(x.data, rng);
    return x;
}

Attention<float> make_attention(const std::string& kind, std::int64_t d, int heads,
                                std::uint64_t seed) {
    Attention<float> a(d, heads, AttentionKindSpec::parse(kind));
    Rng rng(seed);
    a.init(rng);
    return a;
}

}  // namespace

TEST(AttentionKindSpec, ParseRoundTrip) {
    EXPECT_EQ(AttentionKindSpec::parse("softmax").variant, AttentionVariant::kSoftmax);
    EXPECT_EQ(AttentionKindSpec::parse("linear").variant, AttentionVariant::kLinear);
    auto m = AttentionKindSpec::parse("softmax_neighbor_masked(5)");
    EXPECT_EQ(m.variant, AttentionVariant::kSoftmaxNeighborMasked);
    EXPECT_EQ(m.neighbor_n, 5);
    auto c = AttentionKindSpec::parse("conv_mixer(7)");
    EXPECT_EQ(c.conv_kernel, 7);
    EXPECT_EQ(c.to_string(), "conv_mixer(7)");
    EXPECT_THROW(AttentionKindSpec::parse("fancy"), ConfigError);
    EXPECT_THROW(AttentionKindSpec::parse("linear_neighbor_masked(2)"), ConfigError);
    EXPECT_THROW(AttentionKindSpec::parse("conv_mixer"), ConfigError);
}

TEST(NeighborMask, SizeOneMasksExactlyDiagonal) {
    const auto mask = build_neighbor_mask(3, 4, 1);
    const int n = 12;
    for (int q = 0; q < n; ++q)
        for (int k = 0; k < n; ++k) EXPECT_EQ(mask[q * n + k], q == k ? 1 : 0);
}

TEST(NeighborMask, FullMaskRowIsConfigError) {
    EXPECT_THROW(build_neighbor_mask(3, 3, 3), ConfigError);
}

TEST(NeighborMask, CornerQueryCount) {
    // 4x4 grid, n=3: the square around (0,0) intersects the grid in 2x2 keys
    const auto mask = build_neighbor_mask(4, 4, 3);
    int masked = 0;
    for (int k = 0; k < 16; ++k) masked += mask[0 * 16 + k];
    EXPECT_EQ(masked, 4);
}

TEST(SoftmaxAttention, SingleTokenIsValueProjection) {
    const std::int64_t d = 8;
    auto attn = make_attention("softmax", d, 2, 11);
    auto x = random_grid<float>(3, 1, 1, d, 21);
    auto y = attn.forward(x, false);
    // weight on the only token is exactly 1, so y = (x w_v) w_out
    Tensor<float> v({3, d}), want({3, d});
    gemm(x.data.ptr(), attn.w_v.ptr(), v.ptr(), 3, d, d);
    gemm(v.ptr(), attn.w_out.ptr(), want.ptr(), 3, d, d);
    for (std::int64_t i = 0; i < want.numel(); ++i) EXPECT_NEAR(y.data[i], want[i], 1e-6f);
}

TEST(SoftmaxAttention, IdenticalKeysGiveValueMean) {
    const std::int64_t d = 8, n = 6;
    auto attn = make_attention("softmax", d, 2, 13);
    attn.w_k.zero();  // all key rows identical -> uniform weights
    auto x = random_grid<float>(1, 2, 3, d, 22);
    auto y = attn.forward(x, false);
    Tensor<float> v({n, d});
    gemm(x.data.ptr(), attn.w_v.ptr(), v.ptr(), n, d, d);
    Tensor<float> mean({1, d});
    for (std::int64_t c = 0; c < d; ++c) {
        double s = 0;
        for (std::int64_t j = 0; j < n; ++j) s += v.at2(j, c);
        mean[c] = static_cast<float>(s / n);
    }
    Tensor<float> want({1, d});
    gemm(mean.ptr(), attn.w_out.ptr(), want.ptr(), 1, d, d);
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t c = 0; c < d; ++c) EXPECT_NEAR(y.data.at3(0, i, c), want[c], 1e-5f);
}

TEST(SoftmaxAttention, MatchesDenseOracle) {
    const std::int64_t d = 8, n = 4;
    auto attn = make_attention("softmax", d, 1, 17);
    auto x = random_grid<float>(1, 2, 2, d, 23);
    auto y = attn.forward(x, false);

    // independent dense evaluation in double
    auto xd = x.data.template cast<double>();
    auto wq = attn.w_q.template cast<double>();
    auto wk = attn.w_k.template cast<double>();
    auto wv = attn.w_v.template cast<double>();
    auto wo = attn.w_out.template cast<double>();
    Tensor<double> q({n, d}), k({n, d}), v({n, d});
    gemm(xd.ptr(), wq.ptr(), q.ptr(), n, d, d);
    gemm(xd.ptr(), wk.ptr(), k.ptr(), n, d, d);
    gemm(xd.ptr(), wv.ptr(), v.ptr(), n, d, d);
    Tensor<double> a({n, n});
    for (std::int64_t i = 0; i < n; ++i) {
        double mx = -1e300;
        for (std::int64_t j = 0; j < n; ++j) {
            double s = 0;
            for (std::int64_t c = 0; c < d; ++c) s += q.at2(i, c) * k.at2(j, c);
            a.at2(i, j) = s / std::sqrt(static_cast<double>(d));
            mx = std::max(mx, a.at2(i, j));
        }
        double sum = 0;
        for (std::int64_t j = 0; j < n; ++j) sum += (a.at2(i, j) = std::exp(a.at2(i, j) - mx));
        for (std::int64_t j = 0; j < n; ++j) a.at2(i, j) /= sum;
        double check = 0;
        for (std::int64_t j = 0; j < n; ++j) check += a.at2(i, j);
        EXPECT_NEAR(check, 1.0, 1e-12);
    }
    Tensor<double> o({n, d}), want({n, d});
    gemm(a.ptr(), v.ptr(), o.ptr(), n, n, d);
    gemm(o.ptr(), wo.ptr(), want.ptr(), n, d, d);
    for (std::int64_t i = 0; i < n * d; ++i) EXPECT_NEAR(y.data[i], want[i], 1e-6);
}

TEST(SoftmaxAttention, RowsSumToOne) {
    const std::int64_t d = 16;
    auto attn = make_attention("softmax", d, 4, 19);
    auto x = random_grid<float>(2, 4, 4, d, 29);
    for (const auto& row : attn.explicit_weight_rows(x)) {
        double s = 0;
        for (double w : row) s += w;
        EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(LinearAttention, SingleTokenIsValueProjection) {
    const std::int64_t d = 8;
    auto attn = make_attention("linear", d, 2, 31);
    auto x = random_grid<float>(2, 1, 1, d, 37);
    auto y = attn.forward(x, false);
    Tensor<float> v({2, d}), want({2, d});
    gemm(x.data.ptr(), attn.w_v.ptr(), v.ptr(), 2, d, d);
    gemm(v.ptr(), attn.w_out.ptr(), want.ptr(), 2, d, d);
    for (std::int64_t i = 0; i < want.numel(); ++i) EXPECT_NEAR(y.data[i], want[i], 1e-5f);
}

TEST(LinearAttention, AssociationOrderEquivalence) {
    const std::int64_t d = 16, n = 64;
    auto kind = AttentionKindSpec::parse("linear");
    kind.normalize = false;
    Attention<float> attn(d, 1, kind);
    Rng rng(41);
    attn.init(rng);
    auto x = random_grid<float>(1, 8, 8, d, 43);
    auto y = attn.forward(x, false);

    // left-associated oracle: (phi(Q) phi(K)^T) V
    Tensor<float> q({n, d}), k({n, d}), v({n, d});
    gemm(x.data.ptr(), attn.w_q.ptr(), q.ptr(), n, d, d);
    gemm(x.data.ptr(), attn.w_k.ptr(), k.ptr(), n, d, d);
    gemm(x.data.ptr(), attn.w_v.ptr(), v.ptr(), n, d, d);
    for (auto& t : q.data) t = t > 0 ? t + 1 : std::exp(t);
    for (auto& t : k.data) t = t > 0 ? t + 1 : std::exp(t);
    Tensor<float> w({n, n}), o({n, d}), want({n, d});
    gemm_tb(q.ptr(), k.ptr(), w.ptr(), n, d, n);
    gemm(w.ptr(), v.ptr(), o.ptr(), n, n, d);
    gemm(o.ptr(), attn.w_out.ptr(), want.ptr(), n, d, d);
    for (std::int64_t i = 0; i < n * d; ++i) EXPECT_NEAR(y.data[i], want[i], 1e-5f)
        << "at " << i;
}

TEST(LinearAttention, IdenticalKeysGiveValueMean) {
    const std::int64_t d = 8, n = 9;
    auto attn = make_attention("linear", d, 1, 47);
    attn.w_k.zero();  // phi(0) = 1 for every key entry
    auto x = random_grid<float>(1, 3, 3, d, 53);
    auto y = attn.forward(x, false);
    Tensor<float> v({n, d});
    gemm(x.data.ptr(), attn.w_v.ptr(), v.ptr(), n, d, d);
    Tensor<float> mean({1, d});
    for (std::int64_t c = 0; c < d; ++c) {
        double s = 0;
        for (std::int64_t j = 0; j < n; ++j) s += v.at2(j, c);
        mean[c] = static_cast<float>(s / n);
    }
    Tensor<float> want({1, d});
    gemm(mean.ptr(), attn.w_out.ptr(), want.ptr(), 1, d, d);
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t c = 0; c < d; ++c) EXPECT_NEAR(y.data.at3(0, i, c), want[c], 1e-5f);
}

TEST(LinearAttention, ImplicitWeightsNonnegativeSumToOne) {
    const std::int64_t d = 16;
    auto attn = make_attention("linear", d, 2, 59);
    auto x = random_grid<float>(2, 4, 4, d, 61);
    for (const auto& row : attn.explicit_weight_rows(x)) {
        double s = 0;
        for (double w : row) {
            EXPECT_GE(w, 0.0);
            s += w;
        }
        EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(Attention, FlopScaling) {
    const std::int64_t d = 16;
    auto count_core = [&](const std::string& kind, int gh, int gw) {
        auto attn = make_attention(kind, d, 2, 67);
        auto x = random_grid<float>(1, gh, gw, d, 71);
        FlopCounter fc;
        attn.forward(x, false, &fc);
        return fc.core;
    };
    const auto s1 = count_core("softmax", 4, 4), s2 = count_core("softmax", 4, 8);
    const auto l1 = count_core("linear", 4, 4), l2 = count_core("linear", 4, 8);
    // doubling N: quadratic core for softmax, linear core for linear attention
    EXPECT_GE(static_cast<double>(s2) / s1, 3.5);
    EXPECT_LE(static_cast<double>(l2) / l1, 2.5);
}

TEST(Attention, InputErrors) {
    const std::int64_t d = 8;
    auto attn = make_attention("softmax", d, 1, 73);
    auto bad = random_grid<float>(1, 2, 2, d, 79);
    bad.data[3] = std::numeric_limits<float>::quiet_NaN();
    EXPECT_THROW(attn.forward(bad, false), InputError);
    auto wrong = random_grid<float>(1, 2, 2, d * 2, 83);
    EXPECT_THROW(attn.forward(wrong, false), ConfigError);
    EXPECT_THROW(Attention<float>(8, 3, AttentionKindSpec::parse("softmax")), ConfigError);
}

// ---- gradient checks (double precision, full finite differences) ----

namespace {

double attention_gradcheck(const std::string& kind, std::int64_t d, int heads, int gh, int gw,
                           std::uint64_t seed) {
    Attention<double> attn(d, heads, AttentionKindSpec::parse(kind));
    Rng rng(seed);
    attn.init(rng);
    TokenGrid<double> x(2, gh, gw, d);
    fill_normal(x.data, rng);
    auto c = gradcheck::make_loss_weights({2, static_cast<std::int64_t>(gh) * gw, d}, rng);

    auto loss = [&]() { return gradcheck::weighted_sum(attn.forward(x, false).data, c); };

    attn.forward(x, true);
    TokenGrid<double> dy(Tensor<double>(c), gh, gw);
    auto dx = attn.backward(dy);

    double worst = gradcheck::check_tensor(x.data, dx.data, loss);
    std::vector<ParamRef<double>> params;
    attn.collect_params("attn", params);
    for (auto& pr : params) pr.g->zero();
    attn.forward(x, true);
    attn.backward(dy);
    for (auto& pr : params) worst = std::max(worst, gradcheck::check_tensor(*pr.p, *pr.g, loss));
    return worst;
}

}  // namespace

TEST(AttentionGrad, Softmax) {
    EXPECT_LT(attention_gradcheck("softmax", 8, 2, 2, 2, 101), 1e-5);
}

TEST(AttentionGrad, LinearNormalized) {
    EXPECT_LT(attention_gradcheck("linear", 8, 2, 2, 2, 103), 1e-5);
}

TEST(AttentionGrad, LinearUnnormalized) {
    AttentionKindSpec kind = AttentionKindSpec::parse("linear");
    kind.normalize = false;
    Attention<double> attn(8, 2, kind);
    Rng rng(107);
    attn.init(rng);
    TokenGrid<double> x(1, 2, 2, 8);
    fill_normal(x.data, rng);
    auto c = gradcheck::make_loss_weights({1, 4, 8}, rng);
    auto loss = [&]() { return gradcheck::weighted_sum(attn.forward(x, false).data, c); };
    attn.forward(x, true);
    auto dx = attn.backward(TokenGrid<double>(Tensor<double>(c), 2, 2));
    EXPECT_LT(gradcheck::check_tensor(x.data, dx.data, loss), 1e-5);
}

TEST(AttentionGrad, SoftmaxNeighborMasked) {
    EXPECT_LT(attention_gradcheck("softmax_neighbor_masked(3)", 8, 2, 4, 4, 109), 1e-5);
}

TEST(AttentionGrad, LinearNeighborMasked) {
    EXPECT_LT(attention_gradcheck("linear_neighbor_masked(3)", 8, 2, 4, 4, 113), 1e-5);
}

TEST(AttentionGrad, ConvMixer) {
    EXPECT_LT(attention_gradcheck("conv_mixer(3)", 6, 1, 4, 4, 127), 1e-5);
}
