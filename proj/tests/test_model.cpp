#include <gtest/gtest.h>

#include <cmath>

#include "dinomaly/model.hpp"
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

ModelConfig tiny_config(std::int64_t d = 8, int depth = 2) {
    ModelConfig c;
    c.d = d;
    c.num_heads = 2;
    c.decoder_depth = depth;
    c.mlp_ratio = 2.0;
    c.attention = AttentionKindSpec::parse("linear");
    c.bottleneck = BottleneckConfig::parse_noise("none", 2.0);
    c.scheme = ConstraintScheme::parse("group(1)");
    return c;
}

}  // namespace

TEST(BottleneckConfig, ParseNoise) {
    auto d = BottleneckConfig::parse_noise("dropout(0.2)");
    EXPECT_EQ(d.noise_kind, NoiseKind::kDropout);
    EXPECT_DOUBLE_EQ(d.p, 0.2);
    EXPECT_DOUBLE_EQ(d.hidden_ratio, 4.0);
    auto j = BottleneckConfig::parse_noise("feature_jitter(20)");
    EXPECT_EQ(j.noise_kind, NoiseKind::kFeatureJitter);
    EXPECT_DOUBLE_EQ(j.scale, 20.0);
    auto m = BottleneckConfig::parse_noise("patch_masking(0.3)");
    EXPECT_EQ(m.noise_kind, NoiseKind::kPatchMasking);
    EXPECT_EQ(BottleneckConfig::parse_noise("none").noise_kind, NoiseKind::kNone);
    EXPECT_THROW(BottleneckConfig::parse_noise("dropout(1.0)"), ConfigError);
    EXPECT_THROW(BottleneckConfig::parse_noise("blur(1)"), ConfigError);
    EXPECT_EQ(d.noise_string(), "dropout(0.2)");
}

TEST(Bottleneck, EvalModeMatchesNoiselessForward) {
    const std::int64_t d = 8;
    for (const char* noise : {"dropout(0.5)", "feature_jitter(20)", "patch_masking(0.4)"}) {
        Bottleneck<float> noisy(d, BottleneckConfig::parse_noise(noise, 2.0));
        Rng rng(11);
        noisy.init(rng);
        Bottleneck<float> clean(d, BottleneckConfig::parse_noise("none", 2.0));
        clean.fc1.w = noisy.fc1.w;
        clean.fc1.b = noisy.fc1.b;
        clean.fc2.w = noisy.fc2.w;
        clean.fc2.b = noisy.fc2.b;
        auto x = random_grid<float>(2, 2, 2, d, 13);
        Rng noise_rng(17);
        auto y = noisy.forward(x, false, &noise_rng, false);
        auto want = clean.forward(x, false, nullptr, false);
        for (std::int64_t i = 0; i < y.data.numel(); ++i)
            EXPECT_EQ(y.data[i], want.data[i]) << noise;
    }
}

TEST(Bottleneck, ZeroRateDropoutIsNoiseless) {
    const std::int64_t d = 8;
    Bottleneck<float> b(d, BottleneckConfig::parse_noise("dropout(0.0)", 2.0));
    Rng rng(19);
    b.init(rng);
    auto x = random_grid<float>(2, 2, 2, d, 23);
    Rng r1(29);
    auto y_train = b.forward(x, true, &r1, false);
    auto y_eval = b.forward(x, false, nullptr, false);
    for (std::int64_t i = 0; i < y_train.data.numel(); ++i)
        EXPECT_EQ(y_train.data[i], y_eval.data[i]);
}

TEST(Bottleneck, DropoutMonteCarloExpectation) {
    // ~1e5 hidden activations per pass: 16 tokens x 32 hidden x repeats
    const std::int64_t d = 16;
    Bottleneck<float> b(d, BottleneckConfig::parse_noise("dropout(0.2)", 2.0));
    Rng rng(31);
    b.init(rng);
    auto x = random_grid<float>(4, 2, 2, d, 37);
    auto clean = b.forward(x, false, nullptr, false);

    Rng noise_rng(41);
    const int repeats = 4000;
    Tensor<double> mean({clean.data.numel()});
    std::int64_t kept = 0, total = 0;
    for (int r = 0; r < repeats; ++r) {
        auto y = b.forward(x, true, &noise_rng, false);
        for (std::int64_t i = 0; i < y.data.numel(); ++i) mean[i] += y.data[i];
        for (auto v : b.drop_hidden.mask_cache.data) {
            kept += (v != 0.0f);
            ++total;
        }
    }
    const double kept_fraction = static_cast<double>(kept) / total;
    EXPECT_NEAR(kept_fraction, 0.8, 0.01);

    // inverted scaling keeps expectations: mean deviation within 2% of the
    // output scale
    double rms = 0, dev = 0;
    for (std::int64_t i = 0; i < clean.data.numel(); ++i) {
        rms += static_cast<double>(clean.data[i]) * clean.data[i];
        dev += std::abs(mean[i] / repeats - clean.data[i]);
    }
    rms = std::sqrt(rms / clean.data.numel());
    dev /= clean.data.numel();
    EXPECT_LT(dev, 0.02 * rms);
}

TEST(Bottleneck, FeatureJitterMatchesManualInjection) {
    const std::int64_t d = 8, b = 2, n = 4;
    Bottleneck<float> noisy(d, BottleneckConfig::parse_noise("feature_jitter(10)", 2.0));
    Rng rng(43);
    noisy.init(rng);
    auto x = random_grid<float>(b, 2, 2, d, 47);

    Rng r1(53);
    auto y = noisy.forward(x, true, &r1, false);

    // oracle: draw the same noise stream, apply sigma = scale * mean||t|| / d
    double norm_sum = 0;
    for (std::int64_t t = 0; t < b * n; ++t) {
        double sq = 0;
        for (std::int64_t c = 0; c < d; ++c) sq += static_cast<double>(x.data[t * d + c]) * x.data[t * d + c];
        norm_sum += std::sqrt(sq);
    }
    const double sigma = 10.0 * (norm_sum / (b * n)) / d;
    Rng r2(53);
    TokenGrid<float> xj = x;
    for (auto& v : xj.data.data) v += static_cast<float>(r2.normal(0.0, sigma));
    auto want = noisy.forward(xj, false, nullptr, false);
    for (std::int64_t i = 0; i < y.data.numel(); ++i) EXPECT_FLOAT_EQ(y.data[i], want.data[i]);
}

TEST(Bottleneck, PatchMaskingZeroesWholeTokens) {
    const std::int64_t d = 8;
    Bottleneck<float> b(d, BottleneckConfig::parse_noise("patch_masking(0.3)", 2.0));
    Rng rng(59);
    b.init(rng);
    TokenGrid<float> x(50, 4, 4, d);
    Rng xr(61);
    fill_normal(x.data, xr);
    Rng nr(67);
    auto y = b.forward(x, true, &nr, false);
    ASSERT_EQ(b.token_mask_cache.size(), 800u);
    // masked tokens all map to the same output: MLP of the zero vector
    TokenGrid<float> zero_tok(1, 1, 1, d);
    auto zero_out = b.forward(zero_tok, false, nullptr, false);
    std::int64_t masked = 0;
    for (std::int64_t t = 0; t < 800; ++t) {
        if (!b.token_mask_cache[static_cast<std::size_t>(t)]) continue;
        ++masked;
        for (std::int64_t c = 0; c < d; ++c)
            EXPECT_FLOAT_EQ(y.data[t * d + c], zero_out.data[c]);
    }
    EXPECT_NEAR(static_cast<double>(masked) / 800.0, 0.3, 0.05);
}

TEST(BottleneckGrad, FiniteDifference) {
    const std::int64_t d = 6;
    Bottleneck<double> b(d, BottleneckConfig::parse_noise("none", 3.0));
    Rng rng(71);
    b.init(rng);
    TokenGrid<double> x(1, 2, 2, d);
    fill_normal(x.data, rng);
    auto c = gradcheck::make_loss_weights({1, 4, d}, rng);
    auto loss = [&]() {
        return gradcheck::weighted_sum(b.forward(x, false, nullptr, false).data, c);
    };
    b.forward(x, false, nullptr, true);
    auto dx = b.backward(TokenGrid<double>(Tensor<double>(c), 2, 2));
    EXPECT_LT(gradcheck::check_tensor(x.data, dx.data, loss), 1e-6);
    std::vector<ParamRef<double>> params;
    b.collect_params("bottleneck", params);
    for (auto& pr : params) EXPECT_LT(gradcheck::check_tensor(*pr.p, *pr.g, loss), 1e-6);
}

TEST(CollectAndFuse, IdentityAndAdditivity) {
    auto g = random_grid<float>(1, 2, 2, 4, 73);
    std::vector<TokenGrid<float>> layers = {g, g, g};
    auto one = collect_and_fuse(layers, {1});
    for (std::int64_t i = 0; i < g.data.numel(); ++i) EXPECT_EQ(one.data[i], g.data[i]);
    auto two = collect_and_fuse(layers, {0, 2});
    for (std::int64_t i = 0; i < g.data.numel(); ++i) EXPECT_FLOAT_EQ(two.data[i], 2 * g.data[i]);
    EXPECT_THROW(collect_and_fuse(layers, {3}), ConfigError);
    EXPECT_THROW(collect_and_fuse(layers, std::vector<int>{}), ConfigError);
}

TEST(CollectAndFuse, MiddleEightManualOracle) {
    std::vector<TokenGrid<float>> layers;
    for (int l = 0; l < 12; ++l) layers.push_back(random_grid<float>(2, 2, 2, 4, 79 + l));
    const std::vector<int> idx = {2, 3, 4, 5, 6, 7, 8, 9};
    auto fused = collect_and_fuse(layers, idx);
    for (std::int64_t i = 0; i < fused.data.numel(); ++i) {
        double want = 0;
        for (int l = 2; l <= 9; ++l) want += layers[static_cast<std::size_t>(l)].data[i];
        EXPECT_NEAR(fused.data[i], want, 1e-5);
    }
}

TEST(ConstraintScheme, Parse) {
    EXPECT_EQ(ConstraintScheme::parse("layer_to_layer_dense").kind,
              ConstraintScheme::Kind::kDense);
    auto sp = ConstraintScheme::parse("layer_to_layer_sparse(4)");
    EXPECT_EQ(sp.kind, ConstraintScheme::Kind::kSparse);
    EXPECT_EQ(sp.every_k, 4);
    EXPECT_THROW(ConstraintScheme::parse("layer_to_layer_sparse(3)"), ConfigError);
    auto gr = ConstraintScheme::parse("group(2)");
    EXPECT_EQ(gr.kind, ConstraintScheme::Kind::kGroup);
    EXPECT_EQ(gr.groups, 2);
    EXPECT_EQ(gr.to_string(), "group(2)");
    EXPECT_EQ(ConstraintScheme::parse("layer_to_cat_layer").kind,
              ConstraintScheme::Kind::kCatLayer);
    EXPECT_THROW(ConstraintScheme::parse("group(x"), std::exception);
}

TEST(BuildGroups, GroupOneIsFullSum) {
    auto g = random_grid<float>(1, 2, 2, 4, 83);
    auto h = random_grid<float>(1, 2, 2, 4, 89);
    std::vector<TokenGrid<float>> enc(8, g), dec(8, h);
    auto pairs = build_groups(enc, dec, ConstraintScheme::parse("group(1)"));
    ASSERT_EQ(pairs.size(), 1u);
    for (std::int64_t i = 0; i < g.data.numel(); ++i) {
        EXPECT_FLOAT_EQ(pairs[0].enc.data[i], 8 * g.data[i]);
        EXPECT_FLOAT_EQ(pairs[0].dec.data[i], 8 * h.data[i]);
    }
}

TEST(BuildGroups, GroupTwoSplitsFourFour) {
    std::vector<TokenGrid<float>> enc, dec;
    for (int l = 0; l < 8; ++l) {
        TokenGrid<float> e(1, 1, 1, 2), d(1, 1, 1, 2);
        e.data.fill(static_cast<float>(1 << l));
        d.data.fill(static_cast<float>(l));
        enc.push_back(e);
        dec.push_back(d);
    }
    auto pairs = build_groups(enc, dec, ConstraintScheme::parse("group(2)"));
    ASSERT_EQ(pairs.size(), 2u);
    EXPECT_FLOAT_EQ(pairs[0].enc.data[0], 1 + 2 + 4 + 8);          // layers 0..3
    EXPECT_FLOAT_EQ(pairs[1].enc.data[0], 16 + 32 + 64 + 128);     // layers 4..7
    EXPECT_FLOAT_EQ(pairs[0].dec.data[0], 0 + 1 + 2 + 3);
    EXPECT_FLOAT_EQ(pairs[1].dec.data[0], 4 + 5 + 6 + 7);
    EXPECT_THROW(build_groups(enc, dec, ConstraintScheme::parse("group(3)")), ConfigError);
}

TEST(BuildGroups, DenseZipsAndSparseSkips) {
    std::vector<TokenGrid<float>> enc, dec;
    for (int l = 0; l < 8; ++l) {
        TokenGrid<float> e(1, 1, 1, 1), d(1, 1, 1, 1);
        e.data[0] = static_cast<float>(l);
        d.data[0] = static_cast<float>(10 + l);
        enc.push_back(e);
        dec.push_back(d);
    }
    auto dense = build_groups(enc, dec, ConstraintScheme::parse("layer_to_layer_dense"));
    ASSERT_EQ(dense.size(), 8u);
    for (int l = 0; l < 8; ++l) {
        EXPECT_EQ(dense[static_cast<std::size_t>(l)].enc.data[0], l);
        EXPECT_EQ(dense[static_cast<std::size_t>(l)].dec.data[0], 10 + l);
    }
    auto sparse = build_groups(enc, dec, ConstraintScheme::parse("layer_to_layer_sparse(2)"));
    ASSERT_EQ(sparse.size(), 4u);
    EXPECT_EQ(sparse[0].enc.data[0], 1);
    EXPECT_EQ(sparse[3].enc.data[0], 7);
    auto sparse4 = build_groups(enc, dec, ConstraintScheme::parse("layer_to_layer_sparse(4)"));
    ASSERT_EQ(sparse4.size(), 2u);
    EXPECT_EQ(sparse4[0].enc.data[0], 3);
    EXPECT_EQ(sparse4[1].enc.data[0], 7);
}

TEST(BuildGroups, CatLayerConcatenatesChannels) {
    std::vector<TokenGrid<float>> enc, dec;
    for (int l = 0; l < 4; ++l) {
        auto e = random_grid<float>(1, 1, 2, 3, 97 + l);
        auto d = random_grid<float>(1, 1, 2, 3, 103 + l);
        enc.push_back(e);
        dec.push_back(d);
    }
    auto pairs = build_groups(enc, dec, ConstraintScheme::parse("layer_to_cat_layer"));
    ASSERT_EQ(pairs.size(), 1u);
    EXPECT_EQ(pairs[0].enc.dim(), 12);
    for (std::int64_t t = 0; t < 2; ++t)
        for (int l = 0; l < 4; ++l)
            for (std::int64_t c = 0; c < 3; ++c) {
                EXPECT_EQ(pairs[0].enc.data[t * 12 + l * 3 + c],
                          enc[static_cast<std::size_t>(l)].data[t * 3 + c]);
                EXPECT_EQ(pairs[0].dec.data[t * 12 + l * 3 + c], dec[3].data[t * 3 + c]);
            }
}

TEST(Decoder, ZeroSublayerOutputsArePureResidual) {
    auto cfg = tiny_config(8, 3);
    DinomalyModel<float> model(cfg);
    Rng rng(101);
    model.init(rng);
    for (auto& layer : model.decoder) {
        layer.attn.w_out.zero();
        layer.mlp.fc2.w.zero();
        layer.mlp.fc2.b.zero();
    }
    model.training_mode = false;
    auto fused = random_grid<float>(2, 2, 2, 8, 107);
    auto outs = model.decoder_forward(fused, nullptr, false);
    ASSERT_EQ(outs.size(), 3u);
    auto z = model.bottleneck.forward(fused, false, nullptr, false);
    for (const auto& o : outs)
        for (std::int64_t i = 0; i < z.data.numel(); ++i) EXPECT_EQ(o.data[i], z.data[i]);
}

TEST(Decoder, SingleLayerZeroWeightsReturnsBottleneckOutput) {
    auto cfg = tiny_config(8, 1);
    DinomalyModel<float> model(cfg);
    Rng rng(109);
    model.init(rng);
    model.decoder[0].attn.w_out.zero();
    model.decoder[0].mlp.fc2.w.zero();
    model.decoder[0].mlp.fc2.b.zero();
    model.training_mode = false;
    auto fused = random_grid<float>(1, 2, 2, 8, 113);
    auto outs = model.decoder_forward(fused, nullptr, false);
    ASSERT_EQ(outs.size(), 1u);
    auto z = model.bottleneck.forward(fused, false, nullptr, false);
    for (std::int64_t i = 0; i < z.data.numel(); ++i) EXPECT_EQ(outs[0].data[i], z.data[i]);
}

TEST(Decoder, LayerOutputsDependOnlyOnEarlierLayers) {
    auto cfg = tiny_config(8, 4);
    DinomalyModel<float> model(cfg);
    Rng rng(127);
    model.init(rng);
    model.training_mode = false;
    auto fused = random_grid<float>(1, 2, 2, 8, 131);
    auto base = model.decoder_forward(fused, nullptr, false);
    const int j = 2;  // perturb layer 2; outputs 0 and 1 must not move
    model.decoder[j].attn.w_q[0] += 0.5f;
    model.decoder[j].mlp.fc1.w[0] -= 0.25f;
    auto probed = model.decoder_forward(fused, nullptr, false);
    for (int i = 0; i < j; ++i)
        for (std::int64_t t = 0; t < base[static_cast<std::size_t>(i)].data.numel(); ++t)
            EXPECT_EQ(base[static_cast<std::size_t>(i)].data[t],
                      probed[static_cast<std::size_t>(i)].data[t]);
    bool later_changed = false;
    for (std::int64_t t = 0; t < base[3].data.numel(); ++t)
        later_changed |= base[3].data[t] != probed[3].data[t];
    EXPECT_TRUE(later_changed);
}

TEST(Model, EvalForwardIsDeterministic) {
    auto cfg = tiny_config(8, 2);
    cfg.bottleneck = BottleneckConfig::parse_noise("dropout(0.2)", 2.0);
    DinomalyModel<float> model(cfg);
    Rng rng(137);
    model.init(rng);
    model.training_mode = false;
    auto fused = random_grid<float>(2, 2, 2, 8, 139);
    auto a = model.decoder_forward(fused, nullptr, false);
    auto b = model.decoder_forward(fused, nullptr, false);
    for (std::size_t l = 0; l < a.size(); ++l)
        for (std::int64_t i = 0; i < a[l].data.numel(); ++i)
            EXPECT_EQ(a[l].data[i], b[l].data[i]);
}

TEST(Model, ParamNamesAreHierarchical) {
    auto cfg = tiny_config(8, 4);
    DinomalyModel<float> model(cfg);
    auto params = model.params();
    bool saw_bottleneck = false, saw_layer3 = false;
    for (const auto& pr : params) {
        if (pr.name == "bottleneck.fc1.w") saw_bottleneck = true;
        if (pr.name == "decoder.layer3.attn.w_q") saw_layer3 = true;
    }
    EXPECT_TRUE(saw_bottleneck);
    EXPECT_TRUE(saw_layer3);
}

TEST(ModelGrad, FullStackFiniteDifference) {
    ModelConfig cfg;
    cfg.d = 6;
    cfg.num_heads = 2;
    cfg.decoder_depth = 2;
    cfg.mlp_ratio = 2.0;
    cfg.attention = AttentionKindSpec::parse("linear");
    cfg.bottleneck = BottleneckConfig::parse_noise("none", 2.0);
    DinomalyModel<double> model(cfg);
    Rng rng(149);
    model.init(rng);
    model.training_mode = false;
    TokenGrid<double> fused(1, 2, 2, 6);
    fill_normal(fused.data, rng);

    std::vector<Tensor<double>> weights;
    for (int l = 0; l < 2; ++l) weights.push_back(gradcheck::make_loss_weights({1, 4, 6}, rng));
    auto loss = [&]() {
        auto outs = model.decoder_forward(fused, nullptr, false);
        double s = 0;
        for (std::size_t l = 0; l < outs.size(); ++l)
            s += gradcheck::weighted_sum(outs[l].data, weights[l]);
        return s;
    };

    model.decoder_forward(fused, nullptr, true);
    std::vector<TokenGrid<double>> douts;
    for (int l = 0; l < 2; ++l) douts.emplace_back(Tensor<double>(weights[static_cast<std::size_t>(l)]), 2, 2);
    auto dfused = model.decoder_backward(douts);

    EXPECT_LT(gradcheck::check_tensor(fused.data, dfused.data, loss, 3e-6), 1e-5);
    auto params = model.params();
    zero_grads(params);
    model.decoder_forward(fused, nullptr, true);
    model.decoder_backward(douts);
    for (auto& pr : params)
        EXPECT_LT(gradcheck::check_tensor(*pr.p, *pr.g, loss, 3e-6), 1e-5) << pr.name;
}
