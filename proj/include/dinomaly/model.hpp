#pragma once

#include <string>
#include <utility>
#include <vector>

#include "dinomaly/attention.hpp"
#include "dinomaly/bottleneck.hpp"
#include "dinomaly/layers.hpp"
#include "dinomaly/tensor.hpp"

namespace dinomaly {

// Which encoder/decoder layer pairs the reconstruction loss supervises.
struct ConstraintScheme {
    enum class Kind { kDense, kSparse, kCatLayer, kGroup };
    Kind kind = Kind::kGroup;
    int every_k = 2;  // sparse
    int groups = 2;   // group

    static ConstraintScheme parse(const std::string& s) {
        ConstraintScheme c;
        if (s == "layer_to_layer_dense") {
            c.kind = Kind::kDense;
        } else if (s.rfind("layer_to_layer_sparse(", 0) == 0 && s.back() == ')') {
            c.kind = Kind::kSparse;
            c.every_k = std::stoi(s.substr(22, s.size() - 23));
            if (c.every_k != 2 && c.every_k != 4)
                throw ConfigError("sparse every_k must be 2 or 4");
        } else if (s == "layer_to_cat_layer") {
            c.kind = Kind::kCatLayer;
        } else if (s.rfind("group(", 0) == 0 && s.back() == ')') {
            c.kind = Kind::kGroup;
            c.groups = std::stoi(s.substr(6, s.size() - 7));
            if (c.groups < 1) throw ConfigError("group count must be >= 1");
        } else {
            throw ConfigError("unknown constraint scheme: " + s);
        }
        return c;
    }

    std::string to_string() const {
        switch (kind) {
            case Kind::kDense: return "layer_to_layer_dense";
            case Kind::kSparse: return "layer_to_layer_sparse(" + std::to_string(every_k) + ")";
            case Kind::kCatLayer: return "layer_to_cat_layer";
            case Kind::kGroup: return "group(" + std::to_string(groups) + ")";
        }
        return "?";
    }
};

// Sum of the selected encoder layers, the single grid fed to the bottleneck.
template <typename T>
TokenGrid<T> collect_and_fuse(const std::vector<TokenGrid<T>>& encoder_features,
                              const std::vector<int>& indices) {
    if (indices.empty()) throw ConfigError("collect_and_fuse: no indices");
    for (int idx : indices)
        if (idx < 0 || idx >= static_cast<int>(encoder_features.size()))
            throw ConfigError("collect_and_fuse: layer index " + std::to_string(idx) +
                              " out of range for " + std::to_string(encoder_features.size()) +
                              " layers");
    TokenGrid<T> fused = encoder_features[static_cast<std::size_t>(indices[0])];
    for (std::size_t i = 1; i < indices.size(); ++i) {
        const auto& layer = encoder_features[static_cast<std::size_t>(indices[i])];
        if (!layer.same_layout(fused))
            throw ConfigError("collect_and_fuse: layer shape mismatch");
        for (std::int64_t j = 0; j < fused.data.numel(); ++j) fused.data[j] += layer.data[j];
    }
    return fused;
}

// Pre-norm Transformer layer: x + attn(norm1(x)), then x + mlp(norm2(x)).
template <typename T>
struct TransformerLayer {
    LayerNorm<T> norm1, norm2;
    Attention<T> attn;
    Mlp<T> mlp;

    TransformerLayer() = default;
    TransformerLayer(std::int64_t d, int heads, AttentionKindSpec kind, double mlp_ratio = 4.0)
        : norm1(d),
          norm2(d),
          attn(d, heads, kind),
          mlp(d, Bottleneck<T>::hidden_dim(d, mlp_ratio)) {}

    void init(Rng& rng) {
        attn.init(rng);
        mlp.init(rng);
    }

    void collect_params(const std::string& prefix, std::vector<ParamRef<T>>& out) {
        norm1.collect_params(prefix + ".norm1", out);
        attn.collect_params(prefix + ".attn", out);
        norm2.collect_params(prefix + ".norm2", out);
        mlp.collect_params(prefix + ".mlp", out);
    }

    TokenGrid<T> forward(const TokenGrid<T>& x, bool keep_cache = true,
                         FlopCounter* fc = nullptr) {
        Tensor<T> n1 = norm1.forward(x.data, keep_cache);
        TokenGrid<T> a = attn.forward(TokenGrid<T>(std::move(n1), x.grid_h, x.grid_w),
                                      keep_cache, fc);
        TokenGrid<T> x1 = x;
        for (std::int64_t i = 0; i < x1.data.numel(); ++i) x1.data[i] += a.data[i];
        Tensor<T> n2 = norm2.forward(x1.data, keep_cache);
        Tensor<T> m = mlp.forward(n2, keep_cache);
        if (fc)
            fc->projection += static_cast<std::uint64_t>(4) * x.data.numel() * mlp.fc1.out_dim();
        TokenGrid<T> y = x1;
        for (std::int64_t i = 0; i < y.data.numel(); ++i) y.data[i] += m[i];
        return y;
    }

    TokenGrid<T> backward(const TokenGrid<T>& dy) {
        Tensor<T> dn2 = mlp.backward(dy.data);
        Tensor<T> dx1 = norm2.backward(dn2);
        for (std::int64_t i = 0; i < dx1.numel(); ++i) dx1[i] += dy.data[i];
        dx1.shape = dy.data.shape;
        TokenGrid<T> dx1g(std::move(dx1), dy.grid_h, dy.grid_w);
        TokenGrid<T> da = attn.backward(dx1g);
        Tensor<T> dx = norm1.backward(da.data);
        for (std::int64_t i = 0; i < dx.numel(); ++i) dx[i] += dx1g.data[i];
        dx.shape = dy.data.shape;
        return TokenGrid<T>(std::move(dx), dy.grid_h, dy.grid_w);
    }
};

// One supervised reconstruction pair: fused encoder target vs fused decoder
// output. Channel width can exceed d for the cat-layer scheme.
template <typename T>
struct FeaturePair {
    TokenGrid<T> enc;  // detached target
    TokenGrid<T> dec;
};

template <typename T>
std::vector<FeaturePair<T>> build_groups(const std::vector<TokenGrid<T>>& enc,
                                         const std::vector<TokenGrid<T>>& dec,
                                         const ConstraintScheme& scheme) {
    if (enc.size() != dec.size())
        throw ConfigError("build_groups: encoder/decoder layer count mismatch (" +
                          std::to_string(enc.size()) + " vs " + std::to_string(dec.size()) + ")");
    const int L = static_cast<int>(enc.size());
    auto sum_range = [](const std::vector<TokenGrid<T>>& xs, int lo, int hi) {
        TokenGrid<T> s = xs[static_cast<std::size_t>(lo)];
        for (int i = lo + 1; i < hi; ++i)
            for (std::int64_t j = 0; j < s.data.numel(); ++j)
                s.data[j] += xs[static_cast<std::size_t>(i)].data[j];
        return s;
    };
    std::vector<FeaturePair<T>> pairs;
    switch (scheme.kind) {
        case ConstraintScheme::Kind::kDense:
            for (int i = 0; i < L; ++i)
                pairs.push_back({enc[static_cast<std::size_t>(i)], dec[static_cast<std::size_t>(i)]});
            break;
        case ConstraintScheme::Kind::kSparse:
            for (int i = scheme.every_k - 1; i < L; i += scheme.every_k)
                pairs.push_back({enc[static_cast<std::size_t>(i)], dec[static_cast<std::size_t>(i)]});
            if (pairs.empty()) throw ConfigError("sparse scheme selected no pairs");
            break;
        case ConstraintScheme::Kind::kGroup: {
            if (L % scheme.groups != 0)
                throw ConfigError("group count " + std::to_string(scheme.groups) +
                                  " does not divide layer count " + std::to_string(L));
            const int span = L / scheme.groups;
            for (int g = 0; g < scheme.groups; ++g)
                pairs.push_back({sum_range(enc, g * span, (g + 1) * span),
                                 sum_range(dec, g * span, (g + 1) * span)});
            break;
        }
        case ConstraintScheme::Kind::kCatLayer: {
            // encoder channel concat vs the final decoder layer tiled to match
            const std::int64_t B = enc[0].batch(), N = enc[0].tokens(), d = enc[0].dim();
            TokenGrid<T> ecat(B, enc[0].grid_h, enc[0].grid_w, d * L);
            TokenGrid<T> dcat(B, enc[0].grid_h, enc[0].grid_w, d * L);
            const TokenGrid<T>& last = dec[static_cast<std::size_t>(L - 1)];
            for (std::int64_t t = 0; t < B * N; ++t)
                for (int l = 0; l < L; ++l)
                    for (std::int64_t c = 0; c < d; ++c) {
                        ecat.data[t * d * L + l * d + c] =
                            enc[static_cast<std::size_t>(l)].data[t * d + c];
                        dcat.data[t * d * L + l * d + c] = last.data[t * d + c];
                    }
            pairs.push_back({std::move(ecat), std::move(dcat)});
            break;
        }
    }
    return pairs;
}

// Scatter loss gradients on the grouped decoder features back to per-layer
// decoder output gradients.
template <typename T>
std::vector<TokenGrid<T>> build_groups_backward(const std::vector<TokenGrid<T>>& pair_grads,
                                                const ConstraintScheme& scheme, int L,
                                                const TokenGrid<T>& like) {
    std::vector<TokenGrid<T>> out(static_cast<std::size_t>(L),
                                  TokenGrid<T>(like.batch(), like.grid_h, like.grid_w, like.dim()));
    switch (scheme.kind) {
        case ConstraintScheme::Kind::kDense:
            for (int i = 0; i < L; ++i) out[static_cast<std::size_t>(i)] = pair_grads[static_cast<std::size_t>(i)];
            break;
        case ConstraintScheme::Kind::kSparse: {
            std::size_t p = 0;
            for (int i = scheme.every_k - 1; i < L; i += scheme.every_k)
                out[static_cast<std::size_t>(i)] = pair_grads[p++];
            break;
        }
        case ConstraintScheme::Kind::kGroup: {
            const int span = L / scheme.groups;
            for (int g = 0; g < scheme.groups; ++g)
                for (int i = g * span; i < (g + 1) * span; ++i)
                    out[static_cast<std::size_t>(i)].data = pair_grads[static_cast<std::size_t>(g)].data;
            break;
        }
        case ConstraintScheme::Kind::kCatLayer: {
            const std::int64_t B = like.batch(), N = like.tokens(), d = like.dim();
            const auto& g = pair_grads[0];
            TokenGrid<T>& lastg = out[static_cast<std::size_t>(L - 1)];
            for (std::int64_t t = 0; t < B * N; ++t)
                for (int l = 0; l < L; ++l)
                    for (std::int64_t c = 0; c < d; ++c)
                        lastg.data[t * d + c] += g.data[t * d * L + l * d + c];
            break;
        }
    }
    return out;
}

struct ModelConfig {
    std::int64_t d = 64;
    int num_heads = 1;
    int decoder_depth = 8;
    double mlp_ratio = 4.0;
    AttentionKindSpec attention;
    BottleneckConfig bottleneck;
    ConstraintScheme scheme;
    std::vector<int> collected_indices = {2, 3, 4, 5, 6, 7, 8, 9};
};

// Trainable part of the pipeline: bottleneck plus decoder stack. Encoder
// features arrive already collected (the encoder itself is frozen and lives
// behind the feature source interface).
template <typename T>
struct DinomalyModel {
    ModelConfig cfg;
    Bottleneck<T> bottleneck;
    std::vector<TransformerLayer<T>> decoder;
    bool training_mode = true;

    // forward caches
    std::vector<TokenGrid<T>> dec_outs_cache;
    TokenGrid<T> z_cache;

    DinomalyModel() = default;
    explicit DinomalyModel(ModelConfig c) : cfg(c), bottleneck(c.d, c.bottleneck) {
        if (c.decoder_depth < 1) throw ConfigError("decoder depth must be >= 1");
        decoder.reserve(static_cast<std::size_t>(c.decoder_depth));
        for (int i = 0; i < c.decoder_depth; ++i)
            decoder.emplace_back(c.d, c.num_heads, c.attention, c.mlp_ratio);
    }

    void init(Rng& rng) {
        bottleneck.init(rng);
        for (auto& layer : decoder) layer.init(rng);
    }

    std::vector<ParamRef<T>> params() {
        std::vector<ParamRef<T>> out;
        bottleneck.collect_params("bottleneck", out);
        for (std::size_t i = 0; i < decoder.size(); ++i)
            decoder[i].collect_params("decoder.layer" + std::to_string(i), out);
        return out;
    }

    // fused encoder grid -> bottleneck -> decoder stack; returns one output
    // per decoder layer, shallowest first.
    std::vector<TokenGrid<T>> decoder_forward(const TokenGrid<T>& fused, Rng* rng,
                                              bool keep_cache = true,
                                              FlopCounter* fc = nullptr) {
        TokenGrid<T> z = bottleneck.forward(fused, training_mode, rng, keep_cache);
        std::vector<TokenGrid<T>> outs;
        outs.reserve(decoder.size());
        TokenGrid<T> x = z;
        for (auto& layer : decoder) {
            x = layer.forward(x, keep_cache, fc);
            outs.push_back(x);
        }
        if (keep_cache) {
            z_cache = std::move(z);
            dec_outs_cache = outs;
        }
        return outs;
    }

    // per-decoder-layer output gradients -> parameter gradients. Returns the
    // gradient on the fused encoder grid (unused by training; encoder is
    // frozen) mainly for gradcheck.
    TokenGrid<T> decoder_backward(const std::vector<TokenGrid<T>>& dout) {
        if (dout.size() != decoder.size())
            throw ConfigError("decoder_backward: gradient count mismatch");
        TokenGrid<T> acc = dout.back();
        for (std::size_t i = decoder.size(); i-- > 0;) {
            TokenGrid<T> din = decoder[i].backward(acc);
            if (i == 0) {
                acc = std::move(din);
            } else {
                acc = dout[i - 1];
                for (std::int64_t j = 0; j < acc.data.numel(); ++j) acc.data[j] += din.data[j];
            }
        }
        return bottleneck.backward(acc);
    }
};

}  // namespace dinomaly
