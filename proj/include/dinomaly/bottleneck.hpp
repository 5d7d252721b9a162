#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dinomaly/layers.hpp"
#include "dinomaly/tensor.hpp"

namespace dinomaly {

enum class NoiseKind { kDropout, kFeatureJitter, kPatchMasking, kNone };

// Noise selector for the bottleneck, e.g. "dropout(0.2)", "feature_jitter(20)",
// "patch_masking(0.3)", "none".
struct BottleneckConfig {
    NoiseKind noise_kind = NoiseKind::kDropout;
    double p = 0.2;        // dropout / patch_masking rate
    double scale = 20.0;   // feature_jitter magnitude
    double hidden_ratio = 4.0;

    static BottleneckConfig parse_noise(const std::string& s, double hidden_ratio = 4.0) {
        BottleneckConfig c;
        c.hidden_ratio = hidden_ratio;
        if (hidden_ratio <= 0) throw ConfigError("hidden_ratio must be positive");
        auto arg_of = [&]() -> double {
            const auto lp = s.find('(');
            if (lp == std::string::npos || s.back() != ')')
                throw ConfigError("noise kind needs an argument: " + s);
            try {
                return std::stod(s.substr(lp + 1, s.size() - lp - 2));
            } catch (...) {
                throw ConfigError("bad noise argument: " + s);
            }
        };
        const std::string head = s.substr(0, s.find('('));
        if (s == "none") {
            c.noise_kind = NoiseKind::kNone;
        } else if (head == "dropout") {
            c.noise_kind = NoiseKind::kDropout;
            c.p = arg_of();
        } else if (head == "feature_jitter") {
            c.noise_kind = NoiseKind::kFeatureJitter;
            c.scale = arg_of();
        } else if (head == "patch_masking") {
            c.noise_kind = NoiseKind::kPatchMasking;
            c.p = arg_of();
        } else {
            throw ConfigError("unknown noise kind: " + s);
        }
        if (c.noise_kind == NoiseKind::kDropout || c.noise_kind == NoiseKind::kPatchMasking) {
            if (c.p < 0.0 || c.p >= 1.0) throw ConfigError("noise rate must satisfy 0 <= p < 1");
        }
        if (c.noise_kind == NoiseKind::kFeatureJitter && c.scale < 0.0)
            throw ConfigError("jitter scale must be >= 0");
        return c;
    }

    std::string noise_string() const {
        switch (noise_kind) {
            case NoiseKind::kDropout: return "dropout(" + trim_num(p) + ")";
            case NoiseKind::kFeatureJitter: return "feature_jitter(" + trim_num(scale) + ")";
            case NoiseKind::kPatchMasking: return "patch_masking(" + trim_num(p) + ")";
            case NoiseKind::kNone: return "none";
        }
        return "?";
    }

private:
    static std::string trim_num(double v) {
        std::string s = std::to_string(v);
        while (s.size() > 1 && s.back() == '0') s.pop_back();
        if (!s.empty() && s.back() == '.') s.pop_back();
        return s;
    }
};

// MLP bottleneck with train-time activation noise. Dropout sits after the
// GELU and after the second linear (inverted scaling keeps expectations);
// feature jitter perturbs the input tokens; patch masking zeroes whole
// tokens before the MLP. Eval mode bypasses every noise path.
template <typename T>
struct Bottleneck {
    BottleneckConfig cfg;
    Linear<T> fc1, fc2;
    Gelu<T> act;
    Dropout<T> drop_hidden, drop_out;
    std::vector<std::uint8_t> token_mask_cache;  // patch masking, per token

    Bottleneck() = default;
    Bottleneck(std::int64_t d, BottleneckConfig c)
        : cfg(c),
          fc1(d, hidden_dim(d, c.hidden_ratio)),
          fc2(hidden_dim(d, c.hidden_ratio), d),
          drop_hidden(c.noise_kind == NoiseKind::kDropout ? c.p : 0.0),
          drop_out(c.noise_kind == NoiseKind::kDropout ? c.p : 0.0) {}

    static std::int64_t hidden_dim(std::int64_t d, double ratio) {
        const auto h = static_cast<std::int64_t>(std::llround(static_cast<double>(d) * ratio));
        if (h <= 0) throw ConfigError("bottleneck hidden dim must be positive");
        return h;
    }

    void init(Rng& rng) {
        fc1.init(rng);
        fc2.init(rng);
    }

    void collect_params(const std::string& prefix, std::vector<ParamRef<T>>& out) {
        fc1.collect_params(prefix + ".fc1", out);
        fc2.collect_params(prefix + ".fc2", out);
    }

    TokenGrid<T> forward(const TokenGrid<T>& x, bool training, Rng* rng,
                         bool keep_cache = true) {
        require_finite(x.data, "bottleneck input");
        const std::int64_t B = x.batch(), N = x.tokens(), d = x.dim();
        if (training && cfg.noise_kind != NoiseKind::kNone && rng == nullptr)
            throw ConfigError("bottleneck noise requires an rng in training mode");
        Tensor<T> in = x.data;
        token_mask_cache.clear();
        if (training && cfg.noise_kind == NoiseKind::kFeatureJitter && cfg.scale > 0.0) {
            // sigma = scale * (mean token L2 norm) / d
            double norm_sum = 0;
            for (std::int64_t t = 0; t < B * N; ++t) {
                double sq = 0;
                for (std::int64_t c = 0; c < d; ++c) {
                    const double v = in[t * d + c];
                    sq += v * v;
                }
                norm_sum += std::sqrt(sq);
            }
            const double sigma = cfg.scale * (norm_sum / static_cast<double>(B * N)) /
                                 static_cast<double>(d);
            for (auto& v : in.data) v += static_cast<T>(rng->normal(0.0, sigma));
        }
        if (training && cfg.noise_kind == NoiseKind::kPatchMasking && cfg.p > 0.0) {
            token_mask_cache.assign(static_cast<std::size_t>(B * N), 0);
            for (std::int64_t t = 0; t < B * N; ++t) {
                if (rng->bernoulli(cfg.p)) {
                    token_mask_cache[static_cast<std::size_t>(t)] = 1;
                    for (std::int64_t c = 0; c < d; ++c) in[t * d + c] = T(0);
                }
            }
        }
        Tensor<T> h = act.forward(fc1.forward(in, keep_cache), keep_cache);
        h = drop_hidden.forward(h, training, rng);
        Tensor<T> y = fc2.forward(h, keep_cache);
        y = drop_out.forward(y, training, rng);
        y.shape = {B, N, d};
        return TokenGrid<T>(std::move(y), x.grid_h, x.grid_w);
    }

    TokenGrid<T> backward(const TokenGrid<T>& dy) {
        const std::int64_t B = dy.batch(), N = dy.tokens(), d = dy.dim();
        Tensor<T> g = drop_out.backward(dy.data);
        g = fc2.backward(g);
        g = drop_hidden.backward(g);
        g = act.backward(g);
        Tensor<T> dx = fc1.backward(g);
        if (!token_mask_cache.empty()) {
            for (std::int64_t t = 0; t < B * N; ++t)
                if (token_mask_cache[static_cast<std::size_t>(t)])
                    for (std::int64_t c = 0; c < d; ++c) dx[t * d + c] = T(0);
        }
        // feature jitter is additive, gradient passes through unchanged
        dx.shape = {B, N, d};
        return TokenGrid<T>(std::move(dx), dy.grid_h, dy.grid_w);
    }
};

}  // namespace dinomaly
