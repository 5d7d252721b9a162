#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dinomaly/rng.hpp"
#include "dinomaly/tensor.hpp"

namespace dinomaly {

// Handle to one learnable tensor and its gradient buffer. The trainer and
// the checkpoint writer both walk these, so names are hierarchical and
// stable, e.g. "decoder.layer3.attn.w_q".
template <typename T>
struct ParamRef {
    std::string name;
    Tensor<T>* p;
    Tensor<T>* g;
};

template <typename T>
void zero_grads(std::vector<ParamRef<T>>& params) {
    for (auto& pr : params) pr.g->zero();
}

// y = x W^T + b over rows; x is [M, in], w is [out, in].
template <typename T>
struct Linear {
    Tensor<T> w, b, gw, gb;
    Tensor<T> x_cache;

    Linear() = default;
    Linear(std::int64_t in, std::int64_t out)
        : w({out, in}), b({out}), gw({out, in}), gb({out}) {}

    std::int64_t in_dim() const { return w.shape[1]; }
    std::int64_t out_dim() const { return w.shape[0]; }

    void init(Rng& rng) {
        fill_trunc_normal(w, rng, 0.02);
        b.zero();
    }

    void collect_params(const std::string& prefix, std::vector<ParamRef<T>>& out) {
        out.push_back({prefix + ".w", &w, &gw});
        out.push_back({prefix + ".b", &b, &gb});
    }

    Tensor<T> forward(const Tensor<T>& x, bool keep_cache = true) {
        const std::int64_t m = x.numel() / in_dim();
        Tensor<T> y({m, out_dim()});
        gemm_tb(x.ptr(), w.ptr(), y.ptr(), m, in_dim(), out_dim());
        T* yp = y.ptr();
        const T* bp = b.ptr();
        for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < out_dim(); ++j) yp[i * out_dim() + j] += bp[j];
        if (keep_cache) x_cache = x;
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        const std::int64_t m = dy.numel() / out_dim();
        gemm_ta(dy.ptr(), x_cache.ptr(), gw.ptr(), out_dim(), m, in_dim(), true);
        const T* dp = dy.ptr();
        T* gbp = gb.ptr();
        for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < out_dim(); ++j) gbp[j] += dp[i * out_dim() + j];
        Tensor<T> dx({m, in_dim()});
        gemm(dy.ptr(), w.ptr(), dx.ptr(), m, out_dim(), in_dim());
        return dx;
    }
};

// Row-wise layer norm with affine scale/shift.
template <typename T>
struct LayerNorm {
    static constexpr double kEps = 1e-6;
    Tensor<T> gamma, beta, ggamma, gbeta;
    Tensor<T> xhat_cache;
    std::vector<T> inv_std_cache;

    LayerNorm() = default;
    explicit LayerNorm(std::int64_t d) : gamma({d}), beta({d}), ggamma({d}), gbeta({d}) {
        gamma.fill(T(1));
    }

    std::int64_t dim() const { return gamma.shape[0]; }

    void collect_params(const std::string& prefix, std::vector<ParamRef<T>>& out) {
        out.push_back({prefix + ".gamma", &gamma, &ggamma});
        out.push_back({prefix + ".beta", &beta, &gbeta});
    }

    Tensor<T> forward(const Tensor<T>& x, bool keep_cache = true) {
        const std::int64_t d = dim(), m = x.numel() / d;
        Tensor<T> y = x;
        if (keep_cache) {
            xhat_cache = Tensor<T>({m, d});
            inv_std_cache.assign(static_cast<std::size_t>(m), T(0));
        }
        for (std::int64_t i = 0; i < m; ++i) {
            const T* xi = x.ptr() + i * d;
            T* yi = y.ptr() + i * d;
            double mu = 0;
            for (std::int64_t j = 0; j < d; ++j) mu += xi[j];
            mu /= d;
            double var = 0;
            for (std::int64_t j = 0; j < d; ++j) {
                const double c = xi[j] - mu;
                var += c * c;
            }
            var /= d;
            const double inv_std = 1.0 / std::sqrt(var + kEps);
            for (std::int64_t j = 0; j < d; ++j) {
                const T xh = static_cast<T>((xi[j] - mu) * inv_std);
                if (keep_cache) xhat_cache.at2(i, j) = xh;
                yi[j] = gamma[j] * xh + beta[j];
            }
            if (keep_cache) inv_std_cache[static_cast<std::size_t>(i)] = static_cast<T>(inv_std);
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        const std::int64_t d = dim(), m = dy.numel() / d;
        Tensor<T> dx({m, d});
        for (std::int64_t i = 0; i < m; ++i) {
            const T* dyi = dy.ptr() + i * d;
            const T* xh = xhat_cache.ptr() + i * d;
            double mean_dxh = 0, mean_dxh_xh = 0;
            for (std::int64_t j = 0; j < d; ++j) {
                const double dxh = static_cast<double>(dyi[j]) * gamma[j];
                mean_dxh += dxh;
                mean_dxh_xh += dxh * xh[j];
                ggamma[j] += dyi[j] * xh[j];
                gbeta[j] += dyi[j];
            }
            mean_dxh /= d;
            mean_dxh_xh /= d;
            const double inv_std = inv_std_cache[static_cast<std::size_t>(i)];
            for (std::int64_t j = 0; j < d; ++j) {
                const double dxh = static_cast<double>(dyi[j]) * gamma[j];
                dx.at2(i, j) = static_cast<T>(inv_std * (dxh - mean_dxh - xh[j] * mean_dxh_xh));
            }
        }
        return dx;
    }
};

// Exact-erf GELU.
template <typename T>
struct Gelu {
    Tensor<T> x_cache;

    static T value(T x) {
        return static_cast<T>(0.5 * static_cast<double>(x) *
                              (1.0 + std::erf(static_cast<double>(x) * 0.7071067811865476)));
    }
    static T slope(T x) {
        const double xd = static_cast<double>(x);
        const double cdf = 0.5 * (1.0 + std::erf(xd * 0.7071067811865476));
        const double pdf = std::exp(-0.5 * xd * xd) * 0.3989422804014327;
        return static_cast<T>(cdf + xd * pdf);
    }

    Tensor<T> forward(const Tensor<T>& x, bool keep_cache = true) {
        Tensor<T> y = x;
        for (auto& v : y.data) v = value(v);
        if (keep_cache) x_cache = x;
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        Tensor<T> dx = dy;
        for (std::size_t i = 0; i < dx.data.size(); ++i) dx.data[i] *= slope(x_cache.data[i]);
        return dx;
    }
};

// Inverted dropout: scaling happens at train time so eval is the identity.
template <typename T>
struct Dropout {
    double p = 0.0;
    Tensor<T> mask_cache;  // already divided by keep probability

    explicit Dropout(double rate = 0.0) : p(rate) {}

    Tensor<T> forward(const Tensor<T>& x, bool training, Rng* rng) {
        if (!training || p <= 0.0) {
            mask_cache = Tensor<T>();
            return x;
        }
        const T scale = static_cast<T>(1.0 / (1.0 - p));
        mask_cache = Tensor<T>(x.shape);
        Tensor<T> y = x;
        for (std::size_t i = 0; i < y.data.size(); ++i) {
            const T m = rng->bernoulli(1.0 - p) ? scale : T(0);
            mask_cache.data[i] = m;
            y.data[i] *= m;
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        if (mask_cache.numel() == 0) return dy;
        Tensor<T> dx = dy;
        for (std::size_t i = 0; i < dx.data.size(); ++i) dx.data[i] *= mask_cache.data[i];
        return dx;
    }
};

// fc1 -> GELU -> fc2, the transformer feed-forward.
template <typename T>
struct Mlp {
    Linear<T> fc1, fc2;
    Gelu<T> act;

    Mlp() = default;
    Mlp(std::int64_t d, std::int64_t hidden) : fc1(d, hidden), fc2(hidden, d) {}

    void init(Rng& rng) {
        fc1.init(rng);
        fc2.init(rng);
    }

    void collect_params(const std::string& prefix, std::vector<ParamRef<T>>& out) {
        fc1.collect_params(prefix + ".fc1", out);
        fc2.collect_params(prefix + ".fc2", out);
    }

    Tensor<T> forward(const Tensor<T>& x, bool keep_cache = true) {
        return fc2.forward(act.forward(fc1.forward(x, keep_cache), keep_cache), keep_cache);
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        return fc1.backward(act.backward(fc2.backward(dy)));
    }
};

}  // namespace dinomaly
