#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dinomaly/layers.hpp"
#include "dinomaly/tensor.hpp"

namespace dinomaly {

enum class AttentionVariant {
    kSoftmax,
    kLinear,
    kSoftmaxNeighborMasked,
    kLinearNeighborMasked,
    kConvMixer,
};

// Parsed attention selector, e.g. "linear", "softmax_neighbor_masked(3)",
// "conv_mixer(5)". Linear variants carry the normalize flag.
struct AttentionKindSpec {
    AttentionVariant variant = AttentionVariant::kLinear;
    bool normalize = true;
    int neighbor_n = 3;
    int conv_kernel = 3;

    bool is_linear_family() const {
        return variant == AttentionVariant::kLinear ||
               variant == AttentionVariant::kLinearNeighborMasked;
    }
    bool is_masked() const {
        return variant == AttentionVariant::kSoftmaxNeighborMasked ||
               variant == AttentionVariant::kLinearNeighborMasked;
    }

    static AttentionKindSpec parse(const std::string& s) {
        AttentionKindSpec k;
        auto arg_of = [&](const std::string& head) -> int {
            const auto lp = s.find('(');
            if (lp == std::string::npos || s.back() != ')')
                throw ConfigError("attention kind '" + head + "' needs an (n) argument: " + s);
            const std::string inner = s.substr(lp + 1, s.size() - lp - 2);
            try {
                return std::stoi(inner);
            } catch (...) {
                throw ConfigError("bad attention argument: " + s);
            }
        };
        const std::string head = s.substr(0, s.find('('));
        if (head == "softmax" && s == "softmax") {
            k.variant = AttentionVariant::kSoftmax;
        } else if (head == "linear" && s == "linear") {
            k.variant = AttentionVariant::kLinear;
        } else if (head == "softmax_neighbor_masked") {
            k.variant = AttentionVariant::kSoftmaxNeighborMasked;
            k.neighbor_n = arg_of(head);
        } else if (head == "linear_neighbor_masked") {
            k.variant = AttentionVariant::kLinearNeighborMasked;
            k.neighbor_n = arg_of(head);
        } else if (head == "conv_mixer") {
            k.variant = AttentionVariant::kConvMixer;
            k.conv_kernel = arg_of(head);
        } else {
            throw ConfigError("unknown attention kind: " + s);
        }
        if (k.is_masked() && (k.neighbor_n < 1 || k.neighbor_n % 2 == 0))
            throw ConfigError("neighbor mask size must be odd and >= 1");
        if (k.variant == AttentionVariant::kConvMixer &&
            (k.conv_kernel < 1 || k.conv_kernel % 2 == 0))
            throw ConfigError("conv_mixer kernel must be odd and >= 1");
        return k;
    }

    std::string to_string() const {
        switch (variant) {
            case AttentionVariant::kSoftmax: return "softmax";
            case AttentionVariant::kLinear: return "linear";
            case AttentionVariant::kSoftmaxNeighborMasked:
                return "softmax_neighbor_masked(" + std::to_string(neighbor_n) + ")";
            case AttentionVariant::kLinearNeighborMasked:
                return "linear_neighbor_masked(" + std::to_string(neighbor_n) + ")";
            case AttentionVariant::kConvMixer:
                return "conv_mixer(" + std::to_string(conv_kernel) + ")";
        }
        return "?";
    }
};

// N x N byte mask, 1 = key is inside the n x n square centered at the query
// and therefore excluded. Throws if any query would see no keys at all.
inline std::vector<std::uint8_t> build_neighbor_mask(int grid_h, int grid_w, int n) {
    if (n < 1 || n % 2 == 0) throw ConfigError("neighbor mask size must be odd and >= 1");
    if (n >= 2 * std::max(grid_h, grid_w) - 1)
        throw ConfigError("neighbor mask of size " + std::to_string(n) +
                          " masks every key on a " + std::to_string(grid_h) + "x" +
                          std::to_string(grid_w) + " grid");
    const std::int64_t N = static_cast<std::int64_t>(grid_h) * grid_w;
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(N) * N, 0);
    const int half = n / 2;
    for (int qr = 0; qr < grid_h; ++qr)
        for (int qc = 0; qc < grid_w; ++qc) {
            const std::int64_t q = static_cast<std::int64_t>(qr) * grid_w + qc;
            std::int64_t visible = 0;
            for (int kr = 0; kr < grid_h; ++kr)
                for (int kc = 0; kc < grid_w; ++kc) {
                    const std::int64_t kk = static_cast<std::int64_t>(kr) * grid_w + kc;
                    const bool inside = std::abs(kr - qr) <= half && std::abs(kc - qc) <= half;
                    mask[static_cast<std::size_t>(q * N + kk)] = inside ? 1 : 0;
                    visible += inside ? 0 : 1;
                }
            if (visible == 0)
                throw ConfigError("neighbor mask leaves query " + std::to_string(q) +
                                  " with no visible keys");
        }
    return mask;
}

namespace detail {

template <typename T>
inline T phi_elu1(T x) {
    return x > T(0) ? x + T(1) : static_cast<T>(std::exp(static_cast<double>(x)));
}
template <typename T>
inline T phi_elu1_slope(T x) {
    return x > T(0) ? T(1) : static_cast<T>(std::exp(static_cast<double>(x)));
}

// Copy head column block [h0, h0+dh) of src [N, d] into dst [N, dh].
template <typename T>
inline void take_cols(const T* src, T* dst, std::int64_t n, std::int64_t d, std::int64_t h0,
                      std::int64_t dh) {
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < dh; ++j) dst[i * dh + j] = src[i * d + h0 + j];
}
template <typename T>
inline void put_cols_add(const T* src, T* dst, std::int64_t n, std::int64_t d, std::int64_t h0,
                         std::int64_t dh) {
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < dh; ++j) dst[i * d + h0 + j] += src[i * dh + j];
}

}  // namespace detail

// Token-mixing sublayer. Transformer kinds project with plain d x d
// matrices (Q = X Wq etc., no bias) and mix per image; conv_mixer swaps the
// whole thing for an inverted-bottleneck conv block on the 2-D grid.
template <typename T>
struct Attention {
    AttentionKindSpec kind;
    std::int64_t d = 0;
    int num_heads = 1;

    // transformer-kind parameters
    Tensor<T> w_q, w_k, w_v, w_out;
    Tensor<T> gw_q, gw_k, gw_v, gw_out;

    // conv_mixer parameters (expansion factor 2)
    static constexpr std::int64_t kConvExpand = 2;
    Linear<T> pw1, pw2;
    Tensor<T> dw_w, dw_b, gdw_w, gdw_b;  // depthwise [C, k, k], [C]
    Gelu<T> conv_act;
    Tensor<T> dw_in_cache;

    // forward caches (transformer kinds)
    struct HeadCache {
        Tensor<T> q, k, v;      // pre-feature-map projections [N, dh]
        Tensor<T> a;            // softmax probs or masked linear weights [N, N]
        Tensor<T> p, r, kv;     // linear path: phi(Q), phi(K), phi(K)^T V
        std::vector<T> ksum;    // [dh]
        std::vector<T> den;     // [N]
        std::vector<std::uint8_t> den_clamped;
        Tensor<T> u;            // numerator rows (linear path) [N, dh]
    };
    Tensor<T> x_cache, concat_cache;
    std::vector<HeadCache> head_cache;  // B * num_heads entries
    std::vector<std::uint8_t> mask_cache;
    int mask_gh = -1, mask_gw = -1;

    Attention() = default;
    Attention(std::int64_t dim, int heads, AttentionKindSpec k) : kind(k), d(dim), num_heads(heads) {
        if (kind.variant == AttentionVariant::kConvMixer) {
            pw1 = Linear<T>(d, kConvExpand * d);
            pw2 = Linear<T>(kConvExpand * d, d);
            const std::int64_t c = kConvExpand * d;
            const int ks = kind.conv_kernel;
            dw_w = Tensor<T>({c, ks, ks});
            dw_b = Tensor<T>({c});
            gdw_w = Tensor<T>({c, ks, ks});
            gdw_b = Tensor<T>({c});
        } else {
            if (heads <= 0 || d % heads != 0)
                throw ConfigError("num_heads must divide d (" + std::to_string(heads) + " vs " +
                                  std::to_string(d) + ")");
            w_q = Tensor<T>({d, d});
            w_k = Tensor<T>({d, d});
            w_v = Tensor<T>({d, d});
            w_out = Tensor<T>({d, d});
            gw_q = Tensor<T>({d, d});
            gw_k = Tensor<T>({d, d});
            gw_v = Tensor<T>({d, d});
            gw_out = Tensor<T>({d, d});
        }
    }

    void init(Rng& rng) {
        if (kind.variant == AttentionVariant::kConvMixer) {
            pw1.init(rng);
            pw2.init(rng);
            fill_trunc_normal(dw_w, rng, 0.02);
            dw_b.zero();
        } else {
            fill_trunc_normal(w_q, rng, 0.02);
            fill_trunc_normal(w_k, rng, 0.02);
            fill_trunc_normal(w_v, rng, 0.02);
            fill_trunc_normal(w_out, rng, 0.02);
        }
    }

    void collect_params(const std::string& prefix, std::vector<ParamRef<T>>& out) {
        if (kind.variant == AttentionVariant::kConvMixer) {
            pw1.collect_params(prefix + ".pw1", out);
            out.push_back({prefix + ".dw.w", &dw_w, &gdw_w});
            out.push_back({prefix + ".dw.b", &dw_b, &gdw_b});
            pw2.collect_params(prefix + ".pw2", out);
        } else {
            out.push_back({prefix + ".w_q", &w_q, &gw_q});
            out.push_back({prefix + ".w_k", &w_k, &gw_k});
            out.push_back({prefix + ".w_v", &w_v, &gw_v});
            out.push_back({prefix + ".w_out", &w_out, &gw_out});
        }
    }

    TokenGrid<T> forward(const TokenGrid<T>& x, bool keep_cache = true,
                         FlopCounter* fc = nullptr) {
        if (x.dim() != d)
            throw ConfigError("attention dim mismatch: input d=" + std::to_string(x.dim()) +
                              ", params d=" + std::to_string(d));
        require_finite(x.data, "attention input");
        if (kind.variant == AttentionVariant::kConvMixer) return conv_forward(x, keep_cache, fc);

        const std::int64_t B = x.batch(), N = x.tokens(), dh = d / num_heads;
        const std::uint8_t* mask = nullptr;
        if (kind.is_masked()) {
            if (mask_gh != x.grid_h || mask_gw != x.grid_w) {
                mask_cache = build_neighbor_mask(x.grid_h, x.grid_w, kind.neighbor_n);
                mask_gh = x.grid_h;
                mask_gw = x.grid_w;
            }
            mask = mask_cache.data();
        }

        Tensor<T> q({B * N, d}), k({B * N, d}), v({B * N, d});
        gemm(x.data.ptr(), w_q.ptr(), q.ptr(), B * N, d, d, false, fc ? &fc->projection : nullptr);
        gemm(x.data.ptr(), w_k.ptr(), k.ptr(), B * N, d, d, false, fc ? &fc->projection : nullptr);
        gemm(x.data.ptr(), w_v.ptr(), v.ptr(), B * N, d, d, false, fc ? &fc->projection : nullptr);

        Tensor<T> concat({B * N, d});
        if (keep_cache) head_cache.assign(static_cast<std::size_t>(B) * num_heads, HeadCache{});

        for (std::int64_t b = 0; b < B; ++b) {
            for (int h = 0; h < num_heads; ++h) {
                HeadCache tmp;
                HeadCache& hc =
                    keep_cache ? head_cache[static_cast<std::size_t>(b) * num_heads + h] : tmp;
                hc.q = Tensor<T>({N, dh});
                hc.k = Tensor<T>({N, dh});
                hc.v = Tensor<T>({N, dh});
                detail::take_cols(q.ptr() + b * N * d, hc.q.ptr(), N, d, h * dh, dh);
                detail::take_cols(k.ptr() + b * N * d, hc.k.ptr(), N, d, h * dh, dh);
                detail::take_cols(v.ptr() + b * N * d, hc.v.ptr(), N, d, h * dh, dh);
                Tensor<T> out_h = kind.is_linear_family()
                                      ? linear_head(hc, N, dh, mask, fc)
                                      : softmax_head(hc, N, dh, mask, fc);
                detail::put_cols_add(out_h.ptr(), concat.ptr() + b * N * d, N, d, h * dh, dh);
            }
        }

        TokenGrid<T> y(Tensor<T>({B, N, d}), x.grid_h, x.grid_w);
        gemm(concat.ptr(), w_out.ptr(), y.data.ptr(), B * N, d, d, false,
             fc ? &fc->projection : nullptr);
        if (keep_cache) {
            x_cache = x.data;
            concat_cache = std::move(concat);
        }
        return y;
    }

    TokenGrid<T> backward(const TokenGrid<T>& dy) {
        if (kind.variant == AttentionVariant::kConvMixer) return conv_backward(dy);
        const std::int64_t B = dy.batch(), N = dy.tokens(), dh = d / num_heads;
        const std::uint8_t* mask = kind.is_masked() ? mask_cache.data() : nullptr;

        // y = concat * w_out
        Tensor<T> dconcat({B * N, d});
        gemm_tb(dy.data.ptr(), w_out.ptr(), dconcat.ptr(), B * N, d, d);
        gemm_ta(concat_cache.ptr(), dy.data.ptr(), gw_out.ptr(), d, B * N, d, true);

        Tensor<T> dq({B * N, d}), dk({B * N, d}), dv({B * N, d});
        dq.zero();
        dk.zero();
        dv.zero();
        for (std::int64_t b = 0; b < B; ++b) {
            for (int h = 0; h < num_heads; ++h) {
                HeadCache& hc = head_cache[static_cast<std::size_t>(b) * num_heads + h];
                Tensor<T> dout_h({N, dh});
                detail::take_cols(dconcat.ptr() + b * N * d, dout_h.ptr(), N, d, h * dh, dh);
                Tensor<T> dq_h({N, dh}), dk_h({N, dh}), dv_h({N, dh});
                if (kind.is_linear_family())
                    linear_head_backward(hc, dout_h, N, dh, mask, dq_h, dk_h, dv_h);
                else
                    softmax_head_backward(hc, dout_h, N, dh, dq_h, dk_h, dv_h);
                detail::put_cols_add(dq_h.ptr(), dq.ptr() + b * N * d, N, d, h * dh, dh);
                detail::put_cols_add(dk_h.ptr(), dk.ptr() + b * N * d, N, d, h * dh, dh);
                detail::put_cols_add(dv_h.ptr(), dv.ptr() + b * N * d, N, d, h * dh, dh);
            }
        }

        // q = x*w_q etc.
        gemm_ta(x_cache.ptr(), dq.ptr(), gw_q.ptr(), d, B * N, d, true);
        gemm_ta(x_cache.ptr(), dk.ptr(), gw_k.ptr(), d, B * N, d, true);
        gemm_ta(x_cache.ptr(), dv.ptr(), gw_v.ptr(), d, B * N, d, true);
        TokenGrid<T> dx(Tensor<T>({B, N, d}), dy.grid_h, dy.grid_w);
        gemm_tb(dq.ptr(), w_q.ptr(), dx.data.ptr(), B * N, d, d);
        gemm_tb(dk.ptr(), w_k.ptr(), dx.data.ptr(), B * N, d, d, true);
        gemm_tb(dv.ptr(), w_v.ptr(), dx.data.ptr(), B * N, d, d, true);
        return dx;
    }

    // Explicit per-row mixing weights for diagnostics (entropy probes).
    // Returns B*num_heads*N rows, each of length N; rows are normalized to
    // sum to 1. Not defined for conv_mixer.
    std::vector<std::vector<double>> explicit_weight_rows(const TokenGrid<T>& x) {
        if (kind.variant == AttentionVariant::kConvMixer)
            throw ConfigError("conv_mixer has no attention weights");
        const std::int64_t B = x.batch(), N = x.tokens(), dh = d / num_heads;
        const std::uint8_t* mask = nullptr;
        std::vector<std::uint8_t> local_mask;
        if (kind.is_masked()) {
            local_mask = build_neighbor_mask(x.grid_h, x.grid_w, kind.neighbor_n);
            mask = local_mask.data();
        }
        Tensor<T> q({B * N, d}), k({B * N, d});
        gemm(x.data.ptr(), w_q.ptr(), q.ptr(), B * N, d, d);
        gemm(x.data.ptr(), w_k.ptr(), k.ptr(), B * N, d, d);
        std::vector<std::vector<double>> rows;
        rows.reserve(static_cast<std::size_t>(B) * num_heads * N);
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
        for (std::int64_t b = 0; b < B; ++b)
            for (int h = 0; h < num_heads; ++h) {
                Tensor<T> qh({N, dh}), kh({N, dh});
                detail::take_cols(q.ptr() + b * N * d, qh.ptr(), N, d, h * dh, dh);
                detail::take_cols(k.ptr() + b * N * d, kh.ptr(), N, d, h * dh, dh);
                for (std::int64_t i = 0; i < N; ++i) {
                    std::vector<double> w(static_cast<std::size_t>(N), 0.0);
                    if (kind.is_linear_family()) {
                        for (std::int64_t j = 0; j < N; ++j) {
                            if (mask && mask[i * N + j]) continue;
                            double dot = 0;
                            for (std::int64_t c = 0; c < dh; ++c)
                                dot += static_cast<double>(detail::phi_elu1(qh.at2(i, c))) *
                                       detail::phi_elu1(kh.at2(j, c));
                            w[static_cast<std::size_t>(j)] = dot;
                        }
                    } else {
                        double mx = -1e300;
                        std::vector<double> s(static_cast<std::size_t>(N), -1e300);
                        for (std::int64_t j = 0; j < N; ++j) {
                            if (mask && mask[i * N + j]) continue;
                            double dot = 0;
                            for (std::int64_t c = 0; c < dh; ++c)
                                dot += static_cast<double>(qh.at2(i, c)) * kh.at2(j, c);
                            s[static_cast<std::size_t>(j)] = dot * scale;
                            mx = std::max(mx, s[static_cast<std::size_t>(j)]);
                        }
                        for (std::int64_t j = 0; j < N; ++j)
                            if (!(mask && mask[i * N + j]))
                                w[static_cast<std::size_t>(j)] =
                                    std::exp(s[static_cast<std::size_t>(j)] - mx);
                    }
                    double sum = 0;
                    for (double v : w) sum += v;
                    if (sum < 1e-300) sum = 1e-300;
                    for (double& v : w) v /= sum;
                    rows.push_back(std::move(w));
                }
            }
        return rows;
    }

private:
    Tensor<T> softmax_head(HeadCache& hc, std::int64_t N, std::int64_t dh,
                           const std::uint8_t* mask, FlopCounter* fc) {
        const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
        Tensor<T> s({N, N});
        gemm_tb(hc.q.ptr(), hc.k.ptr(), s.ptr(), N, dh, N, false, fc ? &fc->core : nullptr);
        for (std::int64_t i = 0; i < N; ++i) {
            T* row = s.ptr() + i * N;
            double mx = -1e300;
            for (std::int64_t j = 0; j < N; ++j) {
                row[j] *= scale;
                if (mask && mask[i * N + j]) continue;
                mx = std::max(mx, static_cast<double>(row[j]));
            }
            double sum = 0;
            for (std::int64_t j = 0; j < N; ++j) {
                if (mask && mask[i * N + j]) {
                    row[j] = T(0);
                    continue;
                }
                const double e = std::exp(static_cast<double>(row[j]) - mx);
                row[j] = static_cast<T>(e);
                sum += e;
            }
            const T inv = static_cast<T>(1.0 / sum);
            for (std::int64_t j = 0; j < N; ++j) row[j] *= inv;
        }
        Tensor<T> out({N, dh});
        gemm(s.ptr(), hc.v.ptr(), out.ptr(), N, N, dh, false, fc ? &fc->core : nullptr);
        hc.a = std::move(s);
        return out;
    }

    void softmax_head_backward(HeadCache& hc, const Tensor<T>& dout, std::int64_t N,
                               std::int64_t dh, Tensor<T>& dq, Tensor<T>& dk, Tensor<T>& dv) {
        const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
        // out = A V
        gemm_ta(hc.a.ptr(), dout.ptr(), dv.ptr(), N, N, dh);
        Tensor<T> da({N, N});
        gemm_tb(dout.ptr(), hc.v.ptr(), da.ptr(), N, dh, N);
        // softmax backward; masked entries have a=0 so they contribute nothing
        Tensor<T> ds({N, N});
        for (std::int64_t i = 0; i < N; ++i) {
            double dot = 0;
            for (std::int64_t j = 0; j < N; ++j)
                dot += static_cast<double>(da.at2(i, j)) * hc.a.at2(i, j);
            for (std::int64_t j = 0; j < N; ++j)
                ds.at2(i, j) =
                    static_cast<T>(hc.a.at2(i, j) * (static_cast<double>(da.at2(i, j)) - dot)) *
                    scale;
        }
        gemm(ds.ptr(), hc.k.ptr(), dq.ptr(), N, N, dh);
        gemm_ta(ds.ptr(), hc.q.ptr(), dk.ptr(), N, N, dh);
    }

    Tensor<T> linear_head(HeadCache& hc, std::int64_t N, std::int64_t dh,
                          const std::uint8_t* mask, FlopCounter* fc) {
        hc.p = Tensor<T>({N, dh});
        hc.r = Tensor<T>({N, dh});
        for (std::int64_t i = 0; i < N * dh; ++i) {
            hc.p[i] = detail::phi_elu1(hc.q[i]);
            hc.r[i] = detail::phi_elu1(hc.k[i]);
        }
        Tensor<T> out({N, dh});
        if (mask) {
            // explicit O(N^2 d) path so the mask can bite per pair
            Tensor<T> w({N, N});
            gemm_tb(hc.p.ptr(), hc.r.ptr(), w.ptr(), N, dh, N, false, fc ? &fc->core : nullptr);
            hc.den.assign(static_cast<std::size_t>(N), T(0));
            hc.den_clamped.assign(static_cast<std::size_t>(N), 0);
            for (std::int64_t i = 0; i < N; ++i) {
                double den = 0;
                for (std::int64_t j = 0; j < N; ++j) {
                    if (mask[i * N + j]) {
                        w.at2(i, j) = T(0);
                        continue;
                    }
                    den += w.at2(i, j);
                }
                if (den < 1e-12) {
                    den = 1e-12;
                    hc.den_clamped[static_cast<std::size_t>(i)] = 1;
                }
                hc.den[static_cast<std::size_t>(i)] = static_cast<T>(den);
                if (kind.normalize) {
                    const T inv = static_cast<T>(1.0 / den);
                    for (std::int64_t j = 0; j < N; ++j) w.at2(i, j) *= inv;
                }
            }
            gemm(w.ptr(), hc.v.ptr(), out.ptr(), N, N, dh, false, fc ? &fc->core : nullptr);
            hc.a = std::move(w);
            return out;
        }
        // right-associated order: kv = phi(K)^T V, then phi(Q) kv
        hc.kv = Tensor<T>({dh, dh});
        gemm_ta(hc.r.ptr(), hc.v.ptr(), hc.kv.ptr(), dh, N, dh, false, fc ? &fc->core : nullptr);
        Tensor<T> u({N, dh});
        gemm(hc.p.ptr(), hc.kv.ptr(), u.ptr(), N, dh, dh, false, fc ? &fc->core : nullptr);
        hc.ksum.assign(static_cast<std::size_t>(dh), T(0));
        for (std::int64_t j = 0; j < N; ++j)
            for (std::int64_t c = 0; c < dh; ++c) hc.ksum[static_cast<std::size_t>(c)] += hc.r.at2(j, c);
        if (fc) fc->core += static_cast<std::uint64_t>(N) * dh;
        if (kind.normalize) {
            hc.den.assign(static_cast<std::size_t>(N), T(0));
            hc.den_clamped.assign(static_cast<std::size_t>(N), 0);
            for (std::int64_t i = 0; i < N; ++i) {
                double den = 0;
                for (std::int64_t c = 0; c < dh; ++c)
                    den += static_cast<double>(hc.p.at2(i, c)) * hc.ksum[static_cast<std::size_t>(c)];
                if (den < 1e-12) {
                    den = 1e-12;
                    hc.den_clamped[static_cast<std::size_t>(i)] = 1;
                }
                hc.den[static_cast<std::size_t>(i)] = static_cast<T>(den);
                const T inv = static_cast<T>(1.0 / den);
                for (std::int64_t c = 0; c < dh; ++c) out.at2(i, c) = u.at2(i, c) * inv;
            }
            if (fc) fc->core += static_cast<std::uint64_t>(2) * N * dh;
            hc.u = std::move(u);
            return out;
        }
        return u;
    }

    void linear_head_backward(HeadCache& hc, const Tensor<T>& dout, std::int64_t N,
                              std::int64_t dh, const std::uint8_t* mask, Tensor<T>& dq,
                              Tensor<T>& dk, Tensor<T>& dv) {
        Tensor<T> dp({N, dh}), dr({N, dh});
        dp.zero();
        dr.zero();
        if (mask) {
            // out = A V with A the (possibly normalized) masked weight matrix
            gemm_ta(hc.a.ptr(), dout.ptr(), dv.ptr(), N, N, dh);
            Tensor<T> da({N, N});
            gemm_tb(dout.ptr(), hc.v.ptr(), da.ptr(), N, dh, N);
            Tensor<T> dw({N, N});
            for (std::int64_t i = 0; i < N; ++i) {
                if (kind.normalize) {
                    const double den = hc.den[static_cast<std::size_t>(i)];
                    const bool clamped = hc.den_clamped[static_cast<std::size_t>(i)] != 0;
                    double s = 0;
                    for (std::int64_t j = 0; j < N; ++j)
                        s += static_cast<double>(da.at2(i, j)) * hc.a.at2(i, j);
                    for (std::int64_t j = 0; j < N; ++j)
                        dw.at2(i, j) = (mask[i * N + j])
                                           ? T(0)
                                           : static_cast<T>((da.at2(i, j) - (clamped ? 0.0 : s)) /
                                                            den);
                } else {
                    for (std::int64_t j = 0; j < N; ++j)
                        dw.at2(i, j) = mask[i * N + j] ? T(0) : da.at2(i, j);
                }
            }
            gemm(dw.ptr(), hc.r.ptr(), dp.ptr(), N, N, dh);
            gemm_ta(dw.ptr(), hc.p.ptr(), dr.ptr(), N, N, dh);
        } else if (kind.normalize) {
            // out_i = u_i / den_i, u = P kv, den_i = p_i . ksum
            Tensor<T> du({N, dh});
            std::vector<double> dden(static_cast<std::size_t>(N), 0.0);
            for (std::int64_t i = 0; i < N; ++i) {
                const double den = hc.den[static_cast<std::size_t>(i)];
                const bool clamped = hc.den_clamped[static_cast<std::size_t>(i)] != 0;
                double acc = 0;
                for (std::int64_t c = 0; c < dh; ++c) {
                    du.at2(i, c) = static_cast<T>(dout.at2(i, c) / den);
                    acc += static_cast<double>(dout.at2(i, c)) * hc.u.at2(i, c);
                }
                dden[static_cast<std::size_t>(i)] = clamped ? 0.0 : -acc / (den * den);
            }
            // u = P kv
            Tensor<T> dkv({dh, dh});
            gemm_ta(hc.p.ptr(), du.ptr(), dkv.ptr(), dh, N, dh);
            gemm_tb(du.ptr(), hc.kv.ptr(), dp.ptr(), N, dh, dh);
            // den_i = p_i . ksum
            std::vector<double> dksum(static_cast<std::size_t>(dh), 0.0);
            for (std::int64_t i = 0; i < N; ++i)
                for (std::int64_t c = 0; c < dh; ++c) {
                    dp.at2(i, c) += static_cast<T>(dden[static_cast<std::size_t>(i)] *
                                                   hc.ksum[static_cast<std::size_t>(c)]);
                    dksum[static_cast<std::size_t>(c)] +=
                        dden[static_cast<std::size_t>(i)] * hc.p.at2(i, c);
                }
            // kv = R^T V so dV = R dkv, dR = V dkv^T; ksum feeds each r row
            gemm(hc.r.ptr(), dkv.ptr(), dv.ptr(), N, dh, dh);
            gemm_tb(hc.v.ptr(), dkv.ptr(), dr.ptr(), N, dh, dh);
            for (std::int64_t j = 0; j < N; ++j)
                for (std::int64_t c = 0; c < dh; ++c)
                    dr.at2(j, c) += static_cast<T>(dksum[static_cast<std::size_t>(c)]);
        } else {
            // out = P (R^T V)
            Tensor<T> dkv({dh, dh});
            gemm_ta(hc.p.ptr(), dout.ptr(), dkv.ptr(), dh, N, dh);
            gemm_tb(dout.ptr(), hc.kv.ptr(), dp.ptr(), N, dh, dh);
            gemm(hc.r.ptr(), dkv.ptr(), dv.ptr(), N, dh, dh);
            gemm_tb(hc.v.ptr(), dkv.ptr(), dr.ptr(), N, dh, dh);
        }
        for (std::int64_t i = 0; i < N * dh; ++i) {
            dq[i] = dp[i] * detail::phi_elu1_slope(hc.q[i]);
            dk[i] = dr[i] * detail::phi_elu1_slope(hc.k[i]);
        }
    }

    TokenGrid<T> conv_forward(const TokenGrid<T>& x, bool keep_cache, FlopCounter* fc) {
        const std::int64_t B = x.batch(), N = x.tokens();
        const std::int64_t c = kConvExpand * d;
        const int gh = x.grid_h, gw = x.grid_w, ks = kind.conv_kernel, half = ks / 2;
        Tensor<T> h1 = conv_act.forward(pw1.forward(x.data, keep_cache), keep_cache);
        if (fc) fc->projection += static_cast<std::uint64_t>(2) * B * N * d * c;
        // depthwise k x k over the grid, zero padded
        Tensor<T> h2({B, N, c});
        for (std::int64_t b = 0; b < B; ++b)
            for (int y = 0; y < gh; ++y)
                for (int xx = 0; xx < gw; ++xx) {
                    T* out = h2.ptr() + ((b * N) + y * gw + xx) * c;
                    for (std::int64_t ch = 0; ch < c; ++ch) out[ch] = dw_b[ch];
                    for (int dy2 = -half; dy2 <= half; ++dy2) {
                        const int sy = y + dy2;
                        if (sy < 0 || sy >= gh) continue;
                        for (int dx2 = -half; dx2 <= half; ++dx2) {
                            const int sx = xx + dx2;
                            if (sx < 0 || sx >= gw) continue;
                            const T* in = h1.ptr() + ((b * N) + sy * gw + sx) * c;
                            for (std::int64_t ch = 0; ch < c; ++ch)
                                out[ch] += in[ch] * dw_w[(ch * ks + (dy2 + half)) * ks +
                                                         (dx2 + half)];
                        }
                    }
                }
        if (fc) fc->core += static_cast<std::uint64_t>(2) * B * N * c * ks * ks;
        if (keep_cache) dw_in_cache = h1;
        Tensor<T> y = pw2.forward(h2, keep_cache);
        y.shape = {B, N, d};
        if (fc) fc->projection += static_cast<std::uint64_t>(2) * B * N * d * c;
        return TokenGrid<T>(std::move(y), gh, gw);
    }

    TokenGrid<T> conv_backward(const TokenGrid<T>& dy) {
        const std::int64_t B = dy.batch(), N = dy.tokens();
        const std::int64_t c = kConvExpand * d;
        const int gh = dy.grid_h, gw = dy.grid_w, ks = kind.conv_kernel, half = ks / 2;
        Tensor<T> dh2 = pw2.backward(dy.data);
        Tensor<T> dh1({B, N, c});
        dh1.zero();
        for (std::int64_t b = 0; b < B; ++b)
            for (int y = 0; y < gh; ++y)
                for (int xx = 0; xx < gw; ++xx) {
                    const T* g = dh2.ptr() + ((b * N) + y * gw + xx) * c;
                    for (std::int64_t ch = 0; ch < c; ++ch) gdw_b[ch] += g[ch];
                    for (int dy2 = -half; dy2 <= half; ++dy2) {
                        const int sy = y + dy2;
                        if (sy < 0 || sy >= gh) continue;
                        for (int dx2 = -half; dx2 <= half; ++dx2) {
                            const int sx = xx + dx2;
                            if (sx < 0 || sx >= gw) continue;
                            const T* in = dw_in_cache.ptr() + ((b * N) + sy * gw + sx) * c;
                            T* din = dh1.ptr() + ((b * N) + sy * gw + sx) * c;
                            for (std::int64_t ch = 0; ch < c; ++ch) {
                                const std::int64_t wi =
                                    (ch * ks + (dy2 + half)) * ks + (dx2 + half);
                                gdw_w[wi] += g[ch] * in[ch];
                                din[ch] += g[ch] * dw_w[wi];
                            }
                        }
                    }
                }
        Tensor<T> dx = pw1.backward(conv_act.backward(dh1));
        dx.shape = {B, N, d};
        return TokenGrid<T>(std::move(dx), gh, gw);
    }
};

}  // namespace dinomaly
