#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "dinomaly/model.hpp"
#include "dinomaly/tensor.hpp"

namespace dinomaly {

struct HardMiningConfig {
    double k_max = 90.0;  // percent of points whose gradients get shrunk
    int warmup_iters = 1000;
    double shrink_factor = 0.1;
    bool per_pair_percentile = false;  // default: one percentile over all pairs

    void validate() const {
        if (k_max < 0.0 || k_max > 100.0) throw ConfigError("k_max must be in [0, 100]");
        if (shrink_factor <= 0.0 || shrink_factor > 1.0)
            throw ConfigError("shrink_factor must be in (0, 1]");
        if (warmup_iters < 0) throw ConfigError("hard-mining warmup must be >= 0");
    }
};

// 1 - a.b / (|a||b|); degenerate inputs count as maximal uncertainty.
template <typename T>
double cosine_distance(const T* a, const T* b, std::int64_t n,
                       std::uint64_t* degenerate = nullptr) {
    double dot = 0, na = 0, nb = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        dot += static_cast<double>(a[i]) * b[i];
        na += static_cast<double>(a[i]) * a[i];
        nb += static_cast<double>(b[i]) * b[i];
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    if (na < 1e-12 || nb < 1e-12) {
        if (degenerate) ++*degenerate;
        return 1.0;
    }
    return 1.0 - dot / (na * nb);
}

inline double current_k(int iteration, const HardMiningConfig& cfg) {
    if (iteration < 0) throw ConfigError("iteration must be >= 0");
    if (cfg.warmup_iters == 0 || iteration >= cfg.warmup_iters) return cfg.k_max;
    return cfg.k_max * static_cast<double>(iteration) / cfg.warmup_iters;
}

// True for the floor(k% * count) smallest distances; ties broken by index.
inline std::vector<std::uint8_t> select_shrink_mask(const std::vector<double>& distances,
                                                    double k) {
    if (distances.empty()) throw InputError("select_shrink_mask: empty batch");
    for (double d : distances)
        if (!std::isfinite(d)) throw InputError("select_shrink_mask: non-finite distance");
    const std::int64_t count = static_cast<std::int64_t>(distances.size());
    const auto take = static_cast<std::int64_t>(std::floor(k * static_cast<double>(count) / 100.0));
    std::vector<std::uint8_t> mask(distances.size(), 0);
    if (take <= 0) return mask;
    std::vector<std::int64_t> order(distances.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::int64_t x, std::int64_t y) {
        if (distances[static_cast<std::size_t>(x)] != distances[static_cast<std::size_t>(y)])
            return distances[static_cast<std::size_t>(x)] < distances[static_cast<std::size_t>(y)];
        return x < y;
    });
    for (std::int64_t i = 0; i < std::min(take, count); ++i)
        mask[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = 1;
    return mask;
}

// Per-point channel-vector cosine distances for one pair, [B, N].
template <typename T>
Tensor<double> per_point_distances(const FeaturePair<T>& pair,
                                   std::uint64_t* degenerate = nullptr) {
    if (!pair.enc.same_layout(pair.dec))
        throw InputError("per_point_distances: encoder/decoder layout mismatch");
    const std::int64_t B = pair.enc.batch(), N = pair.enc.tokens(), C = pair.enc.dim();
    Tensor<double> out({B, N});
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t t = 0; t < N; ++t)
            out.at2(b, t) = cosine_distance(pair.dec.data.ptr() + (b * N + t) * C,
                                            pair.enc.data.ptr() + (b * N + t) * C, C, degenerate);
    return out;
}

template <typename T>
struct LossResult {
    double loss = 0.0;
    double k = 0.0;
    double shrunk_fraction = 0.0;
    std::uint64_t degenerate_count = 0;
    std::vector<TokenGrid<T>> dec_grads;  // dL/d(decoder feature), one per pair
};

// Loose global reconstruction loss: per image and pair, cosine distance of
// the flattened maps; the k% of points with the smallest per-point distance
// pass only shrink_factor of their gradient. Encoder side is detached.
template <typename T>
LossResult<T> global_hm_loss(const std::vector<FeaturePair<T>>& pairs, int iteration,
                             const HardMiningConfig& cfg, bool with_grad = true) {
    cfg.validate();
    if (pairs.empty()) throw InputError("global_hm_loss: no feature pairs");
    const double k = current_k(iteration, cfg);
    const std::size_t P = pairs.size();

    // per-point distances drive the shrink mask (never the forward value)
    LossResult<T> res;
    res.k = k;
    std::vector<Tensor<double>> point_d(P);
    for (std::size_t p = 0; p < P; ++p)
        point_d[p] = per_point_distances(pairs[p], &res.degenerate_count);

    std::vector<std::vector<std::uint8_t>> masks(P);
    if (k > 0.0) {
        if (cfg.per_pair_percentile) {
            for (std::size_t p = 0; p < P; ++p)
                masks[p] = select_shrink_mask(
                    std::vector<double>(point_d[p].data.begin(), point_d[p].data.end()), k);
        } else {
            std::vector<double> joint;
            for (std::size_t p = 0; p < P; ++p)
                joint.insert(joint.end(), point_d[p].data.begin(), point_d[p].data.end());
            auto joint_mask = select_shrink_mask(joint, k);
            std::size_t off = 0;
            for (std::size_t p = 0; p < P; ++p) {
                const std::size_t n = point_d[p].data.size();
                masks[p].assign(joint_mask.begin() + static_cast<std::ptrdiff_t>(off),
                                joint_mask.begin() + static_cast<std::ptrdiff_t>(off + n));
                off += n;
            }
        }
    } else {
        for (std::size_t p = 0; p < P; ++p) masks[p].assign(point_d[p].data.size(), 0);
    }

    std::size_t shrunk = 0, total_points = 0;
    double pair_mean_sum = 0.0;
    for (std::size_t p = 0; p < P; ++p) {
        const auto& pair = pairs[p];
        const std::int64_t B = pair.enc.batch(), N = pair.enc.tokens(), C = pair.enc.dim();
        if (!pair.enc.same_layout(pair.dec))
            throw ConfigError("global_hm_loss: pair shape mismatch");
        if (with_grad)
            res.dec_grads.emplace_back(B, pair.enc.grid_h, pair.enc.grid_w, C);
        double image_sum = 0.0;
        for (std::int64_t b = 0; b < B; ++b) {
            const T* u = pair.dec.data.ptr() + b * N * C;  // gradient side
            const T* v = pair.enc.data.ptr() + b * N * C;  // detached target
            double dot = 0, nu = 0, nv = 0;
            for (std::int64_t i = 0; i < N * C; ++i) {
                dot += static_cast<double>(u[i]) * v[i];
                nu += static_cast<double>(u[i]) * u[i];
                nv += static_cast<double>(v[i]) * v[i];
            }
            nu = std::sqrt(nu);
            nv = std::sqrt(nv);
            if (nu < 1e-12 || nv < 1e-12) {
                ++res.degenerate_count;
                image_sum += 1.0;  // constant: contributes no gradient
                continue;
            }
            const double cosv = dot / (nu * nv);
            image_sum += 1.0 - cosv;
            if (!with_grad) continue;
            // d(1 - cos)/du_i = -(v_i/(|u||v|) - cos * u_i/|u|^2)
            T* g = res.dec_grads[p].data.ptr() + b * N * C;
            const double scale = 1.0 / (static_cast<double>(P) * B);
            for (std::int64_t t = 0; t < N; ++t) {
                const double s = masks[p][static_cast<std::size_t>(b * N + t)]
                                     ? cfg.shrink_factor
                                     : 1.0;
                for (std::int64_t c = 0; c < C; ++c) {
                    const std::int64_t i = t * C + c;
                    const double gi = -(v[i] / (nu * nv) - cosv * u[i] / (nu * nu));
                    g[i] = static_cast<T>(gi * s * scale);
                }
            }
        }
        pair_mean_sum += image_sum / static_cast<double>(B);
        for (std::uint8_t m : masks[p]) {
            shrunk += m;
            ++total_points;
        }
    }

    res.loss = pair_mean_sum / static_cast<double>(P);
    res.shrunk_fraction =
        total_points ? static_cast<double>(shrunk) / static_cast<double>(total_points) : 0.0;
    if (!std::isfinite(res.loss))
        throw NumericError("non-finite loss at iteration " + std::to_string(iteration));
    return res;
}

}  // namespace dinomaly
