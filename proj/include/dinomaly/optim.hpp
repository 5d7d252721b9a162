#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "dinomaly/layers.hpp"
#include "dinomaly/tensor.hpp"

namespace dinomaly {

struct OptimConfig {
    double lr_peak = 2e-3;
    double lr_final = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 1e-4;
    double eps = 1e-10;
    int warmup_iters = 100;
    int total_iters = 10000;
    bool amsgrad = true;

    void validate() const {
        if (!(lr_final > 0.0 && lr_final <= lr_peak))
            throw ConfigError("need 0 < lr_final <= lr_peak");
        if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
            throw ConfigError("betas must be in [0, 1)");
        if (warmup_iters < 0 || total_iters <= 0) throw ConfigError("bad iteration counts");
    }
};

// Linear warmup to lr_peak, then cosine anneal to lr_final.
inline double lr_at(int iteration, const OptimConfig& cfg) {
    if (iteration < cfg.warmup_iters)
        return cfg.lr_peak * static_cast<double>(iteration) / cfg.warmup_iters;
    if (iteration >= cfg.total_iters) return cfg.lr_final;
    const double progress = static_cast<double>(iteration - cfg.warmup_iters) /
                            static_cast<double>(cfg.total_iters - cfg.warmup_iters);
    return cfg.lr_final +
           (cfg.lr_peak - cfg.lr_final) * (1.0 + std::cos(3.14159265358979323846 * progress)) / 2.0;
}

// AdamW with AMSGrad whose per-tensor step is clipped by the RMS of the
// Adam update ratio; weight decay stays decoupled at the unclipped lr.
template <typename T>
struct StableAdamW {
    OptimConfig cfg;
    struct Slot {
        Tensor<T> m, v, vhat;
    };
    std::vector<Slot> slots;
    std::int64_t t = 0;
    std::uint64_t skipped_nonfinite = 0;
    double last_clip_fraction = 0.0;
    double last_eff_lr_mean = 0.0;

    explicit StableAdamW(OptimConfig c = {}) : cfg(c) { cfg.validate(); }

    void bind(const std::vector<ParamRef<T>>& params) {
        slots.clear();
        slots.reserve(params.size());
        for (const auto& pr : params)
            slots.push_back({Tensor<T>(pr.p->shape), Tensor<T>(pr.p->shape),
                             Tensor<T>(pr.p->shape)});
        t = 0;
    }

    void step(std::vector<ParamRef<T>>& params, double lr) {
        if (slots.size() != params.size())
            throw ConfigError("optimizer not bound to this parameter set");
        ++t;
        const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
        std::size_t clipped = 0, stepped = 0;
        double eff_lr_sum = 0.0;
        for (std::size_t s = 0; s < params.size(); ++s) {
            Tensor<T>& p = *params[s].p;
            const Tensor<T>& g = *params[s].g;
            Slot& slot = slots[s];
            if (!g.all_finite()) {
                ++skipped_nonfinite;
                continue;
            }
            const std::int64_t n = p.numel();
            double rms_acc = 0.0;
            for (std::int64_t i = 0; i < n; ++i) {
                const double gi = g[i];
                slot.m[i] = static_cast<T>(cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * gi);
                slot.v[i] = static_cast<T>(cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * gi * gi);
                if (cfg.amsgrad) {
                    if (slot.v[i] > slot.vhat[i]) slot.vhat[i] = slot.v[i];
                } else {
                    slot.vhat[i] = slot.v[i];
                }
                const double vh = static_cast<double>(slot.vhat[i]) / bc2;
                rms_acc += gi * gi / std::max(vh, cfg.eps * cfg.eps);
            }
            const double rms = std::sqrt(rms_acc / static_cast<double>(n));
            const double eff_lr = lr / std::max(1.0, rms);
            clipped += (rms > 1.0);
            ++stepped;
            eff_lr_sum += eff_lr;
            for (std::int64_t i = 0; i < n; ++i) {
                const double mt = static_cast<double>(slot.m[i]) / bc1;
                const double vh = static_cast<double>(slot.vhat[i]) / bc2;
                const double update = mt / (std::sqrt(vh) + cfg.eps);
                p[i] = static_cast<T>(p[i] - eff_lr * update - lr * cfg.weight_decay * p[i]);
            }
        }
        last_clip_fraction = stepped ? static_cast<double>(clipped) / stepped : 0.0;
        last_eff_lr_mean = stepped ? eff_lr_sum / static_cast<double>(stepped) : 0.0;
    }
};

}  // namespace dinomaly
