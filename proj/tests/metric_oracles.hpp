#pragma once

// brute-force metric reference implementations shared by the metric and
// acceptance suites; everything here recomputes counts exhaustively
#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <vector>

#include "dinomaly/metrics.hpp"
#include "dinomaly/rng.hpp"

namespace dinomaly {

// pair-count AUROC: (#concordant + 0.5 #tied) / (P * N)
inline double auroc_oracle(const std::vector<double>& s, const std::vector<std::uint8_t>& l) {
    double num = 0;
    std::int64_t p = 0, n = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (!l[i]) continue;
        ++p;
        for (std::size_t j = 0; j < s.size(); ++j) {
            if (l[j]) continue;
            if (s[i] > s[j]) num += 1.0;
            else if (s[i] == s[j]) num += 0.5;
        }
    }
    for (std::size_t j = 0; j < s.size(); ++j)
        if (!l[j]) ++n;
    return num / (static_cast<double>(p) * static_cast<double>(n));
}

inline std::vector<double> descending_thresholds(const std::vector<double>& s) {
    std::set<double, std::greater<double>> distinct(s.begin(), s.end());
    return {distinct.begin(), distinct.end()};
}

inline void counts_at(const std::vector<double>& s, const std::vector<std::uint8_t>& l, double tau,
               std::int64_t* tp, std::int64_t* fp, std::int64_t* fn) {
    *tp = *fp = *fn = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        const bool pred = s[i] >= tau;
        if (pred && l[i]) ++*tp;
        if (pred && !l[i]) ++*fp;
        if (!pred && l[i]) ++*fn;
    }
}

inline double ap_oracle(const std::vector<double>& s, const std::vector<std::uint8_t>& l) {
    std::int64_t pos = 0;
    for (auto b : l) pos += b;
    double ap = 0, prev_recall = 0;
    for (double tau : descending_thresholds(s)) {
        std::int64_t tp, fp, fn;
        counts_at(s, l, tau, &tp, &fp, &fn);
        const double recall = static_cast<double>(tp) / static_cast<double>(pos);
        const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    return ap;
}

inline double f1_oracle(const std::vector<double>& s, const std::vector<std::uint8_t>& l) {
    double best = 0;
    for (double tau : descending_thresholds(s)) {
        std::int64_t tp, fp, fn;
        counts_at(s, l, tau, &tp, &fp, &fn);
        best = std::max(best, 2.0 * static_cast<double>(tp) /
                                  static_cast<double>(2 * tp + fp + fn));
    }
    return best;
}

// independent 8-connected labeling by repeated min-propagation
inline std::vector<int> regions_oracle(const Tensor<std::uint8_t>& mask, int* count) {
    const int h = static_cast<int>(mask.shape[0]), w = static_cast<int>(mask.shape[1]);
    std::vector<int> lab(static_cast<std::size_t>(h) * w, -1);
    for (int i = 0; i < h * w; ++i)
        if (mask.data[static_cast<std::size_t>(i)]) lab[static_cast<std::size_t>(i)] = i;
    bool changed = true;
    while (changed) {
        changed = false;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const std::size_t i = static_cast<std::size_t>(y) * w + x;
                if (lab[i] < 0) continue;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int ny = y + dy, nx = x + dx;
                        if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
                        const std::size_t ni = static_cast<std::size_t>(ny) * w + nx;
                        if (lab[ni] >= 0 && lab[ni] < lab[i]) {
                            lab[i] = lab[ni];
                            changed = true;
                        }
                    }
            }
    }
    std::map<int, int> remap;
    for (auto& v : lab)
        if (v >= 0) {
            auto it = remap.find(v);
            if (it == remap.end()) it = remap.insert({v, static_cast<int>(remap.size())}).first;
            v = it->second;
        }
    *count = static_cast<int>(remap.size());
    return lab;
}

// per-threshold brute-force PRO/FPR curve, trapezoid up to the limit
inline double aupro_oracle(const std::vector<AnomalyMap>& maps,
                    const std::vector<Tensor<std::uint8_t>>& masks, double limit) {
    struct Pix {
        double v;
        int region;  // -1 normal
    };
    std::vector<Pix> pix;
    std::vector<std::int64_t> sizes;
    for (std::size_t i = 0; i < maps.size(); ++i) {
        int count = 0;
        auto lab = regions_oracle(masks[i], &count);
        const int base = static_cast<int>(sizes.size());
        sizes.resize(static_cast<std::size_t>(base + count), 0);
        for (std::int64_t p = 0; p < maps[i].values.numel(); ++p) {
            const int r = lab[static_cast<std::size_t>(p)];
            pix.push_back({static_cast<double>(maps[i].values[p]), r < 0 ? -1 : base + r});
            if (r >= 0) ++sizes[static_cast<std::size_t>(base + r)];
        }
    }
    std::int64_t total_normal = 0;
    for (const auto& p : pix) total_normal += (p.region < 0);

    std::vector<double> values;
    for (const auto& p : pix) values.push_back(p.v);
    double area = 0, prev_fpr = 0, prev_pro = 0;
    for (double tau : descending_thresholds(values)) {
        std::int64_t fp = 0;
        std::vector<std::int64_t> det(sizes.size(), 0);
        for (const auto& p : pix) {
            if (p.v < tau) continue;
            if (p.region < 0) ++fp;
            else ++det[static_cast<std::size_t>(p.region)];
        }
        const double fpr = static_cast<double>(fp) / static_cast<double>(total_normal);
        double pro = 0;
        for (std::size_t r = 0; r < sizes.size(); ++r)
            pro += static_cast<double>(det[r]) / static_cast<double>(sizes[r]);
        pro /= static_cast<double>(sizes.size());
        if (fpr >= limit) {
            const double t = (limit - prev_fpr) / (fpr - prev_fpr);
            const double pro_at = prev_pro + t * (pro - prev_pro);
            area += (limit - prev_fpr) * (pro_at + prev_pro) / 2.0;
            return area / limit;
        }
        area += (fpr - prev_fpr) * (pro + prev_pro) / 2.0;
        prev_fpr = fpr;
        prev_pro = pro;
    }
    return area / limit;
}

struct Instance {
    std::vector<double> scores;
    std::vector<std::uint8_t> labels;
};

inline Instance random_instance(Rng& rng, int max_n, bool quantize) {
    Instance inst;
    const int n = 2 + static_cast<int>(rng.uniform_index(static_cast<std::size_t>(max_n - 1)));
    bool has_pos = false, has_neg = false;
    for (int i = 0; i < n; ++i) {
        double s = rng.uniform();
        if (quantize) s = std::round(s * 8.0) / 8.0;  // force ties
        const bool label = rng.bernoulli(0.4);
        inst.scores.push_back(s);
        inst.labels.push_back(label);
        (label ? has_pos : has_neg) = true;
    }
    if (!has_pos) inst.labels[0] = 1;
    if (!has_neg) inst.labels[static_cast<std::size_t>(n - 1)] = 0;
    return inst;
}

}  // namespace dinomaly
