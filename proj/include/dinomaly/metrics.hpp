#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "dinomaly/scoring.hpp"

namespace dinomaly {

namespace detail {

// descending-score sweep points grouped by distinct score value
struct SweepPoint {
    double score;
    std::int64_t tp, fp;  // cumulative counts predicting positive at score >= this value
};

inline std::vector<SweepPoint> ranked_sweep(const std::vector<double>& scores,
                                            const std::vector<std::uint8_t>& labels) {
    if (scores.size() != labels.size())
        throw InputError("metrics: scores/labels size mismatch");
    if (scores.empty()) throw InputError("metrics: empty input");
    for (double s : scores)
        if (!std::isfinite(s)) throw InputError("metrics: non-finite score");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0u);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    std::vector<SweepPoint> pts;
    std::int64_t tp = 0, fp = 0;
    std::size_t i = 0;
    while (i < order.size()) {
        const double s = scores[order[i]];
        while (i < order.size() && scores[order[i]] == s) {
            if (labels[order[i]]) ++tp; else ++fp;
            ++i;
        }
        pts.push_back({s, tp, fp});
    }
    return pts;
}

}  // namespace detail

inline double auroc(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels) {
    auto pts = detail::ranked_sweep(scores, labels);
    const std::int64_t pos = pts.back().tp, neg = pts.back().fp;
    if (pos == 0) throw InputError("auroc: no positive samples");
    if (neg == 0) throw InputError("auroc: no negative samples");
    double area = 0;
    double prev_fpr = 0, prev_tpr = 0;
    for (const auto& p : pts) {
        const double fpr = static_cast<double>(p.fp) / static_cast<double>(neg);
        const double tpr = static_cast<double>(p.tp) / static_cast<double>(pos);
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_fpr = fpr;
        prev_tpr = tpr;
    }
    return area;
}

inline double average_precision(const std::vector<double>& scores,
                                const std::vector<std::uint8_t>& labels) {
    auto pts = detail::ranked_sweep(scores, labels);
    const std::int64_t pos = pts.back().tp;
    if (pos == 0) throw InputError("average_precision: no positive samples");
    double ap = 0, prev_recall = 0;
    for (const auto& p : pts) {
        const double recall = static_cast<double>(p.tp) / static_cast<double>(pos);
        const double precision = static_cast<double>(p.tp) / static_cast<double>(p.tp + p.fp);
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    return ap;
}

inline double f1_max(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels) {
    auto pts = detail::ranked_sweep(scores, labels);
    const std::int64_t pos = pts.back().tp;
    if (pos == 0) throw InputError("f1_max: no positive samples");
    double best = 0;
    for (const auto& p : pts) {
        const double f1 = 2.0 * static_cast<double>(p.tp) /
                          static_cast<double>(2 * p.tp + p.fp + (pos - p.tp));
        best = std::max(best, f1);
    }
    return best;
}

// 8-connected components of a binary mask; returns per-pixel region id (-1 outside)
inline std::vector<int> label_regions(const Tensor<std::uint8_t>& mask, int* region_count) {
    const int h = static_cast<int>(mask.shape[0]);
    const int w = static_cast<int>(mask.shape[1]);
    std::vector<int> region(static_cast<std::size_t>(h) * static_cast<std::size_t>(w), -1);
    int next = 0;
    std::vector<std::pair<int, int>> stack;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const std::size_t idx = static_cast<std::size_t>(y) * static_cast<std::size_t>(w) +
                                    static_cast<std::size_t>(x);
            if (!mask.data[idx] || region[idx] >= 0) continue;
            stack.push_back({y, x});
            region[idx] = next;
            while (!stack.empty()) {
                auto [cy, cx] = stack.back();
                stack.pop_back();
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int ny = cy + dy, nx = cx + dx;
                        if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
                        const std::size_t ni =
                            static_cast<std::size_t>(ny) * static_cast<std::size_t>(w) +
                            static_cast<std::size_t>(nx);
                        if (!mask.data[ni] || region[ni] >= 0) continue;
                        region[ni] = next;
                        stack.push_back({ny, nx});
                    }
            }
            ++next;
        }
    if (region_count) *region_count = next;
    return region;
}

inline double aupro(const std::vector<AnomalyMap>& maps,
                    const std::vector<Tensor<std::uint8_t>>& masks, double fpr_limit = 0.3) {
    if (fpr_limit <= 0.0 || fpr_limit > 1.0)
        throw ConfigError("aupro: fpr_limit must be in (0, 1]");
    if (maps.size() != masks.size()) throw InputError("aupro: maps/masks count mismatch");
    if (maps.empty()) throw InputError("aupro: empty input");

    struct RegionPixel {
        double value;
        int region;
    };
    std::vector<RegionPixel> region_pixels;
    std::vector<double> normal_values;
    std::vector<std::int64_t> region_sizes;

    for (std::size_t i = 0; i < maps.size(); ++i) {
        const auto& m = maps[i].values;
        const auto& mask = masks[i];
        if (mask.rank() != 2 || m.shape != mask.shape)
            throw InputError("aupro: map/mask shape mismatch at index " + std::to_string(i));
        int count = 0;
        auto region = label_regions(mask, &count);
        const int base = static_cast<int>(region_sizes.size());
        region_sizes.resize(static_cast<std::size_t>(base + count), 0);
        for (std::int64_t p = 0; p < m.numel(); ++p) {
            const int r = region[static_cast<std::size_t>(p)];
            if (r >= 0) {
                region_pixels.push_back({static_cast<double>(m[p]), base + r});
                ++region_sizes[static_cast<std::size_t>(base + r)];
            } else {
                normal_values.push_back(static_cast<double>(m[p]));
            }
        }
    }
    if (region_sizes.empty()) throw InputError("aupro: no anomalous pixels in any mask");
    if (normal_values.empty()) throw InputError("aupro: no normal pixels");

    std::sort(region_pixels.begin(), region_pixels.end(),
              [](const RegionPixel& a, const RegionPixel& b) { return a.value > b.value; });
    std::sort(normal_values.begin(), normal_values.end(), std::greater<double>());

    const double total_normal = static_cast<double>(normal_values.size());
    const double num_regions = static_cast<double>(region_sizes.size());
    std::vector<std::int64_t> detected(region_sizes.size(), 0);
    double pro_sum = 0;  // sum over regions of detected/size

    double area = 0, prev_fpr = 0, prev_pro = 0;
    std::size_t ri = 0, ni = 0;
    while (ri < region_pixels.size() || ni < normal_values.size()) {
        // next distinct threshold across both pools
        double v;
        if (ri < region_pixels.size() && ni < normal_values.size())
            v = std::max(region_pixels[ri].value, normal_values[ni]);
        else if (ri < region_pixels.size())
            v = region_pixels[ri].value;
        else
            v = normal_values[ni];
        while (ri < region_pixels.size() && region_pixels[ri].value == v) {
            const auto r = static_cast<std::size_t>(region_pixels[ri].region);
            pro_sum += 1.0 / static_cast<double>(region_sizes[r]);
            ++ri;
        }
        while (ni < normal_values.size() && normal_values[ni] == v) ++ni;

        const double fpr = static_cast<double>(ni) / total_normal;
        const double pro = pro_sum / num_regions;
        if (fpr >= fpr_limit) {
            // interpolate the PRO value at the limit and close the integral
            const double t = (fpr_limit - prev_fpr) / (fpr - prev_fpr);
            const double pro_at = prev_pro + t * (pro - prev_pro);
            area += (fpr_limit - prev_fpr) * (pro_at + prev_pro) / 2.0;
            return area / fpr_limit;
        }
        area += (fpr - prev_fpr) * (pro + prev_pro) / 2.0;
        prev_fpr = fpr;
        prev_pro = pro;
    }
    return area / fpr_limit;
}

inline constexpr std::array<const char*, 7> kMetricColumns = {
    "I-AUROC", "I-AP", "I-F1max", "P-AUROC", "P-AP", "P-F1max", "P-AUPRO"};

struct EvalReport {
    std::vector<std::string> classes;  // report order
    std::map<std::string, std::array<double, 7>> per_class;
    std::array<double, 7> mean{};

    void finalize() {
        mean.fill(0.0);
        for (const auto& c : classes)
            for (std::size_t i = 0; i < 7; ++i) mean[i] += per_class.at(c)[i];
        for (auto& v : mean) v /= static_cast<double>(classes.size());
    }
};

namespace detail {

inline std::string format_metric(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

}  // namespace detail

inline void write_report_csv(const std::string& path, const EvalReport& report) {
    std::ofstream os(path);
    if (!os) throw DataError("write_report_csv: cannot open " + path);
    os << "class";
    for (const auto* col : kMetricColumns) os << ',' << col;
    os << '\n';
    auto row = [&](const std::string& name, const std::array<double, 7>& vals) {
        os << name;
        for (double v : vals) os << ',' << detail::format_metric(v);
        os << '\n';
    };
    for (const auto& c : report.classes) row(c, report.per_class.at(c));
    row("mean", report.mean);
    if (!os) throw DataError("write_report_csv: write failed: " + path);
}

inline void write_report_json(const std::string& path, const EvalReport& report) {
    nlohmann::json j;
    j["columns"] = kMetricColumns;
    j["classes"] = report.classes;
    for (const auto& c : report.classes) j["per_class"][c] = report.per_class.at(c);
    j["mean"] = report.mean;
    std::ofstream os(path);
    if (!os) throw DataError("write_report_json: cannot open " + path);
    os << j.dump(2) << '\n';
}

inline EvalReport read_report_json(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("read_report_json: cannot open " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("read_report_json: parse error: ") + e.what());
    }
    EvalReport r;
    r.classes = j.at("classes").get<std::vector<std::string>>();
    for (const auto& c : r.classes)
        r.per_class[c] = j.at("per_class").at(c).get<std::array<double, 7>>();
    r.mean = j.at("mean").get<std::array<double, 7>>();
    return r;
}

}  // namespace dinomaly
