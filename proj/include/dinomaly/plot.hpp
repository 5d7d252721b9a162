#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "dinomaly/image.hpp"
#include "dinomaly/metrics.hpp"
#include "dinomaly/rng.hpp"

namespace dinomaly {

struct Polyline {
    std::vector<std::array<double, 2>> points;
};

inline Polyline roc_polyline(const std::vector<double>& scores,
                             const std::vector<std::uint8_t>& labels) {
    auto pts = detail::ranked_sweep(scores, labels);
    const auto pos = static_cast<double>(pts.back().tp);
    const auto neg = static_cast<double>(pts.back().fp);
    if (pos == 0) throw InputError("roc: no positive samples");
    if (neg == 0) throw InputError("roc: no negative samples");
    Polyline line;
    line.points.push_back({0.0, 0.0});
    for (const auto& p : pts)
        line.points.push_back({static_cast<double>(p.fp) / neg,
                               static_cast<double>(p.tp) / pos});
    return line;
}

inline void write_polyline_json(const std::string& path, const std::string& name,
                                const Polyline& line) {
    nlohmann::json j;
    j["name"] = name;
    j["points"] = line.points;
    std::ofstream os(path);
    if (!os) throw DataError("write_polyline_json: cannot open " + path);
    os << j.dump(2) << '\n';
}

inline Polyline read_polyline_json(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("read_polyline_json: cannot open " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("read_polyline_json: parse error: ") + e.what());
    }
    Polyline line;
    line.points = j.at("points").get<std::vector<std::array<double, 2>>>();
    return line;
}

struct HistogramData {
    std::vector<double> edges;   // nbins + 1
    std::vector<int> normal;     // counts per bin
    std::vector<int> anomalous;
};

inline HistogramData score_histogram(const std::vector<double>& normal_scores,
                                     const std::vector<double>& anomalous_scores,
                                     int nbins = 20) {
    if (normal_scores.empty()) throw InputError("histogram: no normal scores");
    if (anomalous_scores.empty()) throw InputError("histogram: no anomalous scores");
    if (nbins < 1) throw ConfigError("histogram: nbins must be >= 1");
    double lo = normal_scores[0], hi = normal_scores[0];
    for (const auto* v : {&normal_scores, &anomalous_scores})
        for (double s : *v) {
            lo = std::min(lo, s);
            hi = std::max(hi, s);
        }
    if (hi <= lo) hi = lo + 1e-9;
    HistogramData h;
    h.edges.resize(static_cast<std::size_t>(nbins) + 1);
    for (int i = 0; i <= nbins; ++i)
        h.edges[static_cast<std::size_t>(i)] = lo + (hi - lo) * i / nbins;
    h.normal.assign(static_cast<std::size_t>(nbins), 0);
    h.anomalous.assign(static_cast<std::size_t>(nbins), 0);
    auto bin_of = [&](double s) {
        int b = static_cast<int>((s - lo) / (hi - lo) * nbins);
        return std::clamp(b, 0, nbins - 1);
    };
    for (double s : normal_scores) ++h.normal[static_cast<std::size_t>(bin_of(s))];
    for (double s : anomalous_scores) ++h.anomalous[static_cast<std::size_t>(bin_of(s))];
    return h;
}

inline void write_histogram_json(const std::string& path, const HistogramData& h) {
    nlohmann::json j;
    j["bin_edges"] = h.edges;
    j["normal"] = h.normal;
    j["anomalous"] = h.anomalous;
    std::ofstream os(path);
    if (!os) throw DataError("write_histogram_json: cannot open " + path);
    os << j.dump(2) << '\n';
}

namespace detail {

struct Canvas {
    ImageU8 img;

    Canvas(int h, int w) : img(h, w, 3) { std::fill(img.data.begin(), img.data.end(), 255); }

    void set(int x, int y, std::array<std::uint8_t, 3> c) {
        if (x < 0 || x >= img.w || y < 0 || y >= img.h) return;
        for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = c[static_cast<std::size_t>(ch)];
    }

    void line(int x0, int y0, int x1, int y1, std::array<std::uint8_t, 3> c) {
        const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
        const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
        int err = dx + dy;
        while (true) {
            set(x0, y0, c);
            if (x0 == x1 && y0 == y1) break;
            const int e2 = 2 * err;
            if (e2 >= dy) {
                err += dy;
                x0 += sx;
            }
            if (e2 <= dx) {
                err += dx;
                y0 += sy;
            }
        }
    }

    void rect(int x0, int y0, int x1, int y1, std::array<std::uint8_t, 3> c) {
        for (int y = std::max(0, y0); y < std::min(img.h, y1); ++y)
            for (int x = std::max(0, x0); x < std::min(img.w, x1); ++x) set(x, y, c);
    }
};

inline constexpr std::array<std::uint8_t, 3> kAxisGray = {150, 150, 150};
inline constexpr std::array<std::uint8_t, 3> kCurveBlue = {30, 60, 180};
inline constexpr std::array<std::uint8_t, 3> kAnomRed = {200, 40, 40};

}  // namespace detail

inline void render_roc_png(const std::string& path, const Polyline& line, int size = 512) {
    detail::Canvas cv(size, size);
    const int m = size / 12;  // margin
    const int span = size - 2 * m;
    auto px = [&](double x) { return m + static_cast<int>(x * span + 0.5); };
    auto py = [&](double y) { return size - m - static_cast<int>(y * span + 0.5); };
    cv.line(px(0), py(0), px(1), py(0), detail::kAxisGray);
    cv.line(px(0), py(0), px(0), py(1), detail::kAxisGray);
    cv.line(px(0), py(0), px(1), py(1), detail::kAxisGray);
    for (std::size_t i = 1; i < line.points.size(); ++i)
        cv.line(px(line.points[i - 1][0]), py(line.points[i - 1][1]), px(line.points[i][0]),
                py(line.points[i][1]), detail::kCurveBlue);
    write_png(path, cv.img);
}

inline void render_histogram_png(const std::string& path, const HistogramData& h,
                                 int size = 512) {
    detail::Canvas cv(size, size);
    const int m = size / 12;
    const int span = size - 2 * m;
    int peak = 1;
    for (const auto* counts : {&h.normal, &h.anomalous})
        for (int c : *counts) peak = std::max(peak, c);
    const auto nbins = static_cast<int>(h.normal.size());
    const int bw = span / (2 * nbins);
    for (int i = 0; i < nbins; ++i) {
        const int x0 = m + i * span / nbins;
        const int hn = h.normal[static_cast<std::size_t>(i)] * span / peak;
        const int ha = h.anomalous[static_cast<std::size_t>(i)] * span / peak;
        cv.rect(x0, size - m - hn, x0 + bw, size - m, detail::kCurveBlue);
        cv.rect(x0 + bw, size - m - ha, x0 + 2 * bw, size - m, detail::kAnomRed);
    }
    cv.line(m, size - m, size - m, size - m, detail::kAxisGray);
    write_png(path, cv.img);
}

// nearest-neighbor scale of an 8-bit image to a fixed display edge
inline ImageU8 scale_to(const ImageU8& src, int edge) {
    ImageU8 out(edge, edge, 3);
    for (int y = 0; y < edge; ++y)
        for (int x = 0; x < edge; ++x) {
            int sy = std::min(static_cast<int>((y + 0.5) * src.h / edge), src.h - 1);
            int sx = std::min(static_cast<int>((x + 0.5) * src.w / edge), src.w - 1);
            for (int ch = 0; ch < 3; ++ch)
                out.at(y, x, ch) = src.at(sy, sx, src.c == 3 ? ch : 0);
        }
    return out;
}

// horizontal montage: one row per sample of (input | heatmap | mask)
inline ImageU8 sample_panel(const std::vector<std::array<ImageU8, 3>>& rows, int edge = 128) {
    if (rows.empty()) throw InputError("panel: no samples");
    const int pad = 4;
    ImageU8 out(static_cast<int>(rows.size()) * (edge + pad) - pad, 3 * (edge + pad) - pad, 3);
    std::fill(out.data.begin(), out.data.end(), 255);
    for (std::size_t r = 0; r < rows.size(); ++r)
        for (int col = 0; col < 3; ++col) {
            const ImageU8 cell = scale_to(rows[r][static_cast<std::size_t>(col)], edge);
            const int oy = static_cast<int>(r) * (edge + pad), ox = col * (edge + pad);
            for (int y = 0; y < edge; ++y)
                for (int x = 0; x < edge; ++x)
                    for (int ch = 0; ch < 3; ++ch)
                        out.at(oy + y, ox + x, ch) = cell.at(y, x, ch);
        }
    return out;
}

// deterministic choice of k distinct indices out of n
inline std::vector<std::size_t> seeded_selection(std::size_t n, std::size_t k,
                                                 std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    Rng rng(derive_seed(seed, "panel"));
    for (std::size_t i = 0; i < n; ++i) {
        const auto j = i + static_cast<std::size_t>(rng.uniform_index(n - i));
        std::swap(idx[i], idx[j]);
    }
    idx.resize(std::min(n, k));
    std::sort(idx.begin(), idx.end());
    return idx;
}

}  // namespace dinomaly
