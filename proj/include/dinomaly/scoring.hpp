#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "dinomaly/checkpoint.hpp"
#include "dinomaly/loss.hpp"

namespace dinomaly {

struct AnomalyMap {
    Tensor<float> values;  // [eval_h, eval_w]
    int grid_h = 0, grid_w = 0;

    int h() const { return static_cast<int>(values.shape[0]); }
    int w() const { return static_cast<int>(values.shape[1]); }
};

// half-pixel-center bilinear interpolation (corner alignment disabled)
template <typename S, typename D>
void bilinear_resize_plane(const S* src, int sh, int sw, D* dst, int dh, int dw) {
    const double sy = static_cast<double>(sh) / dh;
    const double sx = static_cast<double>(sw) / dw;
    for (int y = 0; y < dh; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        if (fy < 0) fy = 0;
        if (fy > sh - 1) fy = sh - 1;
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, sh - 1);
        const double wy = fy - y0;
        for (int x = 0; x < dw; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            if (fx < 0) fx = 0;
            if (fx > sw - 1) fx = sw - 1;
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, sw - 1);
            const double wx = fx - x0;
            const double v00 = static_cast<double>(src[y0 * sw + x0]);
            const double v01 = static_cast<double>(src[y0 * sw + x1]);
            const double v10 = static_cast<double>(src[y1 * sw + x0]);
            const double v11 = static_cast<double>(src[y1 * sw + x1]);
            const double top = v00 * (1.0 - wx) + v01 * wx;
            const double bot = v10 * (1.0 - wx) + v11 * wx;
            dst[y * dw + x] = static_cast<D>(top * (1.0 - wy) + bot * wy);
        }
    }
}

template <typename T>
std::vector<AnomalyMap> anomaly_maps(const std::vector<FeaturePair<T>>& groups, int eval_h,
                                     int eval_w, bool training_mode) {
    if (training_mode)
        throw ConfigError("anomaly_maps: model must be in eval mode (noise invalidates scores)");
    if (groups.empty()) throw InputError("anomaly_maps: no groups");
    if (eval_h <= 0 || eval_w <= 0) throw ConfigError("anomaly_maps: eval size must be positive");

    const auto b = groups[0].enc.batch();
    const auto n = groups[0].enc.tokens();
    const int gh = groups[0].enc.grid_h, gw = groups[0].enc.grid_w;
    Tensor<double> mean_d({b, n});
    for (const auto& g : groups) {
        if (g.enc.grid_h != gh || g.enc.grid_w != gw || g.enc.batch() != b)
            throw InputError("anomaly_maps: group layout mismatch");
        auto d = per_point_distances(g);
        for (std::int64_t i = 0; i < d.numel(); ++i) mean_d[i] += d[i];
    }
    for (std::int64_t i = 0; i < mean_d.numel(); ++i)
        mean_d[i] /= static_cast<double>(groups.size());

    std::vector<AnomalyMap> maps;
    maps.reserve(static_cast<std::size_t>(b));
    for (std::int64_t bi = 0; bi < b; ++bi) {
        AnomalyMap m;
        m.grid_h = gh;
        m.grid_w = gw;
        m.values = Tensor<float>({eval_h, eval_w});
        bilinear_resize_plane(mean_d.ptr() + bi * n, gh, gw, m.values.data.data(), eval_h,
                              eval_w);
        require_finite(m.values, "anomaly map");
        maps.push_back(std::move(m));
    }
    return maps;
}

inline double image_score(const AnomalyMap& map, double top_fraction = 0.01) {
    const auto n = map.values.numel();
    if (n == 0) throw InputError("image_score: empty map");
    if (top_fraction <= 0.0 || top_fraction > 1.0)
        throw ConfigError("image_score: top_fraction must be in (0, 1]");
    const auto take = static_cast<std::int64_t>(
        std::ceil(top_fraction * static_cast<double>(n)));
    std::vector<float> vals(map.values.data);
    std::nth_element(vals.begin(), vals.begin() + (n - take), vals.end());
    double sum = 0;
    for (std::int64_t i = n - take; i < n; ++i) sum += vals[static_cast<std::size_t>(i)];
    return sum / static_cast<double>(take);
}

inline constexpr char kMapMagic[8] = {'D', 'M', 'A', 'P', '0', '0', '0', '1'};

inline void save_map(const std::string& path, const std::string& id, const AnomalyMap& map) {
    nlohmann::json header;
    header["id"] = id;
    header["h"] = map.h();
    header["w"] = map.w();
    header["grid_h"] = map.grid_h;
    header["grid_w"] = map.grid_w;
    header["dtype"] = "f32";
    const std::string text = header.dump();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("save_map: cannot open " + path);
    os.write(kMapMagic, 8);
    detail::write_u64_le(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    detail::write_f32_le(os, map.values.data.data(),
                         static_cast<std::size_t>(map.values.numel()));
    if (!os) throw DataError("save_map: write failed: " + path);
}

inline AnomalyMap load_map(const std::string& path, std::string* id = nullptr) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("load_map: cannot open " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kMapMagic, 8) != 0)
        throw DataError("load_map: bad magic in " + path);
    const std::uint64_t len = detail::read_u64_le(is);
    std::string text(len, '\0');
    is.read(text.data(), static_cast<std::streamsize>(len));
    if (!is) throw DataError("load_map: truncated header in " + path);
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("load_map: invalid header json: ") + e.what());
    }
    AnomalyMap m;
    m.grid_h = header.value("grid_h", 0);
    m.grid_w = header.value("grid_w", 0);
    m.values = Tensor<float>({header.at("h").get<std::int64_t>(),
                              header.at("w").get<std::int64_t>()});
    detail::read_f32_le(is, m.values.data.data(), static_cast<std::size_t>(m.values.numel()));
    if (!is) throw DataError("load_map: truncated payload in " + path);
    if (id) *id = header.value("id", "");
    return m;
}

}  // namespace dinomaly
