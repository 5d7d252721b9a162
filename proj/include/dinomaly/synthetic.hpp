#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dinomaly/image.hpp"
#include "dinomaly/rng.hpp"
#include "dinomaly/tensor.hpp"
#include "json.hpp"

namespace dinomaly {

struct SynthSpec {
    int classes = 3;
    int train_per_class = 100;
    int test_per_class = 40;
    int image_size = 112;
    std::uint64_t seed = 0;

    void validate() const {
        if (classes < 1 || train_per_class < 1 || test_per_class < 2 || image_size < 16)
            throw ConfigError("synth: need classes>=1, train>=1, test>=2, image_size>=16");
    }
};

struct DefectSpec {
    std::string kind;        // rect | ellipse | scratch
    double x0 = 0, y0 = 0;   // rect/ellipse: bounding box; scratch: segment start
    double x1 = 0, y1 = 0;   // rect/ellipse: bounding box; scratch: segment end
    double thickness = 0;    // scratch only
    std::string mode;        // color_shift | invert
    std::array<int, 3> shift = {0, 0, 0};
};

inline void to_json(nlohmann::json& j, const DefectSpec& d) {
    j = {{"kind", d.kind},   {"x0", d.x0},           {"y0", d.y0},
         {"x1", d.x1},       {"y1", d.y1},           {"thickness", d.thickness},
         {"mode", d.mode},   {"shift", d.shift}};
}

inline void from_json(const nlohmann::json& j, DefectSpec& d) {
    j.at("kind").get_to(d.kind);
    j.at("x0").get_to(d.x0);
    j.at("y0").get_to(d.y0);
    j.at("x1").get_to(d.x1);
    j.at("y1").get_to(d.y1);
    j.at("thickness").get_to(d.thickness);
    j.at("mode").get_to(d.mode);
    j.at("shift").get_to(d.shift);
}

// pixel (x, y) belongs to the defect iff its center passes the shape predicate
inline bool defect_covers(const DefectSpec& d, int x, int y) {
    const double px = x + 0.5, py = y + 0.5;
    if (d.kind == "rect") return px >= d.x0 && px < d.x1 && py >= d.y0 && py < d.y1;
    if (d.kind == "ellipse") {
        const double cx = (d.x0 + d.x1) / 2, cy = (d.y0 + d.y1) / 2;
        const double a = (d.x1 - d.x0) / 2, b = (d.y1 - d.y0) / 2;
        const double u = (px - cx) / a, v = (py - cy) / b;
        return u * u + v * v <= 1.0;
    }
    if (d.kind == "scratch") {
        const double dx = d.x1 - d.x0, dy = d.y1 - d.y0;
        const double len2 = dx * dx + dy * dy;
        double t = len2 > 0 ? ((px - d.x0) * dx + (py - d.y0) * dy) / len2 : 0.0;
        if (t < 0) t = 0;
        if (t > 1) t = 1;
        const double qx = d.x0 + t * dx - px, qy = d.y0 + t * dy - py;
        return qx * qx + qy * qy <= d.thickness * d.thickness;
    }
    throw ConfigError("defect_covers: unknown kind " + d.kind);
}

inline Tensor<std::uint8_t> rasterize_defects(const std::vector<DefectSpec>& defects, int size) {
    Tensor<std::uint8_t> mask({size, size});
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            for (const auto& d : defects)
                if (defect_covers(d, x, y)) {
                    mask[static_cast<std::int64_t>(y) * size + x] = 1;
                    break;
                }
    return mask;
}

namespace detail {

struct ClassStyle {
    double angle, freq;
    std::array<std::array<double, 3>, 3> palette;
    int blob_count;
    double blob_sigma;
};

inline ClassStyle class_style(std::uint64_t seed, int cls) {
    Rng rng(derive_seed(seed, "class", static_cast<std::uint64_t>(cls)));
    ClassStyle s;
    s.angle = rng.uniform() * 3.14159265358979323846;
    s.freq = rng.uniform(2.0, 6.0);
    for (auto& color : s.palette)
        for (auto& ch : color) ch = rng.uniform(80.0, 176.0);
    s.blob_count = static_cast<int>(rng.uniform_index(7)) + 6;
    s.blob_sigma = rng.uniform(1.0 / 16.0, 1.0 / 8.0);
    return s;
}

inline ImageU8 normal_texture(const ClassStyle& s, int size, Rng& rng) {
    const double phase = rng.uniform() * 6.28318530717958647692;
    const double angle = s.angle + rng.normal() * 0.08;
    const double freq = s.freq * rng.uniform(0.94, 1.06);
    const double ca = std::cos(angle), sa = std::sin(angle);
    const double sigma = s.blob_sigma * size;

    std::vector<std::array<double, 2>> blobs(static_cast<std::size_t>(s.blob_count));
    for (auto& b : blobs) b = {rng.uniform() * size, rng.uniform() * size};

    Tensor<double> field({size, size});
    const int reach = static_cast<int>(3 * sigma) + 1;
    for (const auto& b : blobs) {
        const int bx = static_cast<int>(b[0]), by = static_cast<int>(b[1]);
        for (int y = std::max(0, by - reach); y < std::min(size, by + reach + 1); ++y)
            for (int x = std::max(0, bx - reach); x < std::min(size, bx + reach + 1); ++x) {
                const double dx = x + 0.5 - b[0], dy = y + 0.5 - b[1];
                field[static_cast<std::int64_t>(y) * size + x] +=
                    std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
            }
    }

    ImageU8 img(size, size, 3);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double g =
                0.5 + 0.5 * std::sin(6.28318530717958647692 * freq *
                                         (x * ca + y * sa) / size + phase);
            double blob = field[static_cast<std::int64_t>(y) * size + x];
            if (blob > 1.0) blob = 1.0;
            for (int ch = 0; ch < 3; ++ch) {
                double v = s.palette[0][static_cast<std::size_t>(ch)] * (1.0 - g) +
                           s.palette[1][static_cast<std::size_t>(ch)] * g;
                v += 0.5 * blob * (s.palette[2][static_cast<std::size_t>(ch)] - v);
                v += rng.uniform(-9.0, 9.0);
                if (v < 0) v = 0;
                if (v > 255) v = 255;
                img.at(y, x, ch) = static_cast<std::uint8_t>(v + 0.5);
            }
        }
    return img;
}

inline DefectSpec draw_defect(Rng& rng, int size) {
    DefectSpec d;
    const double area = rng.uniform(0.008, 0.03) * size * size;
    const int kind = static_cast<int>(rng.uniform_index(3));
    d.mode = rng.bernoulli(0.5) ? "color_shift" : "invert";
    if (d.mode == "color_shift")
        for (auto& s : d.shift) {
            s = static_cast<int>(rng.uniform(18.0, 46.0));
            if (rng.bernoulli(0.5)) s = -s;
        }
    if (kind == 0) {
        d.kind = "rect";
        const double aspect = rng.uniform(0.5, 2.0);
        double w = std::sqrt(area * aspect), h = area / w;
        w = std::min(w, size - 2.0);
        h = std::min(h, size - 2.0);
        d.x0 = rng.uniform(1.0, size - 1.0 - w);
        d.y0 = rng.uniform(1.0, size - 1.0 - h);
        d.x1 = d.x0 + w;
        d.y1 = d.y0 + h;
    } else if (kind == 1) {
        d.kind = "ellipse";
        const double aspect = rng.uniform(0.5, 2.0);
        double a = std::sqrt(area * aspect / 3.14159265358979323846);
        double b = area / (3.14159265358979323846 * a);
        a = std::min(a, size / 2.0 - 1.0);
        b = std::min(b, size / 2.0 - 1.0);
        const double cx = rng.uniform(a + 1.0, size - 1.0 - a);
        const double cy = rng.uniform(b + 1.0, size - 1.0 - b);
        d.x0 = cx - a;
        d.x1 = cx + a;
        d.y0 = cy - b;
        d.y1 = cy + b;
    } else {
        d.kind = "scratch";
        d.thickness = rng.uniform(1.0, 3.0);
        const double len = std::min(area / (2.0 * d.thickness), size * 0.9);
        const double theta = rng.uniform() * 6.28318530717958647692;
        double cx = rng.uniform(size * 0.2, size * 0.8);
        double cy = rng.uniform(size * 0.2, size * 0.8);
        d.x0 = cx - 0.5 * len * std::cos(theta);
        d.y0 = cy - 0.5 * len * std::sin(theta);
        d.x1 = cx + 0.5 * len * std::cos(theta);
        d.y1 = cy + 0.5 * len * std::sin(theta);
        for (double* v : {&d.x0, &d.y0, &d.x1, &d.y1}) {
            if (*v < 1.0) *v = 1.0;
            if (*v > size - 1.0) *v = size - 1.0;
        }
    }
    return d;
}

// defect sets are redrawn until the union area lands inside the clamp window
inline std::vector<DefectSpec> draw_defect_set(Rng& rng, int size,
                                               Tensor<std::uint8_t>* mask_out) {
    const auto total = static_cast<double>(size) * size;
    for (int attempt = 0; attempt < 64; ++attempt) {
        const int count = static_cast<int>(rng.uniform_index(3)) + 1;
        std::vector<DefectSpec> defects;
        for (int i = 0; i < count; ++i) defects.push_back(draw_defect(rng, size));
        auto mask = rasterize_defects(defects, size);
        std::int64_t covered = 0;
        for (auto m : mask.data) covered += m;
        const double frac = static_cast<double>(covered) / total;
        if (frac >= 0.005 && frac <= 0.10) {
            *mask_out = std::move(mask);
            return defects;
        }
    }
    // deterministic fallback: one centered rectangle of 2% area
    DefectSpec d;
    d.kind = "rect";
    d.mode = "invert";
    const double w = std::sqrt(0.02) * size;
    d.x0 = size / 2.0 - w / 2.0;
    d.x1 = d.x0 + w;
    d.y0 = size / 2.0 - w / 2.0;
    d.y1 = d.y0 + w;
    std::vector<DefectSpec> defects = {d};
    *mask_out = rasterize_defects(defects, size);
    return defects;
}

inline void apply_defects(ImageU8& img, const Tensor<std::uint8_t>& mask,
                          const std::vector<DefectSpec>& defects) {
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            if (!mask[static_cast<std::int64_t>(y) * img.w + x]) continue;
            const DefectSpec* owner = nullptr;
            for (const auto& d : defects)
                if (defect_covers(d, x, y)) {
                    owner = &d;
                    break;
                }
            for (int ch = 0; ch < 3; ++ch) {
                int v = img.at(y, x, ch);
                if (owner->mode == "invert") {
                    v = 255 - v;
                } else {
                    v += owner->shift[static_cast<std::size_t>(ch)];
                    if (v < 0) v = 0;
                    if (v > 255) v = 255;
                }
                img.at(y, x, ch) = static_cast<std::uint8_t>(v);
            }
        }
}

inline std::string index_name(int i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%03d", i);
    return buf;
}

}  // namespace detail

// writes an MVTec-layout synthetic dataset; returns the manifest
inline nlohmann::json synth_dataset(const SynthSpec& spec, const std::string& root) {
    namespace fs = std::filesystem;
    spec.validate();
    const int size = spec.image_size;
    const int good_test = spec.test_per_class / 2;
    const int defect_test = spec.test_per_class - good_test;

    nlohmann::json manifest;
    manifest["classes"] = spec.classes;
    manifest["train_per_class"] = spec.train_per_class;
    manifest["test_per_class"] = spec.test_per_class;
    manifest["good_test_per_class"] = good_test;
    manifest["image_size"] = size;
    manifest["seed"] = spec.seed;
    manifest["class_names"] = nlohmann::json::array();
    manifest["defects"] = nlohmann::json::object();

    for (int c = 0; c < spec.classes; ++c) {
        const std::string cls = "class_" + std::to_string(c);
        manifest["class_names"].push_back(cls);
        const auto style = detail::class_style(spec.seed, c);
        fs::create_directories(fs::path(root) / cls / "train" / "good");
        fs::create_directories(fs::path(root) / cls / "test" / "good");
        fs::create_directories(fs::path(root) / cls / "test" / "defect");
        fs::create_directories(fs::path(root) / cls / "ground_truth" / "defect");

        const std::uint64_t cls_seed = derive_seed(spec.seed, "class", static_cast<std::uint64_t>(c));
        for (int i = 0; i < spec.train_per_class; ++i) {
            Rng rng(derive_seed(cls_seed, "train", static_cast<std::uint64_t>(i)));
            auto img = detail::normal_texture(style, size, rng);
            write_png((fs::path(root) / cls / "train" / "good" /
                       (detail::index_name(i) + ".png")).string(), img);
        }
        for (int i = 0; i < good_test; ++i) {
            Rng rng(derive_seed(cls_seed, "test_good", static_cast<std::uint64_t>(i)));
            auto img = detail::normal_texture(style, size, rng);
            write_png((fs::path(root) / cls / "test" / "good" /
                       (detail::index_name(i) + ".png")).string(), img);
        }
        for (int i = 0; i < defect_test; ++i) {
            Rng rng(derive_seed(cls_seed, "test_defect", static_cast<std::uint64_t>(i)));
            auto img = detail::normal_texture(style, size, rng);
            Tensor<std::uint8_t> mask({size, size});
            auto defects = detail::draw_defect_set(rng, size, &mask);
            detail::apply_defects(img, mask, defects);
            const std::string name = detail::index_name(i);
            write_png((fs::path(root) / cls / "test" / "defect" / (name + ".png")).string(),
                      img);
            ImageU8 mask_img(size, size, 1);
            for (std::int64_t p = 0; p < mask.numel(); ++p)
                mask_img.data[static_cast<std::size_t>(p)] = mask[p] ? 255 : 0;
            write_png((fs::path(root) / cls / "ground_truth" / "defect" /
                       (name + "_mask.png")).string(), mask_img);
            manifest["defects"][cls + "/test/defect/" + name] = defects;
        }
    }

    std::ofstream os((fs::path(root) / "manifest.json").string());
    if (!os) throw DataError("synth_dataset: cannot write manifest in " + root);
    os << manifest.dump(2) << '\n';
    return manifest;
}

}  // namespace dinomaly
