#pragma once

#include <array>

#include "dinomaly/image.hpp"
#include "dinomaly/scoring.hpp"

namespace dinomaly {

struct PreprocessSpec {
    int resize_to = 448;
    int crop_to = 392;
    std::array<double, 3> mean = {0.485, 0.456, 0.406};
    std::array<double, 3> stddev = {0.229, 0.224, 0.225};

    void validate() const {
        if (resize_to <= 0 || crop_to <= 0)
            throw ConfigError("preprocess: sizes must be positive");
        if (crop_to > resize_to)
            throw ConfigError("preprocess: crop " + std::to_string(crop_to) +
                              " exceeds resize " + std::to_string(resize_to));
        for (double s : stddev)
            if (s <= 0) throw ConfigError("preprocess: stddev must be positive");
    }
};

// [3, crop, crop] float tensor; grayscale inputs are replicated across channels
inline Tensor<float> preprocess(const ImageU8& img, const PreprocessSpec& spec) {
    spec.validate();
    if (img.h <= 0 || img.w <= 0 || img.data.empty())
        throw DataError("preprocess: empty image");
    const int r = spec.resize_to, cr = spec.crop_to;

    Tensor<double> plane({img.h, img.w});
    Tensor<double> resized({r, r});
    Tensor<float> out({3, cr, cr});
    const int off_y = (r - cr) / 2, off_x = (r - cr) / 2;
    for (int ch = 0; ch < 3; ++ch) {
        const int src_ch = img.c == 3 ? ch : 0;
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x)
                plane[static_cast<std::int64_t>(y) * img.w + x] =
                    static_cast<double>(img.at(y, x, src_ch)) / 255.0;
        bilinear_resize_plane(plane.ptr(), img.h, img.w, resized.data.data(), r, r);
        for (int y = 0; y < cr; ++y)
            for (int x = 0; x < cr; ++x) {
                const double v = resized[static_cast<std::int64_t>(y + off_y) * r + (x + off_x)];
                out[(static_cast<std::int64_t>(ch) * cr + y) * cr + x] = static_cast<float>(
                    (v - spec.mean[static_cast<std::size_t>(ch)]) /
                    spec.stddev[static_cast<std::size_t>(ch)]);
            }
    }
    return out;
}

}  // namespace dinomaly
