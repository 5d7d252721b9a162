#pragma once

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

#include "dinomaly/image.hpp"
#include "dinomaly/tensor.hpp"

namespace dinomaly {

struct SampleRecord {
    std::string id;          // class/split/defect_type/stem
    std::string class_name;
    std::string split;       // train | test
    int label = 0;           // 0 normal, 1 anomalous
    std::string image_path;
    std::string mask_path;   // empty for normal samples
};

struct DatasetIndex {
    std::vector<SampleRecord> records;
    std::vector<std::string> classes;

    std::vector<const SampleRecord*> select(const std::string& class_name,
                                            const std::string& split) const {
        std::vector<const SampleRecord*> out;
        for (const auto& r : records)
            if ((class_name.empty() || r.class_name == class_name) &&
                (split.empty() || r.split == split))
                out.push_back(&r);
        return out;
    }
};

namespace detail {

inline std::vector<std::filesystem::path> sorted_entries(const std::filesystem::path& dir,
                                                         bool dirs_only) {
    std::vector<std::filesystem::path> out;
    if (!std::filesystem::exists(dir)) return out;
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
        if (dirs_only != e.is_directory()) continue;
        if (e.path().filename().string().front() == '.') continue;
        out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

inline std::string find_mask_for(const std::filesystem::path& gt_dir, const std::string& stem) {
    namespace fs = std::filesystem;
    for (const auto& candidate :
         {stem + "_mask.png", stem + ".png", stem + "_mask.PNG"}) {
        const auto p = gt_dir / candidate;
        if (fs::exists(p)) return p.string();
    }
    return "";
}

}  // namespace detail

inline DatasetIndex load_mvtec_layout(const std::string& root) {
    namespace fs = std::filesystem;
    if (!fs::exists(root)) throw DataError("dataset: root does not exist: " + root);
    DatasetIndex index;

    for (const auto& cls_dir : detail::sorted_entries(root, true)) {
        if (!fs::exists(cls_dir / "train") || !fs::exists(cls_dir / "test")) continue;
        const std::string cls = cls_dir.filename().string();
        std::size_t before = index.records.size();

        for (const auto& img : detail::sorted_entries(cls_dir / "train" / "good", false)) {
            SampleRecord r;
            r.class_name = cls;
            r.split = "train";
            r.label = 0;
            r.image_path = img.string();
            r.id = cls + "/train/good/" + img.stem().string();
            index.records.push_back(std::move(r));
        }
        if (index.records.size() == before)
            throw DataError("dataset: class " + cls + " has no training images");

        for (const auto& type_dir : detail::sorted_entries(cls_dir / "test", true)) {
            const std::string type = type_dir.filename().string();
            for (const auto& img : detail::sorted_entries(type_dir, false)) {
                SampleRecord r;
                r.class_name = cls;
                r.split = "test";
                r.image_path = img.string();
                r.id = cls + "/test/" + type + "/" + img.stem().string();
                if (type == "good") {
                    r.label = 0;
                } else {
                    r.label = 1;
                    const auto gt_dir = cls_dir / "ground_truth" / type;
                    if (!fs::exists(gt_dir))
                        throw DataError("dataset: missing ground_truth dir for " + cls + "/" +
                                        type);
                    r.mask_path = detail::find_mask_for(gt_dir, img.stem().string());
                    if (r.mask_path.empty())
                        throw DataError("dataset: no mask for anomalous image " + img.string());
                }
                index.records.push_back(std::move(r));
            }
        }
        index.classes.push_back(cls);
    }
    if (index.classes.empty()) throw DataError("dataset: no classes under " + root);
    return index;
}

// binary mask at the sample's native resolution (all-zero when no mask file)
inline Tensor<std::uint8_t> load_mask(const SampleRecord& record, int h, int w) {
    Tensor<std::uint8_t> mask({h, w});
    if (record.mask_path.empty()) return mask;
    const ImageU8 img = read_png(record.mask_path);
    if (img.h == h && img.w == w) {
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                mask[static_cast<std::int64_t>(y) * w + x] = img.at(y, x, 0) > 127 ? 1 : 0;
        return mask;
    }
    // nearest-neighbor resize keeps the mask binary
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            int sy = static_cast<int>((y + 0.5) * img.h / h);
            int sx = static_cast<int>((x + 0.5) * img.w / w);
            sy = std::min(sy, img.h - 1);
            sx = std::min(sx, img.w - 1);
            mask[static_cast<std::int64_t>(y) * w + x] = img.at(sy, sx, 0) > 127 ? 1 : 0;
        }
    return mask;
}

}  // namespace dinomaly
