#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "dinomaly/checkpoint.hpp"
#include "dinomaly/dataset.hpp"
#include "dinomaly/model.hpp"
#include "dinomaly/preprocess.hpp"

namespace dinomaly {

struct ToyVitConfig {
    int depth = 12;
    std::int64_t d = 64;
    int patch = 14;
    int image = 112;
    int heads = 1;
    std::uint64_t seed = 0;

    void validate() const {
        if (depth < 1 || d < 1 || patch < 1 || image < patch)
            throw ConfigError("toy_vit: bad geometry");
        if (image % patch != 0)
            throw ConfigError("toy_vit: image size " + std::to_string(image) +
                              " not divisible by patch " + std::to_string(patch));
    }
};

// frozen random-initialized ViT; exposes forward only
template <typename T = float>
class ToyVit {
  public:
    explicit ToyVit(const ToyVitConfig& cfg) : cfg_(cfg), patch_embed_(3LL * cfg.patch * cfg.patch, cfg.d) {
        cfg_.validate();
        const int grid = cfg_.image / cfg_.patch;
        grid_ = grid;
        pos_ = Tensor<T>({static_cast<std::int64_t>(grid) * grid, cfg_.d});
        Rng rng(derive_seed(cfg_.seed, "toy_vit"));
        patch_embed_.init(rng);
        fill_trunc_normal(pos_, rng, T(0.02));
        blocks_.reserve(static_cast<std::size_t>(cfg_.depth));
        for (int i = 0; i < cfg_.depth; ++i) {
            blocks_.emplace_back(cfg_.d, cfg_.heads, AttentionKindSpec{});
            blocks_.back().init(rng);
        }
    }

    int layer_count() const { return cfg_.depth; }
    int grid_size() const { return grid_; }
    const ToyVitConfig& config() const { return cfg_; }

    // image [3, H, W] -> one TokenGrid per layer, batch 1
    std::vector<TokenGrid<T>> encode_image(const Tensor<T>& chw) const {
        if (chw.rank() != 3 || chw.shape[0] != 3 || chw.shape[1] != cfg_.image ||
            chw.shape[2] != cfg_.image)
            throw InputError("toy_vit: expected [3," + std::to_string(cfg_.image) + "," +
                             std::to_string(cfg_.image) + "] input, got " + chw.shape_str());
        const int p = cfg_.patch, grid = grid_;
        const std::int64_t n = static_cast<std::int64_t>(grid) * grid;
        Tensor<T> patches({1, n, 3LL * p * p});
        for (int gy = 0; gy < grid; ++gy)
            for (int gx = 0; gx < grid; ++gx) {
                T* dst = patches.ptr() + (static_cast<std::int64_t>(gy) * grid + gx) * 3 * p * p;
                for (int c = 0; c < 3; ++c)
                    for (int y = 0; y < p; ++y)
                        for (int x = 0; x < p; ++x)
                            *dst++ = chw[(static_cast<std::int64_t>(c) * cfg_.image +
                                          gy * p + y) * cfg_.image + gx * p + x];
            }
        // frozen forward; caches are irrelevant, so const_cast keeps the API honest
        auto* self = const_cast<ToyVit*>(this);
        Tensor<T> tokens = self->patch_embed_.forward(patches, false);
        tokens.shape = {1, n, cfg_.d};
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t c = 0; c < cfg_.d; ++c)
                tokens[i * cfg_.d + c] += pos_[i * cfg_.d + c];

        std::vector<TokenGrid<T>> layers;
        layers.reserve(static_cast<std::size_t>(cfg_.depth));
        TokenGrid<T> x(std::move(tokens), grid, grid);
        for (auto& block : self->blocks_) {
            x = block.forward(x, false);
            layers.push_back(x);
        }
        return layers;
    }

    std::uint64_t params_checksum() const {
        std::uint64_t h = 1469598103934665603ULL;
        auto mix = [&h](const Tensor<T>& t) {
            for (const T v : t.data) {
                std::uint64_t bits = 0;
                std::memcpy(&bits, &v, sizeof(T));
                h = (h ^ bits) * 1099511628211ULL;
            }
        };
        auto* self = const_cast<ToyVit*>(this);
        std::vector<ParamRef<T>> refs;
        self->patch_embed_.collect_params("patch_embed", refs);
        for (std::size_t i = 0; i < self->blocks_.size(); ++i)
            self->blocks_[i].collect_params("block" + std::to_string(i), refs);
        for (const auto& r : refs) mix(*r.p);
        mix(pos_);
        return h;
    }

  private:
    ToyVitConfig cfg_;
    int grid_ = 0;
    Linear<T> patch_embed_;
    Tensor<T> pos_;
    std::vector<TransformerLayer<T>> blocks_;
};

inline constexpr char kFeatureCacheMagic[8] = {'D', 'I', 'N', 'O', 'F', 'C', '0', '1'};

inline std::string feature_cache_path(const std::string& dir, const std::string& id) {
    std::string flat = id;
    for (auto& ch : flat)
        if (ch == '/') ch = '~';
    return (std::filesystem::path(dir) / (flat + ".dfc")).string();
}

inline void write_feature_cache(const std::string& dir, const std::string& id,
                                const std::vector<TokenGrid<float>>& layers) {
    if (layers.empty()) throw InputError("feature cache: no layers for " + id);
    std::filesystem::create_directories(dir);
    nlohmann::json header;
    header["id"] = id;
    header["layers"] = layers.size();
    header["grid_h"] = layers[0].grid_h;
    header["grid_w"] = layers[0].grid_w;
    header["d"] = layers[0].dim();
    header["dtype"] = "f32";
    const std::string text = header.dump();
    const std::string path = feature_cache_path(dir, id);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("feature cache: cannot open for write: " + path);
    os.write(kFeatureCacheMagic, 8);
    detail::write_u64_le(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& layer : layers) {
        if (layer.batch() != 1)
            throw InputError("feature cache: per-sample grids must have batch 1");
        if (!layer.same_layout(layers[0]))
            throw InputError("feature cache: layer layout mismatch for " + id);
        detail::write_f32_le(os, layer.data.data.data(),
                             static_cast<std::size_t>(layer.data.numel()));
    }
    if (!os) throw DataError("feature cache: write failed: " + path);
}

inline std::vector<TokenGrid<float>> read_feature_cache(const std::string& dir,
                                                        const std::string& id) {
    const std::string path = feature_cache_path(dir, id);
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("feature cache miss: sample " + id + " (expected " + path + ")");
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kFeatureCacheMagic, 8) != 0)
        throw DataError("feature cache: bad magic in " + path);
    const std::uint64_t len = detail::read_u64_le(is);
    std::string text(len, '\0');
    is.read(text.data(), static_cast<std::streamsize>(len));
    if (!is) throw DataError("feature cache: truncated header in " + path);
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("feature cache: invalid header: ") + e.what());
    }
    const auto layer_count = header.at("layers").get<std::size_t>();
    const int gh = header.at("grid_h").get<int>();
    const int gw = header.at("grid_w").get<int>();
    const auto d = header.at("d").get<std::int64_t>();
    std::vector<TokenGrid<float>> layers;
    layers.reserve(layer_count);
    for (std::size_t li = 0; li < layer_count; ++li) {
        TokenGrid<float> g(1, gh, gw, d);
        detail::read_f32_le(is, g.data.data.data(), static_cast<std::size_t>(g.data.numel()));
        if (!is)
            throw DataError("feature cache: sample " + id + " truncated at layer " +
                            std::to_string(li));
        layers.push_back(std::move(g));
    }
    return layers;
}

// frozen feature source: toy ViT over PNG files, or an on-disk feature cache
class EncoderBackend {
  public:
    static EncoderBackend toy_vit(const ToyVitConfig& cfg, PreprocessSpec pre) {
        EncoderBackend b;
        b.vit_ = std::make_shared<ToyVit<float>>(cfg);
        b.pre_ = pre;
        return b;
    }

    static EncoderBackend feature_cache(const std::string& dir, int layer_count) {
        if (layer_count < 1) throw ConfigError("feature_cache: layer_count must be >= 1");
        EncoderBackend b;
        b.cache_dir_ = dir;
        b.cache_layers_ = layer_count;
        return b;
    }

    bool is_toy() const { return vit_ != nullptr; }
    int layer_count() const { return vit_ ? vit_->layer_count() : cache_layers_; }
    const ToyVit<float>* toy() const { return vit_.get(); }

    std::vector<TokenGrid<float>> features_for(const SampleRecord& record) const {
        if (vit_) {
            const ImageU8 img = read_png(record.image_path);
            return vit_->encode_image(preprocess(img, pre_));
        }
        auto layers = read_feature_cache(cache_dir_, record.id);
        if (static_cast<int>(layers.size()) != cache_layers_)
            throw DataError("feature cache: sample " + record.id + " has " +
                            std::to_string(layers.size()) + " layers, expected " +
                            std::to_string(cache_layers_));
        return layers;
    }

  private:
    // created non-const so the cache-skipping const_cast in forward stays defined
    std::shared_ptr<ToyVit<float>> vit_;
    PreprocessSpec pre_;
    std::string cache_dir_;
    int cache_layers_ = 0;
};

}  // namespace dinomaly
