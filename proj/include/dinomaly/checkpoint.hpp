#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "dinomaly/layers.hpp"
#include "dinomaly/tensor.hpp"
#include "json.hpp"

namespace dinomaly {

inline constexpr char kCheckpointMagic[8] = {'D', 'I', 'N', 'O', 'C', 'K', 'P', 'T'};

namespace detail {

inline void write_u64_le(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t read_u64_le(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

inline void write_f32_le(std::ostream& os, const float* p, std::size_t n) {
    std::vector<unsigned char> buf(n * 4);
    for (std::size_t i = 0; i < n; ++i) {
        std::uint32_t bits;
        std::memcpy(&bits, &p[i], 4);
        buf[4 * i + 0] = static_cast<unsigned char>(bits & 0xff);
        buf[4 * i + 1] = static_cast<unsigned char>((bits >> 8) & 0xff);
        buf[4 * i + 2] = static_cast<unsigned char>((bits >> 16) & 0xff);
        buf[4 * i + 3] = static_cast<unsigned char>((bits >> 24) & 0xff);
    }
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

inline void read_f32_le(std::istream& is, float* p, std::size_t n) {
    std::vector<unsigned char> buf(n * 4);
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    for (std::size_t i = 0; i < n; ++i) {
        std::uint32_t bits = static_cast<std::uint32_t>(buf[4 * i + 0]) |
                             (static_cast<std::uint32_t>(buf[4 * i + 1]) << 8) |
                             (static_cast<std::uint32_t>(buf[4 * i + 2]) << 16) |
                             (static_cast<std::uint32_t>(buf[4 * i + 3]) << 24);
        std::memcpy(&p[i], &bits, 4);
    }
}

}  // namespace detail

struct Checkpoint {
    nlohmann::json meta;
    std::vector<std::pair<std::string, Tensor<float>>> tensors;

    const Tensor<float>* find(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return &t;
        return nullptr;
    }
};

template <typename T>
void save_checkpoint(const std::string& path, const std::vector<ParamRef<T>>& params,
                     const nlohmann::json& meta) {
    nlohmann::json header;
    header["meta"] = meta;
    header["dtype"] = "f32";
    header["tensors"] = nlohmann::json::array();
    for (const auto& pr : params) {
        nlohmann::json entry;
        entry["name"] = pr.name;
        entry["shape"] = pr.p->shape;
        header["tensors"].push_back(entry);
    }
    const std::string header_text = header.dump();

    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("checkpoint: cannot open for write: " + path);
    os.write(kCheckpointMagic, 8);
    detail::write_u64_le(os, header_text.size());
    os.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    std::vector<float> scratch;
    for (const auto& pr : params) {
        const auto n = static_cast<std::size_t>(pr.p->numel());
        scratch.resize(n);
        for (std::size_t i = 0; i < n; ++i)
            scratch[i] = static_cast<float>(pr.p->data[i]);
        detail::write_f32_le(os, scratch.data(), n);
    }
    if (!os) throw DataError("checkpoint: write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("checkpoint: cannot open: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw DataError("checkpoint: bad magic in " + path);
    const std::uint64_t len = detail::read_u64_le(is);
    std::string header_text(len, '\0');
    is.read(header_text.data(), static_cast<std::streamsize>(len));
    if (!is) throw DataError("checkpoint: truncated header in " + path);

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_text);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("checkpoint: invalid header json: ") + e.what());
    }
    Checkpoint ckpt;
    ckpt.meta = header.value("meta", nlohmann::json::object());
    for (const auto& entry : header.at("tensors")) {
        const std::string name = entry.at("name").get<std::string>();
        const auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
        Tensor<float> t(shape);
        detail::read_f32_le(is, t.data.data(), static_cast<std::size_t>(t.numel()));
        if (!is) throw DataError("checkpoint: truncated tensor " + name + " in " + path);
        ckpt.tensors.emplace_back(name, std::move(t));
    }
    return ckpt;
}

template <typename T>
void load_params(const Checkpoint& ckpt, std::vector<ParamRef<T>>& params) {
    if (ckpt.tensors.size() != params.size())
        throw DataError("checkpoint: tensor count mismatch (" +
                        std::to_string(ckpt.tensors.size()) + " stored, " +
                        std::to_string(params.size()) + " expected)");
    for (auto& pr : params) {
        const Tensor<float>* t = ckpt.find(pr.name);
        if (!t) throw DataError("checkpoint: missing tensor " + pr.name);
        if (t->shape != pr.p->shape)
            throw DataError("checkpoint: shape mismatch for " + pr.name);
        for (std::int64_t i = 0; i < t->numel(); ++i)
            pr.p->data[static_cast<std::size_t>(i)] = static_cast<T>(t->data[static_cast<std::size_t>(i)]);
    }
}

}  // namespace dinomaly
