#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "dinomaly/common.hpp"
#include "dinomaly/rng.hpp"

namespace dinomaly {

// Dense row-major tensor. Small by design: the pipeline only needs
// contiguous storage plus shaped indexing; all heavy math goes through the
// gemm helpers below.
template <typename T>
struct Tensor {
    std::vector<std::int64_t> shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(std::vector<std::int64_t> s) : shape(std::move(s)) {
        data.assign(static_cast<std::size_t>(numel_of(shape)), T(0));
    }

    static std::int64_t numel_of(const std::vector<std::int64_t>& s) {
        std::int64_t n = 1;
        for (auto d : s) n *= d;
        return n;
    }

    static Tensor zeros(std::vector<std::int64_t> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<std::int64_t> s, T value) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), value);
        return t;
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    std::int64_t dim(std::size_t i) const { return shape.at(i); }
    std::size_t rank() const { return shape.size(); }

    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    T& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

    T& at3(std::int64_t i, std::int64_t j, std::int64_t k) {
        return data[static_cast<std::size_t>((i * shape[1] + j) * shape[2] + k)];
    }
    const T& at3(std::int64_t i, std::int64_t j, std::int64_t k) const {
        return data[static_cast<std::size_t>((i * shape[1] + j) * shape[2] + k)];
    }
    T& at2(std::int64_t i, std::int64_t j) {
        return data[static_cast<std::size_t>(i * shape[1] + j)];
    }
    const T& at2(std::int64_t i, std::int64_t j) const {
        return data[static_cast<std::size_t>(i * shape[1] + j)];
    }

    void fill(T value) { std::fill(data.begin(), data.end(), value); }
    void zero() { fill(T(0)); }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }

    bool all_finite() const {
        for (const T& v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << '[';
        for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
        os << ']';
        return os.str();
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

template <typename T>
void fill_normal(Tensor<T>& t, Rng& rng, double mean = 0.0, double stddev = 1.0) {
    for (auto& v : t.data) v = static_cast<T>(rng.normal(mean, stddev));
}

// Truncated normal init in [-2 std, 2 std], the usual ViT weight init.
template <typename T>
void fill_trunc_normal(Tensor<T>& t, Rng& rng, double stddev) {
    for (auto& v : t.data) {
        double x;
        do {
            x = rng.normal(0.0, stddev);
        } while (std::abs(x) > 2.0 * stddev);
        v = static_cast<T>(x);
    }
}

template <typename T>
void require_finite(const Tensor<T>& t, const char* what) {
    if (!t.all_finite()) throw InputError(std::string("non-finite values in ") + what);
}

namespace detail {
template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using CMap = Eigen::Map<const EMat<T>>;
template <typename T>
using MMap = Eigen::Map<EMat<T>>;
}  // namespace detail

// C[m,n] = A[m,k] * B[k,n]   (+= when accumulate)
template <typename T>
void gemm(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n,
          bool accumulate = false, std::uint64_t* flops = nullptr) {
    detail::CMap<T> ma(a, m, k), mb(b, k, n);
    detail::MMap<T> mc(c, m, n);
    if (accumulate)
        mc.noalias() += ma * mb;
    else
        mc.noalias() = ma * mb;
    if (flops) *flops += static_cast<std::uint64_t>(2) * m * k * n;
}

// C[m,n] = A^T[m,k] * B[k,n] with A stored as [k,m]
template <typename T>
void gemm_ta(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n,
             bool accumulate = false, std::uint64_t* flops = nullptr) {
    detail::CMap<T> ma(a, k, m), mb(b, k, n);
    detail::MMap<T> mc(c, m, n);
    if (accumulate)
        mc.noalias() += ma.transpose() * mb;
    else
        mc.noalias() = ma.transpose() * mb;
    if (flops) *flops += static_cast<std::uint64_t>(2) * m * k * n;
}

// C[m,n] = A[m,k] * B^T[k,n] with B stored as [n,k]
template <typename T>
void gemm_tb(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n,
             bool accumulate = false, std::uint64_t* flops = nullptr) {
    detail::CMap<T> ma(a, m, k), mb(b, n, k);
    detail::MMap<T> mc(c, m, n);
    if (accumulate)
        mc.noalias() += ma * mb.transpose();
    else
        mc.noalias() = ma * mb.transpose();
    if (flops) *flops += static_cast<std::uint64_t>(2) * m * k * n;
}

// Batched token sequences with a spatial layout: data is [B, N, d] with
// N = grid_h * grid_w. The common currency between encoder, bottleneck,
// decoder and loss.
template <typename T>
struct TokenGrid {
    Tensor<T> data;  // [B, N, d]
    int grid_h = 0;
    int grid_w = 0;

    TokenGrid() = default;
    TokenGrid(std::int64_t batch, int gh, int gw, std::int64_t dim)
        : data({batch, static_cast<std::int64_t>(gh) * gw, dim}), grid_h(gh), grid_w(gw) {}
    TokenGrid(Tensor<T> t, int gh, int gw) : data(std::move(t)), grid_h(gh), grid_w(gw) {
        validate();
    }

    void validate() const {
        if (data.rank() != 3)
            throw ConfigError("TokenGrid data must be [B, N, d], got " + data.shape_str());
        if (static_cast<std::int64_t>(grid_h) * grid_w != data.shape[1])
            throw ConfigError("TokenGrid: grid_h*grid_w != N (" + std::to_string(grid_h) + "*" +
                              std::to_string(grid_w) + " vs N=" + std::to_string(data.shape[1]) +
                              ")");
    }

    std::int64_t batch() const { return data.shape[0]; }
    std::int64_t tokens() const { return data.shape[1]; }
    std::int64_t dim() const { return data.shape[2]; }

    bool same_layout(const TokenGrid& o) const {
        return data.shape == o.data.shape && grid_h == o.grid_h && grid_w == o.grid_w;
    }
};

}  // namespace dinomaly
