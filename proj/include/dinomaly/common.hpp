#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace dinomaly {

// Error taxonomy. The CLI maps these onto process exit codes:
// ConfigError -> 1, DataError/InputError -> 2, NumericError -> 3.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct InputError : std::runtime_error {
    explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Counter for multiply-add style work performed by the attention kernels.
// Used by tests that assert complexity scaling on counted operations
// instead of wall clock.
struct FlopCounter {
    std::uint64_t projection = 0;  // q/k/v/out projections, O(N d^2)
    std::uint64_t core = 0;        // score/aggregation work, kind-dependent

    std::uint64_t total() const { return projection + core; }
    void reset() { projection = core = 0; }
};

}  // namespace dinomaly
