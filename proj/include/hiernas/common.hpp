#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace hiernas {

inline constexpr const char* kEngineVersion = "0.1.0";

// Exit-code contract shared with the CLI: scripts branch on these.
enum class ExitCode : int {
    ok = 0,
    usage = 2,
    validation = 3,
    numeric = 4,
};

struct InvalidArgumentError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ResourceLimitError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// FNV-1a, used for provenance hashes of snapshot files.
inline std::uint64_t fnv1a(const std::string& bytes) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace hiernas
