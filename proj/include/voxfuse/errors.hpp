#pragma once

#include <stdexcept>
#include <string>

namespace voxfuse {

// Non-finite values where finite ones are required (inputs, features, losses).
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// Mismatched shapes, empty inputs, misaligned key sets.
struct DimensionError : std::invalid_argument {
    explicit DimensionError(const std::string& what) : std::invalid_argument(what) {}
};

// Invalid configuration values (learning rate, class counts, unknown keys).
struct ConfigError : std::invalid_argument {
    explicit ConfigError(const std::string& what) : std::invalid_argument(what) {}
};

// Corrupt or incompatible files (version, checksum, truncation).
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace voxfuse
