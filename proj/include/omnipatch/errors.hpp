#pragma once

#include <stdexcept>
#include <string>

namespace omnipatch {

// Invalid parameters / malformed configuration detected before any work.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// A module was handed inputs violating another module's documented contract
// (e.g. attention requested from a CNN handle).
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// File ingestion / persistence failures.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values where finite math is required (divergent training, NaN
// gradients).
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace omnipatch
