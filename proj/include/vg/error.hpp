#pragma once

#include <stdexcept>
#include <string>

namespace vg {

// Shape/dimension mismatches between operands.
struct DimError : std::runtime_error {
    explicit DimError(const std::string& msg) : std::runtime_error("dimension error: " + msg) {}
};

// Violated call contract (non-scalar loss, empty prediction list, ...).
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error("contract error: " + msg) {}
};

// Bad configuration values (odd encoding dim, indivisible image size, ...).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

// Malformed files (datasets, checkpoints).
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error("format error: " + msg) {}
};

// Non-finite values where finite ones are required.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error("numeric error: " + msg) {}
};

// Rejection-sampling budget exhausted.
struct GenerationError : std::runtime_error {
    explicit GenerationError(const std::string& msg) : std::runtime_error("generation error: " + msg) {}
};

// Unknown tokens or token ids.
struct VocabError : std::runtime_error {
    explicit VocabError(const std::string& msg) : std::runtime_error("vocabulary error: " + msg) {}
};

// Sequences exceeding the configured maximum.
struct LengthError : std::runtime_error {
    explicit LengthError(const std::string& msg) : std::runtime_error("length error: " + msg) {}
};

}  // namespace vg
