#pragma once

#include <stdexcept>
#include <string>

namespace vfl {

// Violated call contract: bad arguments, mismatched configs, out-of-range
// indices and the like. The CLI maps these to exit code 2.
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : ContractError {
    explicit ShapeError(const std::string& msg) : ContractError(msg) {}
};

struct RangeError : ContractError {
    explicit RangeError(const std::string& msg) : ContractError(msg) {}
};

struct CapacityError : ContractError {
    explicit CapacityError(const std::string& msg) : ContractError(msg) {}
};

// A sample could not be generated under the requested constraints.
struct GenerationError : ContractError {
    explicit GenerationError(const std::string& msg) : ContractError(msg) {}
};

// Training produced a non-finite loss.
struct DivergenceError : std::runtime_error {
    explicit DivergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

// Filesystem trouble: missing files, failed writes. CLI exit code 1.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed on-disk data: bad magic, truncated payload, invalid JSON.
struct FormatError : IoError {
    explicit FormatError(const std::string& msg) : IoError(msg) {}
};

}  // namespace vfl
