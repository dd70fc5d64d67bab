#pragma once

#include <stdexcept>
#include <string>

namespace fiber {

// Shape or dtype of an operand does not satisfy an operation's precondition.
struct ShapeError : std::invalid_argument {
    explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

// An API contract was violated (non-scalar loss, re-used tape, dual-mode
// output where fused-mode is required, ...).
struct ContractError : std::logic_error {
    explicit ContractError(const std::string& msg) : std::logic_error(msg) {}
};

// Bad run configuration (unknown key, invalid value, incompatible stage).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad or missing data (dataset file, vocab, checkpoint payload).
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace fiber
