#pragma once

#include <stdexcept>
#include <string>

namespace cdd {

// Bad user input: malformed config files, missing keys, invalid values.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite values showed up where finite arithmetic was required.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Structurally incompatible inputs: checkpoint/config topology mismatches.
struct CompatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor shape violations inside the math layer.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

}  // namespace cdd
