#pragma once

#include <stdexcept>
#include <string>

namespace avstyle {

// Shape/axis disagreements between tensors or against a model config.
struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Caller broke a documented precondition (empty input, missing grads, bad template, ...).
struct UsageError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Input is valid in shape but numerically degenerate (near-zero norm etc).
struct DegenerateInputError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// NaN/Inf appeared where finite values are required.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace avstyle
