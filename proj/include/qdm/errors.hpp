#pragma once

#include <stdexcept>
#include <string>

namespace qdm {

// Error taxonomy; the CLI maps these onto exit codes
// (usage errors = 1, data/shape/config = 2, numeric failures = 3).
struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// t outside [1, T] in a diffusion step
struct StepError : std::out_of_range {
    using std::out_of_range::out_of_range;
};

// unreadable files, malformed containers, bad pixel data
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// NaN/Inf where finite values are required
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace qdm
