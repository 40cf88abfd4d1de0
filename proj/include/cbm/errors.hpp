#pragma once

#include <stdexcept>
#include <string>

namespace cbm {

// Shape/dimension violations detected before any data is touched.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Invalid argument values: bad probabilities, degenerate vectors,
// out-of-range labels, malformed specs.
struct ValueError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Parse failures for CSV / config files; message carries file:line context.
struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace cbm
