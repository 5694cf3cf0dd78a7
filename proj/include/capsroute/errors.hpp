#pragma once

#include <stdexcept>
#include <string>

namespace capsroute {

// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor extents do not line up (always carries both shapes in the message).
struct ShapeError : Error {
    using Error::Error;
};

// Bad value: non-finite data, out-of-range label, invalid config field.
struct ValueError : Error {
    using Error::Error;
};

// An operation was called outside its contract (r = 0 iterations, non-scalar loss, ...).
struct ContractError : Error {
    using Error::Error;
};

// File-format or filesystem failure.
struct IoError : Error {
    using Error::Error;
};

} // namespace capsroute
