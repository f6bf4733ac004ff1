#pragma once

#include <stdexcept>
#include <string>

namespace flexkd {

// Error taxonomy shared across the library. The CLI maps these onto exit
// codes (config -> 2, data -> 3, numeric -> 4).
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape, rank or axis violations.
struct DimensionError : Error {
    using Error::Error;
};

// Invalid configuration, plan wiring or checksum mismatches.
struct ConfigError : Error {
    using Error::Error;
};

// Malformed datasets, files, labels or targets.
struct DataError : Error {
    using Error::Error;
};

// Non-finite values or training divergence.
struct NumericError : Error {
    using Error::Error;
};

// Tape misuse (node not recorded on the tape queried, non-scalar loss).
struct GraphError : Error {
    using Error::Error;
};

}  // namespace flexkd
