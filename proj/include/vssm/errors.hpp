#pragma once

#include <stdexcept>
#include <string>

namespace vssm {

/// Caller violated a precondition (bad shape, out-of-range argument, ...).
struct UsageError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// A computation produced or received non-finite values.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// A file or byte stream does not follow the expected layout.
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// A file could not be opened, read, or written.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& what) {
    if (!cond) throw UsageError(what);
}

}  // namespace vssm
