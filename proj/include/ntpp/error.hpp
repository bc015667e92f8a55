#pragma once

#include <stdexcept>
#include <string>

namespace ntpp {

/// Malformed or inconsistent input data (bad records, ordering, marks).
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A computation produced a non-finite value or failed to converge.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Shape mismatches and other misuse of the tensor and model APIs.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

} // namespace ntpp
