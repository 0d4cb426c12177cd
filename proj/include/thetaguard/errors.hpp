#pragma once

#include <stdexcept>
#include <string>

namespace thetaguard {

// Malformed, inconsistent or non-finite input data. Maps to CLI exit code 2.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// A computation that is undefined for the given input (rank deficiency,
// degenerate variance, singular covariance). Maps to CLI exit code 3.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Caller violated an operation precondition (bad K, bad grid, bad flag value).
class UsageError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Prefixes the message of a caught thetaguard error with extra context and
// rethrows it as the same category.
[[noreturn]] void rethrow_with_context(const std::string& context);

} // namespace thetaguard
