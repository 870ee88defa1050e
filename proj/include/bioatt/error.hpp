#ifndef BIOATT_ERROR_HPP
#define BIOATT_ERROR_HPP

#include <stdexcept>
#include <string>

namespace bioatt {

// Bad arguments or shapes handed to a library call.
class UsageError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// File I/O failures and malformed containers (CTV, checkpoints, prior files).
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// A data invariant was violated: non-finite values, unnormalized priors, ...
class InvariantError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace bioatt

#endif  // BIOATT_ERROR_HPP
