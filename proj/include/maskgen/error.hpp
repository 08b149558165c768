#pragma once

#include <stdexcept>
#include <string>

namespace maskgen {

/// Bad input or violated precondition. The CLI maps this to exit code 2.
class ValidationError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Failure while executing an otherwise valid request (I/O, divergence,
/// non-finite activations). The CLI maps this to exit code 3.
class RuntimeFailure : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace maskgen
