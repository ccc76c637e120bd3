#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace hjbcert {

/// Root of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bad input or configuration. The CLI maps these to exit code 2.
class InputError : public Error {
public:
    using Error::Error;
};

/// A numerical procedure failed on valid input. The CLI maps these to exit code 3.
class ComputeError : public Error {
public:
    using Error::Error;
};

class DomainError : public InputError {
public:
    using InputError::InputError;
};

class ArgumentError : public InputError {
public:
    using InputError::InputError;
};

class ConfigError : public InputError {
public:
    using InputError::InputError;
};

class UnsupportedError : public InputError {
public:
    using InputError::InputError;
};

class NumericalError : public ComputeError {
public:
    NumericalError(const std::string& what, std::size_t slice)
        : ComputeError(what + " (slice " + std::to_string(slice) + ")"), slice_index(slice) {}

    std::size_t slice_index;
};

}  // namespace hjbcert
