#pragma once

#include <stdexcept>
#include <string>

namespace sstlm {

// Base error for everything raised by this library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Tensor shape / rank mismatches.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Bad values: non-finite results, domain violations, malformed inputs.
class ValueError : public Error {
public:
    using Error::Error;
};

// Cache position/ordering violations.
class OrderError : public Error {
public:
    using Error::Error;
};

// Bad run configuration (unknown keys, invalid combinations). CLI maps this to exit 2.
class ConfigError : public Error {
public:
    using Error::Error;
};

// File I/O and serialization failures.
class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace sstlm
