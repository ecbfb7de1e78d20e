#pragma once

#include <stdexcept>
#include <string>

namespace dala {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes or sizes.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration value (ratio, kernel size, stage index...).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Invalid data handed to an operation (out-of-range label, empty map...).
class InputError : public Error {
public:
    using Error::Error;
};

/// API misuse, e.g. backward on a tensor with no recorded lineage.
class UsageError : public Error {
public:
    using Error::Error;
};

/// An operation produced NaN or Inf.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Filesystem or codec failure. The message always carries the path.
class IoError : public Error {
public:
    using Error::Error;
};

/// Malformed checkpoint or manifest file.
class FormatError : public Error {
public:
    using Error::Error;
};

}  // namespace dala
