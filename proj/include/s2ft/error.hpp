#pragma once

#include <stdexcept>
#include <string>

namespace s2ft {

/// Base of every error thrown by the engine. The CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand dimensions do not conform.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Argument outside its documented domain (ratio out of range, bad index, missing data).
class ArgumentError : public Error {
public:
    using Error::Error;
};

/// Invalid model or experiment configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Non-finite values, solver non-convergence, divergence.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Operation not valid in the current object state (stale tape, double fuse).
class StateError : public Error {
public:
    using Error::Error;
};

/// Data does not match what it claims to be derived from.
class IntegrityError : public Error {
public:
    using Error::Error;
};

/// Unknown key in a registry or map.
class LookupError : public Error {
public:
    using Error::Error;
};

/// A theorem hypothesis is not met by the supplied instance.
class PreconditionError : public Error {
public:
    using Error::Error;
};

/// Malformed file on disk.
class FormatError : public Error {
public:
    using Error::Error;
};

}  // namespace s2ft
