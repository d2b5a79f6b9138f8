#pragma once

#include <stdexcept>
#include <string>

namespace diffscale {

// Error taxonomy shared by every module. The CLI maps these onto exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

class DomainError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class UsageError : public Error {
public:
    using Error::Error;
};

/// Raised when a NaN/Inf shows up in a pipeline stage.
class NumericalError : public Error {
public:
    using Error::Error;
};

/// A required on-disk artifact (dataset, checkpoint) is absent.
class MissingInputError : public Error {
public:
    using Error::Error;
};

class FormatError : public Error {
public:
    using Error::Error;
};

class BadMagicError : public FormatError {
public:
    using FormatError::FormatError;
};

class BadVersionError : public FormatError {
public:
    using FormatError::FormatError;
};

class TruncatedError : public FormatError {
public:
    using FormatError::FormatError;
};

} // namespace diffscale
