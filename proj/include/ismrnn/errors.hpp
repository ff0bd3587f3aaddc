#pragma once

#include <stdexcept>
#include <string>

namespace ismrnn {

// Base class for all library errors.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Incompatible tensor dimensions; message names both shapes.
class ShapeError : public Error {
public:
    using Error::Error;
};

// A parameter value outside its domain (dropout rate, window sizes, ...).
class ParamError : public Error {
public:
    using Error::Error;
};

// An operation applied outside its contract (non-scalar loss, ...).
class ContractError : public Error {
public:
    using Error::Error;
};

// An object used in the wrong lifecycle state (backward on a frozen tape).
class StateError : public Error {
public:
    using Error::Error;
};

// Non-finite values where finite ones are required.
class NumericError : public Error {
public:
    using Error::Error;
};

// Configuration file / key problems.
class ConfigError : public Error {
public:
    using Error::Error;
};

// Data ingestion and ordering problems (CSV cells, timestamps, splits).
class DataError : public Error {
public:
    using Error::Error;
};

// A channel whose training-split variance is zero cannot be standardized.
class DegenerateChannelError : public DataError {
public:
    using DataError::DataError;
};

// Malformed or truncated checkpoint / artifact files.
class FormatError : public Error {
public:
    using Error::Error;
};

} // namespace ismrnn
