#pragma once

#include <stdexcept>
#include <string>

namespace scan {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor shapes are incompatible with the requested operation.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A NaN or infinity reached an operation that requires finite input.
class NumericError : public Error {
public:
    using Error::Error;
};

/// A documented precondition was violated by the caller.
class ContractError : public Error {
public:
    using Error::Error;
};

/// backward() was invoked on a graph whose tape was already replayed.
class TapeConsumedError : public Error {
public:
    using Error::Error;
};

/// Batch statistics requested for a batch that cannot provide them.
class DegenerateBatchError : public Error {
public:
    using Error::Error;
};

/// A SectionCache was reused with a sample it was not built for.
class CacheIdentityError : public Error {
public:
    using Error::Error;
};

/// Malformed or truncated file contents.
class ParseError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration key or value.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
public:
    using Error::Error;
};

}  // namespace scan
