#pragma once

#include <stdexcept>
#include <string>

namespace retloc {

/// Base class for all library errors.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Tensor shape disagreements; the message names the offending shapes.
struct DimensionError : Error {
    using Error::Error;
};

/// API misuse: non-scalar loss, backward reuse, batch too small, etc.
struct UsageError : Error {
    using Error::Error;
};

/// Invalid configuration values (bounds too small, indivisible dims, ...).
struct ConfigError : Error {
    using Error::Error;
};

/// Missing or malformed input files and checkpoints.
struct DataError : Error {
    using Error::Error;
};

/// Non-finite losses or other numeric breakdowns during training.
struct NumericError : Error {
    using Error::Error;
};

/// Hint text that does not match the template grammar.
struct ParseError : Error {
    using Error::Error;
};

/// Token absent from the vocabulary.
struct VocabularyError : Error {
    using Error::Error;
};

}  // namespace retloc
