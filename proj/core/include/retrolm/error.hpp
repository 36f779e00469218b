// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace retrolm {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bad arguments or configuration supplied by the caller. The CLI maps this to exit code 1.
class UsageError : public Error {
public:
    using Error::Error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

/// NaN/Inf observed where finite values are required.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Token id or row index outside its valid range.
class RangeError : public Error {
public:
    using Error::Error;
};

/// Corpus ingestion failure; the message carries `path:line`.
class IngestError : public Error {
public:
    using Error::Error;
};

/// Checkpoint / container parse failure or config mismatch on load.
class LoadError : public Error {
public:
    using Error::Error;
};

/// A batch plan was requested against an index built for a different epoch.
class StaleIndexError : public Error {
public:
    using Error::Error;
};

} // namespace retrolm
