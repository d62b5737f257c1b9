// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace damoc {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed input bytes (JSONL line, safetensors header, binary magic).
class ParseError : public Error {
public:
    using Error::Error;
};

/// Input parsed but violates a documented invariant or precondition.
class ValidationError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// Pipeline configuration rejected; the message lists every violated field.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Rewriter endpoint or subprocess failed to answer.
class TransportError : public Error {
public:
    using Error::Error;
};

}  // namespace damoc
