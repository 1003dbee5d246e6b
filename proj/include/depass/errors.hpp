#pragma once

#include <stdexcept>
#include <string>

namespace depass {

/// Bad dimensions or inconsistent model configuration.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Malformed or truncated tensor archive.
class ArchiveError : public std::runtime_error {
public:
    explicit ArchiveError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Bad user-supplied input: tokens, datasets, vocab lookups.
class InputError : public std::runtime_error {
public:
    explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Numeric-domain violations: non-finite logits, zero-vector norms, p_orig = 0.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Decomposed state no longer sums to the traced hidden state.
class ConsistencyError : public NumericError {
public:
    explicit ConsistencyError(const std::string& msg) : NumericError(msg) {}
};

/// API misuse: invalid method/decomposition pairing, masking the residual.
class UsageError : public std::runtime_error {
public:
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace depass
