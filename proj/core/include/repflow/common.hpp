#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace repflow {

using TokenId = std::int32_t;

/// Dense row-major-semantics matrix of doubles; rows are samples (occurrences).
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using MatrixF = Eigen::MatrixXf;

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Precondition violated by the caller (bad sizes, out-of-range parameters).
class InvalidArgument : public Error {
public:
    using Error::Error;
};

/// Malformed or truncated file content.
class CorruptFile : public Error {
public:
    using Error::Error;
};

/// File written by an incompatible format version.
class VersionMismatch : public Error {
public:
    using Error::Error;
};

/// Run configuration failed validation. `field()` holds the JSON path of the offending field.
class ConfigError : public Error {
public:
    ConfigError(std::string field, const std::string& what)
        : Error(field + ": " + what), field_(std::move(field)) {}
    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

inline constexpr const char* kToolVersion = "0.3.0";

}  // namespace repflow
