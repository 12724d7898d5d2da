#pragma once

#include <stdexcept>
#include <string>

namespace capgnn {

/// Operand shapes do not agree.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Input lies outside an operation's mathematical domain (e.g. log of a nonpositive value).
class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Invalid hyperparameter or configuration value.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Dataset or checkpoint content violates its contract.
class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace capgnn
