#pragma once

#include <stdexcept>
#include <string>

namespace sae {

/// Broken geography or dataset structure (orphans, dangling edges, duplicate ids).
class StructuralError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A model specification or configuration that violates a validity rule.
class ValidationError : public std::runtime_error {
public:
    ValidationError(std::string rule, const std::string& what)
        : std::runtime_error(what), rule_(std::move(rule)) {}
    const std::string& rule() const noexcept { return rule_; }

private:
    std::string rule_;
};

/// Missing or malformed input data (e.g. a covariate value absent for a subarea).
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A direct estimate cannot be formed (no effective sample).
class EstimationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Non-finite arithmetic or a failed factorization.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// An iterative solver did not meet its tolerance within its budget.
class ConvergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace sae
