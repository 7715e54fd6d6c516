#pragma once

#include <stdexcept>
#include <string>

namespace mvmc {

// Base class for everything this library throws on purpose. The CLI maps
// subclasses to exit codes; tests match on the concrete types.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Config / input validation problems (bad JSON, unknown keys, out-of-range values).
struct ConfigError : Error {
    using Error::Error;
};

// A coefficient callback returned a non-finite value or had inconsistent shape.
struct ModelEvaluationError : Error {
    using Error::Error;
};

// A simulated state became non-finite; carries the step at which it happened.
struct BlowUpError : Error {
    int step;
    explicit BlowUpError(const std::string& what, int step_) : Error(what), step(step_) {}
};

// Jacobian condition number exceeded the invertibility threshold.
struct SingularJacobianError : Error {
    double condition;
    explicit SingularJacobianError(const std::string& what, double cond)
        : Error(what), condition(cond) {}
};

// Requested derivative order above the shipped cap.
struct OrderExceededError : Error {
    using Error::Error;
};

// A computation needs an analytic model capability (second-derivative pack,
// factored Lions derivative, ...) that the model does not provide.
struct MissingFieldError : Error {
    using Error::Error;
};

// An estimator needed an auxiliary copy path that was not set up.
struct MissingAuxiliaryPathError : Error {
    using Error::Error;
};

// Payoff regularity class does not admit the requested representation.
struct ClassMismatchError : Error {
    using Error::Error;
};

// Vector dimensions disagree (or an operation is only shipped for N == 1).
struct DimensionError : Error {
    using Error::Error;
};

// Density evaluation grid is empty, non-increasing, or otherwise unusable.
struct DegenerateGridError : Error {
    using Error::Error;
};

}  // namespace mvmc
