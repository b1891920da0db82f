#pragma once

#include <stdexcept>
#include <string>

namespace qdalign {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed file content (bad PGM header, unparsable CSV/JSON).
class FormatError : public Error {
public:
    using Error::Error;
};

/// File could not be opened, read, or written.
class IoError : public Error {
public:
    using Error::Error;
};

/// A caller broke a documented precondition.
class ContractError : public Error {
public:
    using Error::Error;
};

/// A least-squares fit failed or produced an unusable result.
class FitError : public Error {
public:
    using Error::Error;
};

/// JᵀJ is singular; `parameter()` names the degenerate direction.
class RankDeficientError : public FitError {
public:
    explicit RankDeficientError(std::string parameter)
        : FitError("rank-deficient normal matrix; degenerate parameter: " + parameter),
          parameter_(std::move(parameter)) {}

    const std::string& parameter() const noexcept { return parameter_; }

private:
    std::string parameter_;
};

/// Design matrix too poorly conditioned to solve (e.g. a too-narrow field span).
class ConditioningError : public FitError {
public:
    using FitError::FitError;
};

/// The image has no line structure to estimate a rotation from.
class NoFeaturesError : public Error {
public:
    using Error::Error;
};

/// The feature sits at the edge of the sampled range (e.g. a spectral peak at the first sample).
class EdgeError : public FitError {
public:
    using FitError::FitError;
};

/// Too few valid measurements to form a result (cross arms, guide sections, transform points).
class DegenerateError : public FitError {
public:
    using FitError::FitError;
};

/// A binary label could not be read unambiguously.
class DecodeError : public Error {
public:
    using Error::Error;
};

}  // namespace qdalign
