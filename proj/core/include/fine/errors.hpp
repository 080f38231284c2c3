#pragma once

#include <stdexcept>
#include <string>

namespace fine {

// Base of every error the library throws. The CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

class ContractError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class IndexError : public Error {
public:
    using Error::Error;
};

class IncompatibleError : public Error {
public:
    using Error::Error;
};

// File-level problems: bad magic, missing tensors, unreadable paths.
class FormatError : public Error {
public:
    using Error::Error;
};

class CorruptionError : public FormatError {
public:
    using FormatError::FormatError;
};

class VersionError : public FormatError {
public:
    using FormatError::FormatError;
};

// Raised when a training loss goes non-finite.
class DivergenceError : public Error {
public:
    DivergenceError(std::size_t step, double last_finite_loss)
        : Error("loss diverged at step " + std::to_string(step) +
                " (last finite loss " + std::to_string(last_finite_loss) + ")"),
          step_(step),
          last_finite_(last_finite_loss) {}

    std::size_t step() const { return step_; }
    double last_finite_loss() const { return last_finite_; }

private:
    std::size_t step_;
    double last_finite_;
};

}  // namespace fine
