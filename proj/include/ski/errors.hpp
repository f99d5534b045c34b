#pragma once

#include <stdexcept>
#include <string>

namespace ski {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid caller input: dimension mismatch, bad index, infeasible budget.
class InputError : public Error {
public:
    using Error::Error;
};

/// A covariance matrix could not be factorized even after the nugget policy.
class NumericError : public Error {
public:
    explicit NumericError(const std::string& what, double smallest_eigenvalue = 0.0)
        : Error(what), smallest_eigenvalue_(smallest_eigenvalue) {}

    [[nodiscard]] double smallest_eigenvalue() const noexcept { return smallest_eigenvalue_; }

private:
    double smallest_eigenvalue_;
};

class FitError : public Error {
public:
    using Error::Error;
};

/// The simulator finished without a single completed part.
class EmptySampleError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    ConfigError(const std::string& what, int line = 0)
        : Error(line > 0 ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}

    [[nodiscard]] int line() const noexcept { return line_; }

private:
    int line_;
};

class FormatError : public Error {
public:
    using Error::Error;
};

}  // namespace ski
