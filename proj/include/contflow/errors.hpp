#ifndef CONTFLOW_ERRORS_HPP
#define CONTFLOW_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace contflow {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidParameter : public Error {
public:
    using Error::Error;
};

class DimensionMismatch : public Error {
public:
    using Error::Error;
};

class Undersampled : public Error {
public:
    using Error::Error;
};

class CutoffMismatch : public Error {
public:
    using Error::Error;
};

class NonPositiveDensity : public Error {
public:
    using Error::Error;
};

class StepTooLarge : public Error {
public:
    using Error::Error;
};

/// Non-finite state in a time integrator; carries the simulated time.
class BlowUp : public Error {
public:
    BlowUp(const std::string& what, double time) : Error(what), time_(time) {}
    double time() const noexcept { return time_; }

private:
    double time_;
};

/// Non-finite parameters in a training loop; carries the step index.
class Divergence : public Error {
public:
    Divergence(const std::string& what, long step) : Error(what), step_(step) {}
    long step() const noexcept { return step_; }

private:
    long step_;
};

class InvalidConfig : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace contflow

#endif  // CONTFLOW_ERRORS_HPP
