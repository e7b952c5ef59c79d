#pragma once

#include <stdexcept>
#include <string>

namespace cpqlab {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor or parameter shapes that do not compose.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// A non-finite value appeared where a finite one is required.
class NumericError : public Error {
public:
    using Error::Error;
};

/// An argument outside the documented domain of an operation.
class DomainError : public Error {
public:
    using Error::Error;
};

/// Operation not available for this kind of input (e.g. exact model of a continuous env).
class UnsupportedError : public Error {
public:
    using Error::Error;
};

/// Dataset or model file could not be read back.
class LoadError : public Error {
public:
    LoadError(std::size_t record, const std::string& what)
        : Error("record " + std::to_string(record) + ": " + what), record_(record) {}

    std::size_t record() const noexcept { return record_; }

private:
    std::size_t record_;
};

/// Training aborted; carries the step at which it happened.
class TrainingError : public Error {
public:
    TrainingError(long step, const std::string& what)
        : Error("step " + std::to_string(step) + ": " + what), step_(step) {}

    long step() const noexcept { return step_; }

private:
    long step_;
};

}  // namespace cpqlab
