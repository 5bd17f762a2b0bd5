#pragma once

#include <stdexcept>
#include <string>

namespace dreg {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Shapes or channel counts that do not line up.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// An object is in the wrong state for the request (e.g. warping a z-scored field).
class StateError : public Error {
public:
    using Error::Error;
};

class ArgumentError : public Error {
public:
    using Error::Error;
};

/// Training diverged or could not continue.
class TrainingError : public Error {
public:
    using Error::Error;
};

/// Ingestion and on-disk format failures. Carries the offending sample id or file.
class DataError : public Error {
public:
    DataError(std::string subject, const std::string& what)
        : Error(subject.empty() ? what : subject + ": " + what), subject_(std::move(subject)) {}

    const std::string& subject() const noexcept { return subject_; }

private:
    std::string subject_;
};

}  // namespace dreg
