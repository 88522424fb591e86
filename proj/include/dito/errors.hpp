#pragma once

#include <stdexcept>
#include <string>

namespace dito {

// Every failure raised by the toolkit derives from Error so callers (the CLI in
// particular) can map it to a nonzero exit code with a readable message.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DomainError : Error {
    using Error::Error;
};

struct ShapeError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct SingularityError : Error {
    using Error::Error;
};

struct EvaluationError : Error {
    using Error::Error;
};

struct TrainingError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

}  // namespace dito
