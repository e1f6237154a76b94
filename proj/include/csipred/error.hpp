#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace csipred {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand dimensions disagree.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration or parameter combination.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Non-finite value or singular system.
class NumericError : public Error {
public:
    using Error::Error;
};

/// API misuse such as consuming a tape twice.
class UsageError : public Error {
public:
    using Error::Error;
};

/// Corrupt or truncated binary/text container.
class FormatError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// Training produced a non-finite loss.
class TrainingError : public Error {
public:
    TrainingError(std::size_t epoch, const std::string& what)
        : Error("epoch " + std::to_string(epoch) + ": " + what), epoch_(epoch) {}

    std::size_t epoch() const noexcept { return epoch_; }

private:
    std::size_t epoch_;
};

}  // namespace csipred
