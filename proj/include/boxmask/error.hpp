#pragma once

#include <stdexcept>
#include <string>

namespace boxmask {

/// Base class for every error raised by the library. `kind()` is a short
/// machine-readable tag used by the command-line front end.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& message)
        : std::runtime_error(message), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

class InvalidArgument : public Error {
public:
    explicit InvalidArgument(const std::string& message) : Error("invalid_argument", message) {}
};

class ShapeMismatch : public Error {
public:
    explicit ShapeMismatch(const std::string& message) : Error("shape_mismatch", message) {}
};

class NonFiniteLoss : public Error {
public:
    explicit NonFiniteLoss(const std::string& message) : Error("non_finite_loss", message) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& message) : Error("io_error", message) {}
};

class FormatError : public Error {
public:
    explicit FormatError(const std::string& message) : Error("format_error", message) {}
};

} // namespace boxmask
