#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mudaf {

// Error classes shared by every module. The CLI maps each kind onto a
// machine-readable JSON error record.
enum class ErrorKind {
    dimension,
    numeric,
    empty_loss,
    degenerate_input,
    usage,
    input,
    config,
    length,
    selection,
    io,
};

std::string_view to_string(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message);

    ErrorKind kind() const noexcept { return kind_; }
    // The message without the kind prefix that what() carries.
    const std::string& message() const noexcept { return message_; }

private:
    ErrorKind kind_;
    std::string message_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& message);

inline void require(bool condition, ErrorKind kind, const std::string& message) {
    if (!condition) fail(kind, message);
}

}  // namespace mudaf
