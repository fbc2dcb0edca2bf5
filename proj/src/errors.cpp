#include "mudaf/errors.hpp"

namespace mudaf {

std::string_view to_string(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::dimension: return "dimension";
        case ErrorKind::numeric: return "numeric";
        case ErrorKind::empty_loss: return "empty_loss";
        case ErrorKind::degenerate_input: return "degenerate_input";
        case ErrorKind::usage: return "usage";
        case ErrorKind::input: return "input";
        case ErrorKind::config: return "config";
        case ErrorKind::length: return "length";
        case ErrorKind::selection: return "selection";
        case ErrorKind::io: return "io";
    }
    return "unknown";
}

Error::Error(ErrorKind kind, const std::string& message)
    : std::runtime_error(std::string(to_string(kind)) + " error: " + message), kind_(kind), message_(message) {}

void fail(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

}  // namespace mudaf
