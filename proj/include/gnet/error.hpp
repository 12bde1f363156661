#pragma once

#include <stdexcept>
#include <string>

namespace gnet {

// Error categories map 1:1 onto CLI exit codes (see tools/groupnet.cpp).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ModelFormatError : std::runtime_error {
    explicit ModelFormatError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Contract violations (shape mismatch, bad geometry, invalid arguments).
struct InvalidArgument : std::invalid_argument {
    explicit InvalidArgument(const std::string& msg) : std::invalid_argument(msg) {}
};

}  // namespace gnet
