#pragma once

#include <stdexcept>
#include <string>

namespace pipmm {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
    using Error::Error;
};
struct ContractError : Error {
    using Error::Error;
};
struct NumericError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct FormatError : Error {
    FormatError(const std::string& what, std::size_t off)
        : Error(what + " at offset " + std::to_string(off)), offset(off) {}
    std::size_t offset;
};
struct TokenizeError : Error {
    using Error::Error;
};

}  // namespace pipmm
