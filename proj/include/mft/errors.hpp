#pragma once

#include <stdexcept>
#include <string>

namespace mft {

// Exit-code contract: 0 ok, 1 usage, 2 data/config, 3 divergence, 4 verification.
class Error : public std::runtime_error {
public:
    Error(std::string msg, int exit_code) : std::runtime_error(std::move(msg)), exit_code_(exit_code) {}
    int exit_code() const { return exit_code_; }

private:
    int exit_code_;
};

class ShapeError : public Error {
public:
    explicit ShapeError(std::string msg) : Error(std::move(msg), 2) {}
};

class ConfigError : public Error {
public:
    explicit ConfigError(std::string msg) : Error(std::move(msg), 2) {}
};

class DataError : public Error {
public:
    explicit DataError(std::string msg) : Error(std::move(msg), 2) {}
};

class SplitError : public Error {
public:
    explicit SplitError(std::string msg) : Error(std::move(msg), 2) {}
};

class GeneratorError : public Error {
public:
    explicit GeneratorError(std::string msg) : Error(std::move(msg), 2) {}
};

class DivergenceError : public Error {
public:
    explicit DivergenceError(std::string msg) : Error(std::move(msg), 3) {}
};

class VerifyError : public Error {
public:
    explicit VerifyError(std::string msg) : Error(std::move(msg), 4) {}
};

} // namespace mft
