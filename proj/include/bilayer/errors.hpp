#pragma once

#include <stdexcept>
#include <string>

namespace bilayer {

// Error taxonomy shared by the library and the CLI exit-code mapping.
struct Error : std::runtime_error {
    Error(std::string code, const std::string& msg)
        : std::runtime_error(msg), code(std::move(code)) {}
    std::string code;
};

struct DimensionError : Error {
    explicit DimensionError(const std::string& msg) : Error("dimension", msg) {}
};

struct DomainError : Error {
    explicit DomainError(const std::string& msg) : Error("domain", msg) {}
};

struct ContractError : Error {
    explicit ContractError(const std::string& msg) : Error("contract", msg) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error("config", msg) {}
};

struct LookupError : Error {
    explicit LookupError(const std::string& msg) : Error("lookup", msg) {}
};

struct FeasibilityError : Error {
    explicit FeasibilityError(const std::string& msg) : Error("feasibility", msg) {}
};

struct GenerationError : Error {
    explicit GenerationError(const std::string& msg) : Error("generation", msg) {}
};

struct TrainingError : Error {
    explicit TrainingError(const std::string& msg) : Error("training", msg) {}
};

struct IoError : Error {
    explicit IoError(const std::string& msg) : Error("io", msg) {}
};

}  // namespace bilayer
