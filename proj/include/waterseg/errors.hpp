#pragma once

#include <stdexcept>
#include <string>

namespace waterseg {

// Every error the library throws derives from Error and carries a short,
// stable kind tag so the CLI can print one machine-parsable line.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& message)
        : std::runtime_error(message), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& m) : Error("shape", m) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& m) : Error("config", m) {}
};

struct StateError : Error {
    explicit StateError(const std::string& m) : Error("state", m) {}
};

struct ValidationError : Error {
    explicit ValidationError(const std::string& m) : Error("validation", m) {}
};

struct IoError : Error {
    explicit IoError(const std::string& m) : Error("io", m) {}
};

struct DivergenceError : Error {
    explicit DivergenceError(const std::string& m) : Error("divergence", m) {}
};

} // namespace waterseg
