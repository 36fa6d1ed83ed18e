#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cmreid {

// Every failure raised by the library derives from Error so callers (the CLI
// in particular) can report it with a single handler.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error { public: using Error::Error; };
class ParameterError : public Error { public: using Error::Error; };
class DomainError : public Error { public: using Error::Error; };
class NumericError : public Error { public: using Error::Error; };
class BatchStructureError : public Error { public: using Error::Error; };
class DatasetError : public Error { public: using Error::Error; };
class ProtocolError : public Error { public: using Error::Error; };
class TrainingError : public Error { public: using Error::Error; };
class UsageError : public Error { public: using Error::Error; };

class ParseError : public Error {
public:
    ParseError(std::string source, std::size_t line, const std::string& what)
        : Error(source + ":" + std::to_string(line) + ": " + what),
          source_(std::move(source)), line_(line) {}

    const std::string& source() const noexcept { return source_; }
    std::size_t line() const noexcept { return line_; }

private:
    std::string source_;
    std::size_t line_;
};

}  // namespace cmreid
