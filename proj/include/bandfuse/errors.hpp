#pragma once

#include <stdexcept>
#include <string>

namespace bandfuse {

/// Base of every error raised by the library. Each subclass names one failure
/// category so callers (and the CLI) can report it without string matching.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& what) : Error("shape error: " + what) {}
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error("configuration error: " + what) {}
};

class DataError : public Error {
public:
    explicit DataError(const std::string& what) : Error("data error: " + what) {}
};

class FormatError : public Error {
public:
    explicit FormatError(const std::string& what) : Error("format error: " + what) {}
};

class SplitError : public Error {
public:
    explicit SplitError(const std::string& what) : Error("split error: " + what) {}
};

class NumericError : public Error {
public:
    explicit NumericError(const std::string& what) : Error("numeric error: " + what) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& what) : Error("I/O error: " + what) {}
};

class RankingError : public Error {
public:
    explicit RankingError(const std::string& what) : Error("ranking error: " + what) {}
};

}  // namespace bandfuse
