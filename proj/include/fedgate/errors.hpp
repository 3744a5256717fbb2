#pragma once

#include <stdexcept>
#include <string>

namespace fedgate {

// Error families map 1:1 onto CLI exit codes (see tools/fedgate.cpp):
// config=2, data=3, protocol=4, training=5.

class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Wire-format violations carry the byte offset of the first offending byte.
class ProtocolError : public std::runtime_error {
public:
    ProtocolError(const std::string& msg, size_t offset)
        : std::runtime_error(msg + " (at byte offset " + std::to_string(offset) + ")"),
          offset_(offset) {}
    explicit ProtocolError(const std::string& msg) : std::runtime_error(msg), offset_(0) {}
    size_t offset() const { return offset_; }

private:
    size_t offset_;
};

class TrainError : public std::runtime_error {
public:
    explicit TrainError(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor dimension mismatches; messages name the offending axis.
class ShapeError : public std::runtime_error {
public:
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Parameter exchange between models whose layout digests differ.
class IncompatibleModelError : public std::runtime_error {
public:
    explicit IncompatibleModelError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace fedgate
