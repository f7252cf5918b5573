#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#define PRIVPART_VERSION_MAJOR 0
#define PRIVPART_VERSION_MINOR 1
#define PRIVPART_VERSION_PATCH 0
#define PRIVPART_VERSION_STRING "0.1.0"

namespace privpart {

// Error taxonomy maps onto CLI exit codes: runtime=1, config=2, network=3.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

struct IoError : Error {
  explicit IoError(const std::string& msg) : Error(msg) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

struct NetError : Error {
  explicit NetError(const std::string& msg) : Error(msg) {}
};

struct DivergenceError : Error {
  explicit DivergenceError(const std::string& msg) : Error(msg) {}
};

}  // namespace privpart
