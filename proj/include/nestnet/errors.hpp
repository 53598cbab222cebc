#pragma once

#include <stdexcept>
#include <string>

namespace nestnet {

// Invalid configuration: architecture descriptors, weight matrices, CLI flags.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Unreadable or malformed input: datasets, model containers, CSV tables.
struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Training reached a non-finite loss.
struct DivergenceError : std::runtime_error {
  explicit DivergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace nestnet
