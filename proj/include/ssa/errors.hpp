#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ssa {

// Malformed file content. Carries the byte offset where parsing gave up so
// CLI messages can point at the exact spot.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& path, std::size_t offset, const std::string& what)
      : std::runtime_error(path + ": byte " + std::to_string(offset) + ": " + what),
        offset_(offset) {}

  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

// Non-finite values or failed numerical checks.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace ssa
