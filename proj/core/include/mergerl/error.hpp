#pragma once

#include <stdexcept>
#include <string>

namespace mergerl {

// Raised when a caller violates an operation's precondition (dimension
// mismatch, out-of-range index, malformed input).
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Raised for malformed text inputs (configs, graph files, scenes). Carries the
// 1-based line number of the offending line, 0 when not line specific.
class ParseError : public std::runtime_error {
 public:
  ParseError(std::string source, int line, const std::string& message)
      : std::runtime_error(source + ":" + std::to_string(line) + ": " + message),
        source_(std::move(source)),
        line_(line) {}

  const std::string& source() const { return source_; }
  int line() const { return line_; }

 private:
  std::string source_;
  int line_;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ContractError(message);
}

}  // namespace mergerl
