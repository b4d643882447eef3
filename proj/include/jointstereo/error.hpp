#pragma once

#include <stdexcept>
#include <string>

namespace jointstereo {

// Precondition or shape contract broken by the caller.
class ContractViolation : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed file contents (PFM, PNG, manifest, checkpoint).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// File missing, unreadable or unwritable.
class IoError : public std::runtime_error {
 public:
  IoError(const std::string& path, const std::string& what)
      : std::runtime_error(path + ": " + what), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

// Invalid run configuration or stage ordering.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A loss went non-finite during training.
class NumericalAbort : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Metric requested over an empty mask.
class UndefinedResult : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

#define JS_REQUIRE(cond, msg)                                              \
  do {                                                                     \
    if (!(cond)) throw ::jointstereo::ContractViolation(std::string(msg)); \
  } while (0)

}  // namespace jointstereo
