#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace tumorseg {

/// Root of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input violates a shape or value invariant (bad mask size, degenerate box, ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration or precondition on user-supplied parameters.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Filesystem or stream failure.
class IoError : public Error {
 public:
  using Error::Error;
};

class NotFoundError : public Error {
 public:
  using Error::Error;
};

/// Key missing from a lookup table (e.g. unknown scan_id in a PatientIdMap).
class LookupError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint or weights do not belong to the requested configuration.
class IncompatibleError : public Error {
 public:
  using Error::Error;
};

/// Dataset content problem. Carries one entry per offending item so loaders can
/// report everything that is wrong in a single pass.
class DataError : public Error {
 public:
  explicit DataError(std::vector<std::string> items)
      : Error(join(items)), items_(std::move(items)) {}
  explicit DataError(const std::string& item) : DataError(std::vector<std::string>{item}) {}

  const std::vector<std::string>& items() const noexcept { return items_; }

 private:
  static std::string join(const std::vector<std::string>& items) {
    if (items.size() == 1) return items.front();
    std::string out = std::to_string(items.size()) + " dataset errors:";
    for (const auto& it : items) out += "\n  - " + it;
    return out;
  }

  std::vector<std::string> items_;
};

}  // namespace tumorseg
