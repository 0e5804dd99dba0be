#pragma once

#include <stdexcept>
#include <string>

namespace dumo {

// Each error class maps onto one CLI exit code.
enum class ExitCode : int {
  ok = 0,
  config = 2,
  precondition = 3,
  numerical = 4,
};

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual ExitCode exit_code() const noexcept { return ExitCode::config; }
};

/// Invalid configuration value, unknown enum name, inconsistent layer counts.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Caller passed malformed data (shape mismatch, empty set, length mismatch).
class InputError : public Error {
 public:
  using Error::Error;
};

/// Missing file, checksum mismatch, failed admissibility gate.
class PreconditionError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::precondition; }
};

/// Non-finite loss or parameters. `dump_path` names the state dump, if any.
class NumericalError : public Error {
 public:
  NumericalError(const std::string& what, std::string dump_path)
      : Error(what), dump_path_(std::move(dump_path)) {}
  ExitCode exit_code() const noexcept override { return ExitCode::numerical; }
  const std::string& dump_path() const noexcept { return dump_path_; }

 private:
  std::string dump_path_;
};

/// Architecture drift between cooperating modules; indicates a bug.
class InternalError : public Error {
 public:
  using Error::Error;
};

}  // namespace dumo
